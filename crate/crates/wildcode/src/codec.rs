//! Conversion between scene programs and hybrid token streams.
//!
//! Program text tokenizes over a small fixed vocabulary (keywords,
//! punctuation, digit-wise numbers). The `[ROT]` and `[CLIP]` literals become
//! reserved token ids whose continuous payloads ride alongside the id
//! sequence, aligned by occurrence order. The binary layout is documented in
//! `docs/formats.md`.

use crate::rot::{matrix_from_row_major, symmetric_orthogonalize, Rotation};
use crate::scene::{
    emit_program, parse_program_with, EmbeddingSlot, ParseError, ParseOptions, PixelsMode,
    RotationSlot, SceneProgram,
};
use std::io::{Read, Write};

pub type TokenId = u32;

/// Magic bytes of the binary stream format.
pub const STREAM_MAGIC: [u8; 4] = *b"WCTS";
/// Version written by this build.
pub const STREAM_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CodecError {
    #[error("unresolved {0} slot at occurrence {1}; payloads are required for encoding")]
    UnresolvedSlot(&'static str, usize),
    #[error("stream has {tokens} {kind} tokens but {payloads} payloads")]
    SlotCountMismatch {
        kind: &'static str,
        tokens: usize,
        payloads: usize,
    },
    #[error("payload underflow: {0} token without a payload")]
    SlotUnderflow(&'static str),
    #[error("payload type mismatch at occurrence {0}")]
    SlotTypeMismatch(usize),
    #[error("token id {0} is not in the vocabulary")]
    UnknownToken(TokenId),
    #[error("truncated stream: {0}")]
    Truncated(&'static str),
    #[error("token text does not form a program: {0}")]
    Grammar(#[from] ParseError),
    #[error("text cannot be tokenized at byte {0}")]
    Unlexable(usize),
    #[error("embedding dimension {got} does not match stream dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad magic bytes; not a token stream file")]
    BadMagic,
    #[error("unsupported stream version {0}")]
    BadVersion(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A continuous payload carried by one special-token occurrence.
#[derive(Debug, Clone, PartialEq)]
pub enum SlotPayload {
    /// Row-major 3x3 matrix, pre-orthogonalization.
    Rot([f32; 9]),
    /// Appearance embedding.
    Clip(Vec<f32>),
}

/// Discrete token ids interleaved with typed continuous payloads.
///
/// The k-th element of `slots` belongs to the k-th occurrence of a special
/// token (ROT or CLIP) in `tokens`, reading left to right.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridTokenStream {
    pub tokens: Vec<TokenId>,
    pub slots: Vec<SlotPayload>,
}

impl HybridTokenStream {
    pub fn count_token(&self, id: TokenId) -> usize {
        self.tokens.iter().filter(|&&t| t == id).count()
    }
}

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const ROT_TOKEN: TokenId = 2;
pub const CLIP_TOKEN: TokenId = 3;

const TEXT_TOKENS: [&str; 35] = [
    "0",
    "1",
    "2",
    "3",
    "4",
    "5",
    "6",
    "7",
    "8",
    "9",
    "-",
    ".",
    ",",
    " ",
    "(",
    ")",
    "=",
    "\n",
    "set_sun_intensity",
    "set_sun_elevation",
    "set_sun_size",
    "set_camera",
    "set_atmospheric_density",
    "set_ozone",
    "set_sun_rotation",
    "set_dust",
    "set_sun_strength",
    "set_air",
    "set_ground",
    "add",
    "pixels",
    "loc",
    "height",
    "rotation",
    "appearance",
];

/// The fixed DSL vocabulary: reserved ids first, then digits, punctuation,
/// and keywords. Ids are stable across builds; see `docs/formats.md`.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    texts: Vec<&'static str>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::standard()
    }
}

impl Vocabulary {
    pub fn standard() -> Self {
        Vocabulary {
            texts: TEXT_TOKENS.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        4 + self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Text of a token id. Specials render as their literals.
    pub fn text(&self, id: TokenId) -> Result<&str, CodecError> {
        match id {
            BOS => Ok("<bos>"),
            EOS => Ok("<eos>"),
            ROT_TOKEN => Ok("[ROT]"),
            CLIP_TOKEN => Ok("[CLIP]"),
            _ => self
                .texts
                .get(id as usize - 4)
                .copied()
                .ok_or(CodecError::UnknownToken(id)),
        }
    }

    /// Id of a text token, if present.
    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.texts
            .iter()
            .position(|t| *t == text)
            .map(|i| (i + 4) as TokenId)
    }

    /// Greedy longest-match tokenization of program text. `[ROT]` and
    /// `[CLIP]` literals become their reserved ids.
    pub fn lex(&self, text: &str) -> Result<Vec<TokenId>, CodecError> {
        let mut out = Vec::with_capacity(text.len());
        let bytes = text.as_bytes();
        let mut pos = 0;
        while pos < bytes.len() {
            let rest = &text[pos..];
            if rest.starts_with("[ROT]") {
                out.push(ROT_TOKEN);
                pos += 5;
                continue;
            }
            if rest.starts_with("[CLIP]") {
                out.push(CLIP_TOKEN);
                pos += 6;
                continue;
            }
            let mut matched: Option<(TokenId, usize)> = None;
            for (i, t) in self.texts.iter().enumerate() {
                if rest.starts_with(t) && matched.is_none_or(|(_, l)| t.len() > l) {
                    matched = Some(((i + 4) as TokenId, t.len()));
                }
            }
            match matched {
                Some((id, len)) => {
                    out.push(id);
                    pos += len;
                }
                None => return Err(CodecError::Unlexable(pos)),
            }
        }
        Ok(out)
    }

    /// Inverse of [`Vocabulary::lex`]: concatenates token texts, rendering
    /// special ids as their literals. BOS/EOS contribute nothing.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Result<String, CodecError> {
        let mut out = String::new();
        for &t in tokens {
            match t {
                BOS | EOS => {}
                ROT_TOKEN => out.push_str("[ROT]"),
                CLIP_TOKEN => out.push_str("[CLIP]"),
                _ => out.push_str(self.text(t)?),
            }
        }
        Ok(out)
    }
}

/// Encodes a program as `BOS <tokens> EOS` with payloads drawn from its
/// resolved slots in reading order (ground, then per object rotation and
/// appearance). Unresolved slots are an error: text form cannot carry them.
pub fn encode(p: &SceneProgram, vocab: &Vocabulary) -> Result<HybridTokenStream, CodecError> {
    let text = emit_program(p);
    let mut tokens = vec![BOS];
    tokens.extend(vocab.lex(&text)?);
    tokens.push(EOS);

    let mut slots = Vec::new();
    let mut occurrence = 0usize;
    let mut push_clip = |slot: &EmbeddingSlot, slots: &mut Vec<SlotPayload>| {
        occurrence += 1;
        match slot {
            EmbeddingSlot::Resolved(v) => {
                slots.push(SlotPayload::Clip(v.clone()));
                Ok(())
            }
            EmbeddingSlot::Unresolved => Err(CodecError::UnresolvedSlot("[CLIP]", occurrence)),
            EmbeddingSlot::Named(_) => Ok(()), // no token emitted, no payload
        }
    };

    push_clip(&p.attributes.ground, &mut slots)?;
    for (i, obj) in p.objects.iter().enumerate() {
        match &obj.rotation {
            RotationSlot::Resolved(r) => {
                let m = r.to_row_major();
                slots.push(SlotPayload::Rot(std::array::from_fn(|k| m[k] as f32)));
            }
            RotationSlot::Unresolved => {
                return Err(CodecError::UnresolvedSlot("[ROT]", i + 1));
            }
        }
        push_clip(&obj.appearance, &mut slots)?;
    }

    let stream = HybridTokenStream { tokens, slots };
    debug_assert!(check_slot_alignment(&stream).is_ok());
    Ok(stream)
}

fn check_slot_alignment(s: &HybridTokenStream) -> Result<(), CodecError> {
    let rot_tokens = s.count_token(ROT_TOKEN);
    let clip_tokens = s.count_token(CLIP_TOKEN);
    let rot_payloads = s
        .slots
        .iter()
        .filter(|p| matches!(p, SlotPayload::Rot(_)))
        .count();
    let clip_payloads = s.slots.len() - rot_payloads;
    if rot_tokens != rot_payloads {
        return Err(CodecError::SlotCountMismatch {
            kind: "[ROT]",
            tokens: rot_tokens,
            payloads: rot_payloads,
        });
    }
    if clip_tokens != clip_payloads {
        return Err(CodecError::SlotCountMismatch {
            kind: "[CLIP]",
            tokens: clip_tokens,
            payloads: clip_payloads,
        });
    }
    Ok(())
}

/// Decodes a stream back to a program. Rotation payloads pass through
/// symmetric orthogonalization; the result always satisfies the rotation
/// invariant regardless of payload noise.
pub fn decode(s: &HybridTokenStream, vocab: &Vocabulary) -> Result<SceneProgram, CodecError> {
    if s.tokens.first() != Some(&BOS) || s.tokens.last() != Some(&EOS) {
        return Err(CodecError::Truncated("missing BOS/EOS framing"));
    }
    check_slot_alignment(s)?;

    // Payload types must follow token order: a ROT token takes the next
    // payload and it must be a Rot, likewise for CLIP.
    let mut remaining = s.slots.iter();
    for &t in &s.tokens {
        if t == ROT_TOKEN || t == CLIP_TOKEN {
            let payload = remaining.next().ok_or(CodecError::SlotUnderflow(
                if t == ROT_TOKEN { "[ROT]" } else { "[CLIP]" },
            ))?;
            let ok = matches!(
                (t, payload),
                (ROT_TOKEN, SlotPayload::Rot(_)) | (CLIP_TOKEN, SlotPayload::Clip(_))
            );
            if !ok {
                let idx = s.slots.len() - remaining.len();
                return Err(CodecError::SlotTypeMismatch(idx));
            }
        }
    }

    let text = vocab.detokenize(&s.tokens)?;
    let opts = ParseOptions {
        pixels: PixelsMode::Optional,
    };
    let mut program = parse_program_with(&text, opts)?;

    fn next_clip(slot: &mut EmbeddingSlot, payloads: &mut std::slice::Iter<'_, SlotPayload>) {
        if matches!(slot, EmbeddingSlot::Unresolved) {
            if let Some(SlotPayload::Clip(v)) = payloads.next() {
                *slot = EmbeddingSlot::Resolved(v.clone());
            }
        }
    }
    let mut payloads = s.slots.iter();
    next_clip(&mut program.attributes.ground, &mut payloads);
    for obj in &mut program.objects {
        if matches!(obj.rotation, RotationSlot::Unresolved) {
            if let Some(SlotPayload::Rot(m)) = payloads.next() {
                let wide: [f64; 9] = std::array::from_fn(|k| f64::from(m[k]));
                let mat = matrix_from_row_major(&wide);
                // Orthogonalization is idempotent on SO(3); skipping it for
                // payloads that already are rotations keeps decode/encode
                // bit-exact mutual inverses.
                let r = Rotation::try_new(mat, crate::rot::ROTATION_TOL)
                    .unwrap_or_else(|_| symmetric_orthogonalize(&mat));
                obj.rotation = RotationSlot::Resolved(r);
            }
        }
        next_clip(&mut obj.appearance, &mut payloads);
    }

    Ok(program)
}

/// Writes the binary stream format: header (magic, version, embedding
/// dimension, token count), little-endian u32 token ids, then payload f32
/// blocks in occurrence order.
pub fn write_stream<W: Write>(
    w: &mut W,
    s: &HybridTokenStream,
    dim: usize,
) -> Result<(), CodecError> {
    for p in &s.slots {
        if let SlotPayload::Clip(v) = p {
            if v.len() != dim {
                return Err(CodecError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
    }
    w.write_all(&STREAM_MAGIC)?;
    w.write_all(&STREAM_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(s.tokens.len() as u32).to_le_bytes())?;
    for t in &s.tokens {
        w.write_all(&t.to_le_bytes())?;
    }
    for p in &s.slots {
        match p {
            SlotPayload::Rot(m) => {
                for v in m {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            SlotPayload::Clip(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// Reads the binary stream format written by [`write_stream`]. Payload
/// counts and types are implied by the token sequence. Returns the stream
/// and the embedding dimension from the header.
pub fn read_stream<R: Read>(r: &mut R) -> Result<(HybridTokenStream, usize), CodecError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CodecError::Truncated("header"))?;
    if magic != STREAM_MAGIC {
        return Err(CodecError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != STREAM_VERSION {
        return Err(CodecError::BadVersion(version));
    }
    let dim = read_u32(r)? as usize;
    let n_tokens = read_u32(r)? as usize;
    let mut tokens = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(read_u32(r)?);
    }
    let mut slots = Vec::new();
    for &t in &tokens {
        match t {
            ROT_TOKEN => {
                let mut m = [0f32; 9];
                for v in &mut m {
                    *v = read_f32(r)?;
                }
                slots.push(SlotPayload::Rot(m));
            }
            CLIP_TOKEN => {
                let mut v = Vec::with_capacity(dim);
                for _ in 0..dim {
                    v.push(read_f32(r)?);
                }
                slots.push(SlotPayload::Clip(v));
            }
            _ => {}
        }
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(CodecError::Truncated("trailing bytes after payloads"));
    }
    Ok((HybridTokenStream { tokens, slots }, dim))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CodecError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CodecError::Truncated("u32 field"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32, CodecError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CodecError::Truncated("f32 payload"))?;
    Ok(f32::from_le_bytes(b))
}

pub fn write_stream_file(
    path: &std::path::Path,
    s: &HybridTokenStream,
    dim: usize,
) -> Result<(), CodecError> {
    let mut buf = Vec::new();
    write_stream(&mut buf, s, dim)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_stream_file(path: &std::path::Path) -> Result<(HybridTokenStream, usize), CodecError> {
    let data = std::fs::read(path)?;
    read_stream(&mut std::io::Cursor::new(data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ObjectRecord, SceneAttributes};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn resolved_program(
        n_objects: usize,
        d: usize,
        rng: &mut ChaCha8Rng,
    ) -> SceneProgram {
        let mut emb = |rng: &mut ChaCha8Rng| {
            EmbeddingSlot::Resolved((0..d).map(|_| rng.gen::<f32>() - 0.5).collect())
        };
        let mut attrs = SceneAttributes::default().with_numeric_values(std::array::from_fn(|_| {
            rng.gen::<f64>() * 2.0
        }));
        attrs.sun_rotation = rng.gen::<f64>() * 359.0;
        attrs.ground = emb(rng);
        let mut pixels: Vec<u32> = (0..n_objects).map(|_| rng.gen_range(0..5000)).collect();
        pixels.sort_unstable_by(|a, b| b.cmp(a));
        let objects = (0..n_objects)
            .map(|i| ObjectRecord {
                pixels: Some(pixels[i]),
                loc: [
                    rng.gen::<f64>() * 4.0 - 2.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    -(rng.gen::<f64>() * 30.0 + 5.0),
                ],
                height: rng.gen::<f64>() * 3.0 + 0.2,
                rotation: RotationSlot::Resolved(crate::rot::Rotation::about_z(
                    rng.gen::<f64>() * std::f64::consts::TAU,
                )),
                appearance: emb(rng),
            })
            .collect();
        SceneProgram {
            attributes: attrs,
            objects,
        }
    }

    #[test]
    fn slot_counts_match_structure() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let empty = resolved_program(0, 8, &mut rng);
        let s = encode(&empty, &vocab).unwrap();
        assert_eq!(s.count_token(CLIP_TOKEN), 1);
        assert_eq!(s.count_token(ROT_TOKEN), 0);

        let two = resolved_program(2, 8, &mut rng);
        let s = encode(&two, &vocab).unwrap();
        assert_eq!(s.count_token(ROT_TOKEN), 2);
        assert_eq!(s.count_token(CLIP_TOKEN), 3);
        assert_eq!(s.slots.len(), 5);
    }

    #[test]
    fn unresolved_slot_is_rejected() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = resolved_program(1, 8, &mut rng);
        p.objects[0].appearance = EmbeddingSlot::Unresolved;
        assert!(matches!(
            encode(&p, &vocab),
            Err(CodecError::UnresolvedSlot("[CLIP]", _))
        ));
        let mut p2 = resolved_program(1, 8, &mut rng);
        p2.objects[0].rotation = RotationSlot::Unresolved;
        assert!(matches!(
            encode(&p2, &vocab),
            Err(CodecError::UnresolvedSlot("[ROT]", _))
        ));
    }

    #[test]
    fn decode_inverts_encode() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [0usize, 1, 3, 25] {
            let p = resolved_program(n, 6, &mut rng);
            let s = encode(&p, &vocab).unwrap();
            let back = decode(&s, &vocab).unwrap();
            // Re-encoding the decoded program reproduces the stream exactly.
            let s2 = encode(&back, &vocab).unwrap();
            assert_eq!(s, s2);
            assert_eq!(back.objects.len(), n);
            for (a, b) in p.objects.iter().zip(&back.objects) {
                assert_eq!(a.pixels, b.pixels);
                let ra = a.rotation.resolved().unwrap();
                let rb = b.rotation.resolved().unwrap();
                assert!((ra.matrix() - rb.matrix()).norm() < 1e-5);
                assert_eq!(a.appearance, b.appearance);
            }
        }
    }

    #[test]
    fn named_slots_become_text_tokens() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = resolved_program(1, 8, &mut rng);
        p.attributes.ground = EmbeddingSlot::Named(3389);
        p.objects[0].appearance = EmbeddingSlot::Named(217);
        let s = encode(&p, &vocab).unwrap();
        assert_eq!(s.count_token(CLIP_TOKEN), 0);
        assert_eq!(s.count_token(ROT_TOKEN), 1);
        assert_eq!(s.slots.len(), 1);
        let back = decode(&s, &vocab).unwrap();
        assert_eq!(back.attributes.ground, EmbeddingSlot::Named(3389));
        assert_eq!(back.objects[0].appearance, EmbeddingSlot::Named(217));
    }

    #[test]
    fn missing_payload_is_detected() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = resolved_program(1, 8, &mut rng);
        let mut s = encode(&p, &vocab).unwrap();
        s.slots.pop();
        let err = decode(&s, &vocab).unwrap_err();
        assert!(matches!(err, CodecError::SlotCountMismatch { .. }));
    }

    #[test]
    fn swapped_payload_types_rejected() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = resolved_program(1, 9, &mut rng);
        let mut s = encode(&p, &vocab).unwrap();
        // Counts still match after the swap; order does not.
        s.slots.swap(1, 2);
        let err = decode(&s, &vocab).unwrap_err();
        assert!(matches!(err, CodecError::SlotTypeMismatch(_)));
    }

    #[test]
    fn noisy_rot_payload_is_orthogonalized() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = resolved_program(1, 8, &mut rng);
        let mut s = encode(&p, &vocab).unwrap();
        let noisy: [f32; 9] = std::array::from_fn(|_| rng.gen::<f32>() * 2.0 - 1.0);
        for slot in &mut s.slots {
            if let SlotPayload::Rot(m) = slot {
                *m = noisy;
            }
        }
        let back = decode(&s, &vocab).unwrap();
        let got = back.objects[0].rotation.resolved().unwrap();
        let wide: [f64; 9] = std::array::from_fn(|k| f64::from(noisy[k]));
        let expect = symmetric_orthogonalize(&matrix_from_row_major(&wide));
        assert!((got.matrix() - expect.matrix()).norm() < 1e-12);
    }

    #[test]
    fn truncated_stream_rejected() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = resolved_program(1, 8, &mut rng);
        let mut s = encode(&p, &vocab).unwrap();
        s.tokens.pop(); // drop EOS
        assert!(matches!(decode(&s, &vocab), Err(CodecError::Truncated(_))));
    }

    #[test]
    fn binary_roundtrip_is_bit_exact() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = resolved_program(3, 12, &mut rng);
        let s = encode(&p, &vocab).unwrap();
        let mut buf = Vec::new();
        write_stream(&mut buf, &s, 12).unwrap();
        let (back, dim) = read_stream(&mut std::io::Cursor::new(buf.clone())).unwrap();
        assert_eq!(dim, 12);
        assert_eq!(back, s);
        let mut buf2 = Vec::new();
        write_stream(&mut buf2, &back, 12).unwrap();
        assert_eq!(buf, buf2);

        let short = &buf[..buf.len() - 3];
        assert!(read_stream(&mut std::io::Cursor::new(short.to_vec())).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_stream(&mut std::io::Cursor::new(bad)),
            Err(CodecError::BadMagic)
        ));
    }

    #[test]
    fn token_count_is_deterministic_in_text() {
        let vocab = Vocabulary::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = resolved_program(2, 8, &mut rng);
        let s = encode(&p, &vocab).unwrap();
        let text = emit_program(&p);
        let lexed = vocab.lex(&text).unwrap();
        assert_eq!(s.tokens.len(), lexed.len() + 2);
    }
}
