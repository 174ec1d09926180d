//! Greedy autoregressive generation with a per-layer KV cache.
//!
//! The first token is pinned to BOS (training always places it there); from
//! then on the argmax token is emitted each step. When a `[ROT]` or `[CLIP]`
//! id is produced, the matching head turns the hidden state into a payload,
//! which is appended to the stream and fed back through its learned input
//! projection at the next step, mirroring the teacher-forced layout. Slot
//! counts are therefore consistent by construction.
//!
//! Termination: EOS, the object budget (an `add` beyond `max_objects` is
//! replaced by EOS), or the context limit. In the last case the stream ends
//! without EOS and downstream decoding reports it as malformed rather than
//! this function panicking.

use super::{DecoderError, TrainState};
use crate::codec::{
    HybridTokenStream, SlotPayload, Vocabulary, BOS, CLIP_TOKEN, EOS, ROT_TOKEN,
};

const RMS_EPS: f64 = 1e-6;

fn rms(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = (ms + RMS_EPS).sqrt().recip();
    x.iter().map(|v| v * r).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn matvec(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    debug_assert_eq!(w.len(), out * inp);
    (0..out)
        .map(|o| w[o * inp..(o + 1) * inp].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn add(y: &mut [f64], x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += b;
    }
}

/// Greedy decode of one feature vector into a hybrid token stream.
pub fn generate(
    state: &TrainState,
    features: &[f32],
    max_objects: usize,
) -> Result<HybridTokenStream, DecoderError> {
    let cfg = &state.cfg;
    let layout = state.layout();
    let p = &state.params;
    let (w, v_dim) = (cfg.width, cfg.vocab_size);
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    if features.len() != cfg.feature_dim {
        return Err(DecoderError::FeatureDimMismatch {
            expected: cfg.feature_dim,
            got: features.len(),
        });
    }
    let feat: Vec<f64> = features.iter().map(|&x| f64::from(x)).collect();
    let add_id = Vocabulary::standard()
        .id_of("add")
        .expect("add keyword in vocabulary");

    let mut k_cache: Vec<Vec<f64>> = vec![Vec::new(); cfg.layers];
    let mut v_cache: Vec<Vec<f64>> = vec![Vec::new(); cfg.layers];

    let mut tokens: Vec<u32> = Vec::new();
    let mut slots: Vec<SlotPayload> = Vec::new();
    let mut last_payload: Option<SlotPayload> = None;
    let mut objects = 0usize;

    for t in 0..cfg.context {
        // Input embedding for position t.
        let mut x = p[layout.pos_emb.clone()][t * w..(t + 1) * w].to_vec();
        if t == 0 {
            add(&mut x, &matvec(&p[layout.feat_w.clone()], &feat, w));
            add(&mut x, &p[layout.feat_b.clone()]);
        } else {
            let prev = tokens[t - 1] as usize;
            add(&mut x, &p[layout.tok_emb.clone()][prev * w..(prev + 1) * w]);
            match &last_payload {
                Some(SlotPayload::Rot(m)) => {
                    let m9: Vec<f64> = m.iter().map(|&v| f64::from(v)).collect();
                    add(&mut x, &matvec(&p[layout.rot_in.clone()], &m9, w));
                }
                Some(SlotPayload::Clip(c)) => {
                    let cd: Vec<f64> = c.iter().map(|&v| f64::from(v)).collect();
                    add(&mut x, &matvec(&p[layout.clip_in.clone()], &cd, w));
                }
                None => {}
            }
            last_payload = None;
        }

        // Trunk with KV cache.
        for (li, ls) in layout.layers.iter().enumerate() {
            let n1 = rms(&x);
            let q = matvec(&p[ls.wq.clone()], &n1, w);
            let k = matvec(&p[ls.wk.clone()], &n1, w);
            let v = matvec(&p[ls.wv.clone()], &n1, w);
            k_cache[li].extend_from_slice(&k);
            v_cache[li].extend_from_slice(&v);
            let steps = t + 1;
            let mut att = vec![0.0f64; w];
            for h in 0..heads {
                let hoff = h * dh;
                let qh = &q[hoff..hoff + dh];
                let mut scores = Vec::with_capacity(steps);
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..steps {
                    let kj = &k_cache[li][j * w + hoff..j * w + hoff + dh];
                    let s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                    scores.push(s);
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - maxv).exp();
                    sum += *s;
                }
                for (j, s) in scores.iter().enumerate() {
                    let a = s / sum;
                    let vj = &v_cache[li][j * w + hoff..j * w + hoff + dh];
                    for d in 0..dh {
                        att[hoff + d] += a * vj[d];
                    }
                }
            }
            add(&mut x, &matvec(&p[ls.wo.clone()], &att, w));
            let n2 = rms(&x);
            let mut f1 = p[ls.fc1_b.clone()].to_vec();
            add(&mut f1, &matvec(&p[ls.fc1.clone()], &n2, 4 * w));
            let g: Vec<f64> = f1.iter().map(|&v| gelu(v)).collect();
            add(&mut x, &matvec(&p[ls.fc2.clone()], &g, w));
            add(&mut x, &p[ls.fc2_b.clone()]);
        }
        let hidden = rms(&x);

        // First position is the conditioning slot; its token is fixed BOS.
        if t == 0 {
            tokens.push(BOS);
            continue;
        }

        let mut logits = p[layout.out_b.clone()].to_vec();
        add(&mut logits, &matvec(&p[layout.out_w.clone()], &hidden, v_dim));
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &z) in logits.iter().enumerate() {
            if z > best_v {
                best_v = z;
                best = i;
            }
        }
        let mut tok = best as u32;

        if tok == add_id && objects == max_objects {
            tok = EOS;
        }
        if tok == add_id {
            objects += 1;
        }

        if tok == ROT_TOKEN {
            let mut r1 = p[layout.rot_b1.clone()].to_vec();
            add(&mut r1, &matvec(&p[layout.rot_w1.clone()], &hidden, cfg.rot_hidden));
            let rg: Vec<f64> = r1.iter().map(|&v| gelu(v)).collect();
            let mut out9 = p[layout.rot_b2.clone()].to_vec();
            add(&mut out9, &matvec(&p[layout.rot_w2.clone()], &rg, 9));
            let payload = SlotPayload::Rot(std::array::from_fn(|i| out9[i] as f32));
            slots.push(payload.clone());
            last_payload = Some(payload);
        } else if tok == CLIP_TOKEN {
            let mut pred = p[layout.clip_b.clone()].to_vec();
            add(&mut pred, &matvec(&p[layout.clip_w.clone()], &hidden, cfg.dim));
            let payload = SlotPayload::Clip(pred.iter().map(|&v| v as f32).collect());
            slots.push(payload.clone());
            last_payload = Some(payload);
        }

        tokens.push(tok);
        if tok == EOS {
            break;
        }
    }

    Ok(HybridTokenStream { tokens, slots })
}
