//! A small causal self-attention decoder with hybrid output heads: a
//! next-token classifier plus rotation and embedding regression heads wired
//! to the `[ROT]`/`[CLIP]` token positions. Trained teacher-forced to invert
//! the synthetic forward features into token streams.
//!
//! Everything runs in f64 with hand-written backward passes, so analytic
//! gradients can be checked against finite differences tightly.

mod generate;
mod gradcheck;
mod model;
mod train;

pub use generate::generate;
pub use gradcheck::{grad_check, GradCheckReport};
pub use model::{teacher_forced_loss, LossBreakdown};
pub use train::{train, LoadedDataset, StepMetrics, TrainOptions, TrainSample};

use crate::datagen::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::ops::Range;
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum DecoderError {
    #[error("stream length {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("feature vector has length {got}, config expects {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("payload dimension {got} does not match config dim {expected}")]
    PayloadDimMismatch { expected: usize, got: usize },
    #[error("token id {0} out of vocabulary range")]
    TokenOutOfRange(u32),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which appearance pathway the model trains: the continuous embedding head
/// or discrete integer names in the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    ClipHead,
    DiscreteName,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::ClipHead => write!(f, "clip"),
            Variant::DiscreteName => write!(f, "discrete"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Maximum sequence length; must cover the longest encoded program.
    pub context: usize,
    pub vocab_size: usize,
    /// Appearance embedding dimension d.
    pub dim: usize,
    /// Conditioning feature vector length.
    pub feature_dim: usize,
    pub learning_rate: f64,
    /// Norm-regularizer weight of the embedding loss.
    pub lambda: f64,
    pub variant: Variant,
    pub pixels_conditioning: bool,
    /// Weights of (ce, rot, clip) in the total loss.
    pub loss_weights: (f64, f64, f64),
    /// Hidden width of the rotation head MLP.
    pub rot_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            layers: 2,
            width: 128,
            heads: 4,
            context: 1024,
            vocab_size: crate::codec::Vocabulary::standard().len(),
            dim: 32,
            feature_dim: 74,
            learning_rate: 1e-3,
            lambda: 0.1,
            variant: Variant::ClipHead,
            pixels_conditioning: true,
            loss_weights: (1.0, 1.0, 1.0),
            rot_hidden: 32,
        }
    }
}

impl DecoderConfig {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn check(&self) {
        assert!(self.heads >= 1 && self.width % self.heads == 0);
        assert!(self.context >= 2);
        assert!(self.rot_hidden >= 1);
    }
}

type Seg = Range<usize>;

#[derive(Debug, Clone)]
pub(crate) struct LayerSeg {
    pub wq: Seg,
    pub wk: Seg,
    pub wv: Seg,
    pub wo: Seg,
    pub fc1: Seg,
    pub fc1_b: Seg,
    pub fc2: Seg,
    pub fc2_b: Seg,
}

/// Offsets of every tensor inside the flat parameter vector. The order is
/// fixed, so checkpoints are layout-stable for a given config.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub feat_w: Seg,
    pub feat_b: Seg,
    pub tok_emb: Seg,
    pub pos_emb: Seg,
    pub rot_in: Seg,
    pub clip_in: Seg,
    pub layers: Vec<LayerSeg>,
    pub out_w: Seg,
    pub out_b: Seg,
    pub rot_w1: Seg,
    pub rot_b1: Seg,
    pub rot_w2: Seg,
    pub rot_b2: Seg,
    pub clip_w: Seg,
    pub clip_b: Seg,
    pub total: usize,
    /// Parameters below this offset belong to the shared trunk (everything
    /// except the output heads).
    pub trunk_len: usize,
}

impl Layout {
    pub fn new(cfg: &DecoderConfig) -> Layout {
        cfg.check();
        let (w, v, c) = (cfg.width, cfg.vocab_size, cfg.context);
        struct Alloc {
            at: usize,
        }
        impl Alloc {
            fn seg(&mut self, len: usize) -> Seg {
                let r = self.at..self.at + len;
                self.at += len;
                r
            }
        }
        let mut a = Alloc { at: 0 };
        let feat_w = a.seg(w * cfg.feature_dim);
        let feat_b = a.seg(w);
        let tok_emb = a.seg(v * w);
        let pos_emb = a.seg(c * w);
        let rot_in = a.seg(w * 9);
        let clip_in = a.seg(w * cfg.dim);
        let layers = (0..cfg.layers)
            .map(|_| LayerSeg {
                wq: a.seg(w * w),
                wk: a.seg(w * w),
                wv: a.seg(w * w),
                wo: a.seg(w * w),
                fc1: a.seg(4 * w * w),
                fc1_b: a.seg(4 * w),
                fc2: a.seg(w * 4 * w),
                fc2_b: a.seg(w),
            })
            .collect();
        let trunk_len = a.at;
        let out_w = a.seg(v * w);
        let out_b = a.seg(v);
        let rot_w1 = a.seg(cfg.rot_hidden * w);
        let rot_b1 = a.seg(cfg.rot_hidden);
        let rot_w2 = a.seg(9 * cfg.rot_hidden);
        let rot_b2 = a.seg(9);
        let clip_w = a.seg(cfg.dim * w);
        let clip_b = a.seg(cfg.dim);
        let at = a.at;
        Layout {
            feat_w,
            feat_b,
            tok_emb,
            pos_emb,
            rot_in,
            clip_in,
            layers,
            out_w,
            out_b,
            rot_w1,
            rot_b1,
            rot_w2,
            rot_b2,
            clip_w,
            clip_b,
            total: at,
            trunk_len,
        }
    }
}

/// Model parameters plus optimizer moments; deterministic given the seed
/// and the sequence of updates applied.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: DecoderConfig,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    /// Fresh state with small Gaussian init; residual output projections
    /// start at zero.
    pub fn init(cfg: DecoderConfig, seed: u64) -> TrainState {
        let layout = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 10, 0));
        let mut params = vec![0.0f64; layout.total];
        let fill = |seg: &Seg, std: f64, params: &mut Vec<f64>, rng: &mut ChaCha8Rng| {
            for x in &mut params[seg.clone()] {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen();
                *x = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        };
        fill(&layout.feat_w, 0.02, &mut params, &mut rng);
        fill(&layout.tok_emb, 0.02, &mut params, &mut rng);
        fill(&layout.pos_emb, 0.02, &mut params, &mut rng);
        fill(&layout.rot_in, 0.02, &mut params, &mut rng);
        fill(&layout.clip_in, 0.02, &mut params, &mut rng);
        for l in &layout.layers {
            fill(&l.wq, 0.02, &mut params, &mut rng);
            fill(&l.wk, 0.02, &mut params, &mut rng);
            fill(&l.wv, 0.02, &mut params, &mut rng);
            // wo and fc2 stay zero: residual branches start as identity.
            fill(&l.fc1, 0.02, &mut params, &mut rng);
        }
        fill(&layout.out_w, 0.02, &mut params, &mut rng);
        fill(&layout.rot_w1, 0.05, &mut params, &mut rng);
        fill(&layout.rot_w2, 0.05, &mut params, &mut rng);
        fill(&layout.clip_w, 0.05, &mut params, &mut rng);
        let total = layout.total;
        TrainState {
            cfg,
            params,
            m: vec![0.0; total],
            v: vec![0.0; total],
            step: 0,
            seed,
        }
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(&self.cfg)
    }

    /// Number of parameters in the shared trunk (heads excluded).
    pub fn trunk_param_count(&self) -> usize {
        self.layout().trunk_len
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// One Adam update with bias correction and fixed learning rate.
    pub fn adam_step(&mut self, grads: &[f64]) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.step += 1;
        let t = self.step as i32;
        let lr = self.cfg.learning_rate * (1.0 - BETA2.powi(t)).sqrt() / (1.0 - BETA1.powi(t));
        for i in 0..self.params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            self.params[i] -= lr * self.m[i] / (self.v[i].sqrt() + EPS);
        }
    }

    /// Versioned binary checkpoint: magic, version, JSON header (config,
    /// step, seed), then raw little-endian f64 params and moments.
    pub fn save(&self, path: &Path) -> Result<(), DecoderError> {
        #[derive(Serialize)]
        struct Header<'a> {
            cfg: &'a DecoderConfig,
            step: u64,
            seed: u64,
            params: usize,
        }
        let header = serde_json::to_vec(&Header {
            cfg: &self.cfg,
            step: self.step,
            seed: self.seed,
            params: self.params.len(),
        })
        .map_err(|e| DecoderError::Checkpoint(e.to_string()))?;
        let mut buf = Vec::with_capacity(16 + header.len() + self.params.len() * 24);
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for series in [&self.params, &self.m, &self.v] {
            for x in series.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainState, DecoderError> {
        #[derive(Deserialize)]
        struct Header {
            cfg: DecoderConfig,
            step: u64,
            seed: u64,
            params: usize,
        }
        let data = std::fs::read(path)?;
        let mut r = std::io::Cursor::new(data);
        let bad = |m: &str| DecoderError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated version"))?;
        if u32::from_le_bytes(b4) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut b4)
            .map_err(|_| bad("truncated header length"))?;
        let hlen = u32::from_le_bytes(b4) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf).map_err(|_| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&hbuf).map_err(|e| bad(&format!("header json: {e}")))?;
        let expected = Layout::new(&header.cfg).total;
        if header.params != expected {
            return Err(bad("parameter count does not match config"));
        }
        let mut read_series = |n: usize| -> Result<Vec<f64>, DecoderError> {
            let mut out = Vec::with_capacity(n);
            let mut b8 = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b8)
                    .map_err(|_| bad("truncated tensor data"))?;
                out.push(f64::from_le_bytes(b8));
            }
            Ok(out)
        };
        let params = read_series(header.params)?;
        let m = read_series(header.params)?;
        let v = read_series(header.params)?;
        Ok(TrainState {
            cfg: header.cfg,
            params,
            m,
            v,
            step: header.step,
            seed: header.seed,
        })
    }
}
