//! Dataset loading and the teacher-forced training loop.
//!
//! Loading applies the variant transforms up front: the discrete-name
//! variant swaps embedding slots for integer names derived from the manifest
//! (asset id and yaw bin for objects, scene id for the ground), and the
//! no-pixels profile strips the `pixels` field. Both variants therefore
//! train on the same features and scenes, differing only in targets.
//!
//! Attribute fuzzing, when enabled, re-draws the multiplicative noise every
//! step and re-encodes the target stream, so the model never sees the same
//! attribute digits twice for one scene.

use super::model::loss_and_grad;
use super::{DecoderError, TrainState, Variant};
use crate::codec::{decode, encode, read_stream_file, HybridTokenStream, Vocabulary};
use crate::datagen::{derive_seed, fuzz_attributes, load_manifest, read_features_file};
use crate::scene::{EmbeddingSlot, SceneProgram};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: Vec<f32>,
    /// Variant-transformed program with clean attributes.
    pub program: SceneProgram,
    /// Encoding of `program` (the no-fuzz target).
    pub stream: HybridTokenStream,
    pub scene: u32,
    pub view: u32,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub samples: Vec<TrainSample>,
    pub dim: usize,
    pub feature_dim: usize,
    pub max_stream_len: usize,
}

impl LoadedDataset {
    /// Loads samples `range` (by manifest order) from a dataset directory,
    /// applying the variant and pixels transforms.
    pub fn load(
        dir: &Path,
        variant: Variant,
        pixels: bool,
        range: Option<std::ops::Range<usize>>,
    ) -> Result<LoadedDataset, DecoderError> {
        let manifest = load_manifest(dir)
            .map_err(|e| DecoderError::Checkpoint(format!("dataset: {e}")))?;
        let vocab = Vocabulary::standard();
        let yaw_bins = u32::from(manifest.meta.config.pool.yaw_bins);
        let range = range.unwrap_or(0..manifest.records.len());

        let mut samples = Vec::with_capacity(range.len());
        let mut max_stream_len = 0;
        for r in &manifest.records[range] {
            let features = read_features_file(&dir.join(&r.features))?;
            let (stored, _) = read_stream_file(&dir.join(&r.stream))?;
            let mut program = decode(&stored, &vocab)?;
            if !pixels {
                for obj in &mut program.objects {
                    obj.pixels = None;
                }
            }
            if variant == Variant::DiscreteName {
                program.attributes.ground = EmbeddingSlot::Named(r.scene);
                for (obj, meta) in program.objects.iter_mut().zip(&r.objects) {
                    obj.appearance =
                        EmbeddingSlot::Named(meta.asset_id * yaw_bins + u32::from(meta.yaw_bin));
                }
            }
            let stream = encode(&program, &vocab)?;
            max_stream_len = max_stream_len.max(stream.tokens.len());
            samples.push(TrainSample {
                features,
                program,
                stream,
                scene: r.scene,
                view: r.view,
            });
        }
        Ok(LoadedDataset {
            samples,
            dim: manifest.meta.dim,
            feature_dim: manifest.meta.feature_dim,
            max_stream_len,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub steps: u64,
    pub seed: u64,
    /// Per-step multiplicative attribute fuzz, e.g. `Some(0.005)`.
    pub fuzz: Option<f64>,
    /// Print a progress line every this many steps; 0 silences output.
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 1000,
            seed: 0,
            fuzz: None,
            log_every: 0,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub ce: f64,
    pub rot: f64,
    pub clip: f64,
}

/// Teacher-forced training: each step draws one sample (uniformly, from a
/// step-derived rng), optionally re-fuzzes its attribute targets, and takes
/// one Adam step. Deterministic given config, dataset, and seed.
pub fn train(
    cfg: super::DecoderConfig,
    dataset: &LoadedDataset,
    opts: TrainOptions,
) -> Result<(TrainState, Vec<StepMetrics>), DecoderError> {
    assert!(!dataset.samples.is_empty(), "dataset must not be empty");
    let needed = dataset.max_stream_len + 16;
    if cfg.context < needed {
        return Err(DecoderError::ContextOverflow {
            len: needed,
            context: cfg.context,
        });
    }
    let vocab = Vocabulary::standard();
    let mut state = TrainState::init(cfg, opts.seed);
    let mut log = Vec::with_capacity(opts.steps as usize);

    let fuzzed_stream = |sample: &TrainSample,
                         fraction: f64,
                         rng: &mut ChaCha8Rng|
     -> Result<HybridTokenStream, DecoderError> {
        let mut program = sample.program.clone();
        program.attributes = fuzz_attributes(&program.attributes, rng, fraction);
        Ok(encode(&program, &vocab)?)
    };

    for _ in 0..opts.steps {
        let mut step_rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, 4, state.step));
        let idx = step_rng.gen_range(0..dataset.samples.len());
        let sample = &dataset.samples[idx];
        let (breakdown, grads) = match opts.fuzz {
            Some(fraction) if fraction > 0.0 => {
                let stream = fuzzed_stream(sample, fraction, &mut step_rng)?;
                loss_and_grad(&state, &sample.features, &stream)?
            }
            _ => loss_and_grad(&state, &sample.features, &sample.stream)?,
        };
        state.adam_step(&grads);
        let row = StepMetrics {
            step: state.step,
            total: breakdown.total,
            ce: breakdown.ce,
            rot: breakdown.rot,
            clip: breakdown.clip,
        };
        if opts.log_every > 0 && state.step % opts.log_every == 0 {
            eprintln!(
                "step {:>6}  total {:.4}  ce {:.4}  rot {:.4}  clip {:.4}",
                row.step, row.total, row.ce, row.rot, row.clip
            );
        }
        log.push(row);
    }
    Ok((state, log))
}

/// Writes the training log as CSV (`step,total,ce,rot,clip`).
pub fn write_metrics_csv(path: &Path, log: &[StepMetrics]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(32 * (log.len() + 1));
    writeln!(buf, "step,total,ce,rot,clip")?;
    for r in log {
        writeln!(buf, "{},{},{},{},{}", r.step, r.total, r.ce, r.rot, r.clip)?;
    }
    std::fs::write(path, buf)
}
