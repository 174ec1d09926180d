//! Fixed synthetic forward model: the stand-in for a frozen image encoder.
//!
//! Each instance contributes `mlp(embedding ++ posenc(loc, height))` to an
//! order-invariant pooled sum; the pooled vector is concatenated with a
//! normalized encoding of the scene attributes and the ground embedding.
//! Weights are random but fully determined by `model_seed`, so feature
//! vectors are comparable across runs and experiments.

use super::{AssetPool, Scene};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;

pub const FEATURES_MAGIC: [u8; 4] = *b"WCFE";
pub const FEATURES_VERSION: u32 = 1;

const POSENC_FREQS: [f64; 4] = [0.05, 0.15, 0.45, 1.35];
const HIDDEN: usize = 64;

/// Normalization scales for the ten numeric attributes, sampling-range order.
const ATTR_SCALE: [f64; 10] = [1.0, 1.5, 1.0, 135.0, 0.02, 3.0, 360.0, 1.0, 1.0, 1.0];

/// The frozen two-layer map applied per instance before pooling.
#[derive(Debug, Clone)]
pub struct FeatureModel {
    dim: usize,
    in_dim: usize,
    w1: Vec<f64>, // [HIDDEN, in_dim]
    b1: Vec<f64>,
    w2: Vec<f64>, // [dim, HIDDEN]
    pub model_seed: u64,
}

impl FeatureModel {
    pub fn new(model_seed: u64, dim: usize) -> Self {
        let in_dim = dim + 4 * POSENC_FREQS.len() * 2;
        let mut rng = ChaCha8Rng::seed_from_u64(model_seed);
        let mut gauss = |n: usize, fan_in: usize| -> Vec<f64> {
            let std = 1.0 / (fan_in as f64).sqrt();
            (0..n)
                .map(|_| {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen();
                    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect()
        };
        let w1 = gauss(HIDDEN * in_dim, in_dim);
        let b1 = gauss(HIDDEN, 1);
        let w2 = gauss(dim * HIDDEN, HIDDEN);
        FeatureModel {
            dim,
            in_dim,
            w1,
            b1,
            w2,
            model_seed,
        }
    }

    /// Output length: pooled part + 10 attributes + ground embedding.
    pub fn feature_dim(&self) -> usize {
        2 * self.dim + 10
    }

    /// Features for one camera view. The per-instance embedding is the pool
    /// entry at the instance's camera-relative yaw bin, matching what the
    /// serialized program resolves.
    pub fn features(&self, scene: &Scene, pool: &AssetPool) -> Vec<f32> {
        assert_eq!(pool.dim(), self.dim);
        let heading = scene.camera.heading();
        let mut pooled = vec![0.0f64; self.dim];
        for inst in &scene.instances {
            let local = heading.transpose().compose(&inst.rotation);
            let bin = pool.bin_of_yaw(local.yaw_degrees());
            let emb = pool
                .embedding(inst.asset_id, bin)
                .expect("instance asset exists in pool");
            let loc = scene.camera.to_camera(inst.position);

            let mut v = Vec::with_capacity(self.in_dim);
            v.extend(emb.iter().map(|&x| f64::from(x)));
            for value in [loc[0], loc[1], loc[2], inst.height] {
                for f in POSENC_FREQS {
                    v.push((value * f).sin());
                    v.push((value * f).cos());
                }
            }
            debug_assert_eq!(v.len(), self.in_dim);

            let mut hidden = [0.0f64; HIDDEN];
            for (h, hv) in hidden.iter_mut().enumerate() {
                let row = &self.w1[h * self.in_dim..(h + 1) * self.in_dim];
                let s: f64 = row.iter().zip(&v).map(|(a, b)| a * b).sum();
                *hv = (s + self.b1[h]).tanh();
            }
            for (o, p) in pooled.iter_mut().enumerate() {
                let row = &self.w2[o * HIDDEN..(o + 1) * HIDDEN];
                *p += row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
            }
        }

        let mut out: Vec<f32> = pooled.iter().map(|&x| x as f32).collect();
        for (v, s) in scene.attributes.numeric_values().iter().zip(ATTR_SCALE) {
            out.push((v / s) as f32);
        }
        match &scene.attributes.ground {
            crate::scene::EmbeddingSlot::Resolved(g) => {
                assert_eq!(g.len(), self.dim);
                out.extend_from_slice(g);
            }
            _ => out.extend(std::iter::repeat(0.0f32).take(self.dim)),
        }
        out
    }
}

/// Convenience one-shot wrapper; builds the model from the seed each call.
pub fn forward_features(scene: &Scene, pool: &AssetPool, model_seed: u64) -> Vec<f32> {
    FeatureModel::new(model_seed, pool.dim()).features(scene, pool)
}

pub fn write_features_file(path: &std::path::Path, v: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(12 + v.len() * 4);
    buf.extend_from_slice(&FEATURES_MAGIC);
    buf.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, buf)
}

pub fn read_features_file(path: &std::path::Path) -> std::io::Result<Vec<f32>> {
    let data = std::fs::read(path)?;
    let mut r = std::io::Cursor::new(data);
    let err = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != FEATURES_MAGIC {
        return Err(err("bad feature file magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != FEATURES_VERSION {
        return Err(err("unsupported feature file version"));
    }
    r.read_exact(&mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut b4)?;
        out.push(f32::from_le_bytes(b4));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(err("trailing bytes in feature file"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        ground_embedding, sample_scene, GenConfig, PoolConfig,
    };
    use rand::SeedableRng;

    fn setup() -> (GenConfig, AssetPool, FeatureModel) {
        let cfg = GenConfig {
            counts: [1, 1, 0, 1, 0, 0],
            dim: 8,
            pool: PoolConfig {
                assets_per_category: 4,
                yaw_bins: 8,
                dim: 8,
                seed: 9,
            },
            ..GenConfig::default()
        };
        let pool = AssetPool::synthesize(&cfg.pool);
        let model = FeatureModel::new(cfg.feature_seed, cfg.dim);
        (cfg, pool, model)
    }

    fn test_scene(cfg: &GenConfig, pool: &AssetPool, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = sample_scene(cfg, pool, &mut rng);
        s.attributes.ground =
            crate::scene::EmbeddingSlot::Resolved(ground_embedding(1, 0, cfg.dim));
        s
    }

    #[test]
    fn features_are_deterministic() {
        let (cfg, pool, model) = setup();
        let s = test_scene(&cfg, &pool, 3);
        assert_eq!(model.features(&s, &pool), model.features(&s, &pool));
        let again = FeatureModel::new(cfg.feature_seed, cfg.dim);
        assert_eq!(model.features(&s, &pool), again.features(&s, &pool));
    }

    #[test]
    fn pooling_is_order_invariant() {
        let (cfg, pool, model) = setup();
        let mut s = test_scene(&cfg, &pool, 4);
        let a = model.features(&s, &pool);
        s.instances.reverse();
        let b = model.features(&s, &pool);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn asset_identity_changes_features() {
        let (cfg, pool, model) = setup();
        for k in 0..50u64 {
            let mut s = test_scene(&cfg, &pool, 100 + k);
            let a = model.features(&s, &pool);
            // Swap one instance to a different asset of the same category.
            let old = s.instances[0].asset_id;
            let base = old - old % pool.assets_per_category;
            s.instances[0].asset_id = base + (old - base + 1) % pool.assets_per_category;
            let b = model.features(&s, &pool);
            let dist: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (f64::from(x - y)).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist > 1e-6, "asset swap invisible in features (k={k})");
        }
    }

    #[test]
    fn feature_dim_matches_layout() {
        let (cfg, pool, model) = setup();
        let s = test_scene(&cfg, &pool, 5);
        let f = model.features(&s, &pool);
        assert_eq!(f.len(), model.feature_dim());
        assert_eq!(f.len(), 2 * cfg.dim + 10);
    }

    #[test]
    fn feature_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wcfe");
        let v = vec![0.25f32, -1.5, 3.0];
        write_features_file(&path, &v).unwrap();
        assert_eq!(read_features_file(&path).unwrap(), v);
    }
}
