//! Synthetic asset pool: a deterministic embedding for every (asset,
//! yaw-bin) pair, structured so that category identity dominates, asset
//! identity separates within a category, and yaw perturbs least.

use crate::index::{AssetEntry, AssetIndex, Category, CATEGORIES};
use crate::rot::YawBin;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::derive_seed;

/// Pool shape. The defaults are the desk scale: 10 assets per category (60
/// total) and 8 yaw bins; both may be raised toward the full 1,000 x 72.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolConfig {
    pub assets_per_category: u32,
    /// Number of equal yaw bins covering the full turn. At most 72, where
    /// the bins coincide with the canonical 5-degree scheme.
    pub yaw_bins: u8,
    pub dim: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            assets_per_category: 10,
            yaw_bins: 8,
            dim: 32,
            seed: 1,
        }
    }
}

/// The asset pool: an embedding index plus the id layout.
///
/// Asset ids tile per category in [`CATEGORIES`] order: ids
/// `[c * assets_per_category, (c+1) * assets_per_category)` belong to
/// category `c`. The discrete "name" of a view is
/// `asset_id * yaw_bins + bin`.
#[derive(Debug, Clone)]
pub struct AssetPool {
    pub index: AssetIndex,
    pub assets_per_category: u32,
    pub yaw_bins: u8,
}

impl AssetPool {
    pub fn synthesize(cfg: &PoolConfig) -> AssetPool {
        assert!(cfg.yaw_bins >= 1 && u32::from(cfg.yaw_bins) <= crate::rot::YAW_BINS);
        assert!(cfg.assets_per_category >= 1);
        let mut index = AssetIndex::new(cfg.dim);
        for (ci, &category) in CATEGORIES.iter().enumerate() {
            let proto = gaussian_unit(cfg.dim, derive_seed(cfg.seed, 1, ci as u64));
            for a in 0..cfg.assets_per_category {
                let asset_id = ci as u32 * cfg.assets_per_category + a;
                let offset = gaussian_unit(cfg.dim, derive_seed(cfg.seed, 2, u64::from(asset_id)));
                for bin in 0..cfg.yaw_bins {
                    let wobble = gaussian_unit(
                        cfg.dim,
                        derive_seed(cfg.seed, 3, u64::from(asset_id) * 256 + u64::from(bin)),
                    );
                    let mut v: Vec<f64> = (0..cfg.dim)
                        .map(|i| proto[i] + 0.45 * offset[i] + 0.20 * wobble[i])
                        .collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    for x in &mut v {
                        *x /= n;
                    }
                    index
                        .insert(AssetEntry {
                            asset_id,
                            category,
                            yaw_bin: YawBin::new(bin).unwrap(),
                            embedding: v.iter().map(|&x| x as f32).collect(),
                        })
                        .expect("synthesized embedding is valid");
                }
            }
        }
        AssetPool {
            index,
            assets_per_category: cfg.assets_per_category,
            yaw_bins: cfg.yaw_bins,
        }
    }

    /// Rebuilds the pool view over an index loaded from disk.
    pub fn from_index(index: AssetIndex) -> AssetPool {
        let assets: std::collections::BTreeSet<u32> =
            index.entries().iter().map(|e| e.asset_id).collect();
        let max_bin = index
            .entries()
            .iter()
            .map(|e| e.yaw_bin.index())
            .max()
            .unwrap_or(0);
        let per_cat = (assets.len() / CATEGORIES.len()).max(1) as u32;
        AssetPool {
            index,
            assets_per_category: per_cat,
            yaw_bins: max_bin + 1,
        }
    }

    pub fn dim(&self) -> usize {
        self.index.dim()
    }

    pub fn total_assets(&self) -> u32 {
        self.assets_per_category * CATEGORIES.len() as u32
    }

    pub fn category_of(&self, asset_id: u32) -> Option<Category> {
        let ci = asset_id / self.assets_per_category;
        Category::from_u8(ci as u8)
    }

    /// Uniform asset draw within a category.
    pub fn sample_asset(&self, category: Category, rng: &mut ChaCha8Rng) -> u32 {
        let base = u32::from(category.as_u8()) * self.assets_per_category;
        base + rng.gen_range(0..self.assets_per_category)
    }

    /// Quantizes a camera-relative yaw (degrees) into this pool's bins.
    pub fn bin_of_yaw(&self, yaw_deg: f64) -> YawBin {
        let width = 360.0 / f64::from(self.yaw_bins);
        let idx = (yaw_deg.rem_euclid(360.0) / width).floor() as u32 % u32::from(self.yaw_bins);
        YawBin::new(idx as u8).unwrap()
    }

    /// Embedding of an (asset, bin) view.
    pub fn embedding(&self, asset_id: u32, bin: YawBin) -> Option<&[f32]> {
        self.index
            .entries()
            .iter()
            .find(|e| e.asset_id == asset_id && e.yaw_bin == bin)
            .map(|e| e.embedding.as_slice())
    }

    /// Discrete integer name of an (asset, bin) view.
    pub fn discrete_name(&self, asset_id: u32, bin: YawBin) -> u32 {
        asset_id * u32::from(self.yaw_bins) + u32::from(bin.index())
    }

    /// Inverse of [`AssetPool::discrete_name`].
    pub fn parse_discrete_name(&self, name: u32) -> Option<(u32, YawBin)> {
        let asset_id = name / u32::from(self.yaw_bins);
        let bin = (name % u32::from(self.yaw_bins)) as u8;
        if asset_id < self.total_assets() {
            Some((asset_id, YawBin::new(bin)?))
        } else {
            None
        }
    }
}

fn gaussian_unit(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim)
        .map(|_| {
            // Box-Muller.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}
