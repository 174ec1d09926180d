//! Per-asset, per-yaw-bin embedding store with exact cosine-similarity
//! retrieval, plus the embedding regression loss.
//!
//! Retrieval is a brute-force scan over a contiguous matrix of unit vectors;
//! at desk scale this is faster and simpler than an approximate index, and
//! the ranking is exactly reproducible. The on-disk format is documented in
//! `docs/formats.md`.

use crate::rot::YawBin;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const STORE_MAGIC: [u8; 4] = *b"WCEM";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("embedding has dimension {got}, index expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("query on an empty index")]
    EmptyIndex,
    #[error("query vector has zero norm")]
    ZeroQuery,
    #[error("embedding has zero norm or non-finite entries")]
    BadEmbedding,
    #[error("bad magic bytes; not an embedding store file")]
    BadMagic,
    #[error("unsupported store version {0}")]
    BadVersion(u32),
    #[error("store file truncated at {0}")]
    Truncated(&'static str),
    #[error("invalid category byte {0}")]
    BadCategory(u8),
    #[error("invalid yaw bin {0}")]
    BadYawBin(u8),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The six asset categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Boulder,
    Bush,
    Tree,
    Carnivore,
    Herbivore,
    Bird,
}

pub const CATEGORIES: [Category; 6] = [
    Category::Boulder,
    Category::Bush,
    Category::Tree,
    Category::Carnivore,
    Category::Herbivore,
    Category::Bird,
];

impl Category {
    pub fn as_u8(self) -> u8 {
        CATEGORIES.iter().position(|c| *c == self).unwrap() as u8
    }

    pub fn from_u8(b: u8) -> Option<Category> {
        CATEGORIES.get(b as usize).copied()
    }

    /// Orientable assets have a canonical front; the rest get their
    /// camera-local yaw zeroed in ground truth.
    pub fn is_orientable(self) -> bool {
        matches!(self, Category::Carnivore | Category::Herbivore | Category::Bird)
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Boulder => "boulder",
            Category::Bush => "bush",
            Category::Tree => "tree",
            Category::Carnivore => "carnivore",
            Category::Herbivore => "herbivore",
            Category::Bird => "bird",
        }
    }
}

/// One (asset, yaw-bin) view with its appearance embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetEntry {
    pub asset_id: u32,
    pub category: Category,
    pub yaw_bin: YawBin,
    pub embedding: Vec<f32>,
}

/// Exact cosine-similarity index over asset entries.
///
/// Keys are `(asset_id, yaw_bin)`; inserting a duplicate key replaces the
/// entry. Reads may be shared freely; writes require exclusive access.
#[derive(Debug, Clone)]
pub struct AssetIndex {
    dim: usize,
    entries: Vec<AssetEntry>,
    /// Unit vectors, row per entry, kept in step with `entries`.
    units: Vec<f64>,
}

impl AssetIndex {
    pub fn new(dim: usize) -> Self {
        AssetIndex {
            dim,
            entries: Vec::new(),
            units: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AssetEntry] {
        &self.entries
    }

    pub fn insert(&mut self, e: AssetEntry) -> Result<(), IndexError> {
        if e.embedding.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: e.embedding.len(),
            });
        }
        let norm = norm_f64(&e.embedding);
        if norm == 0.0 || !norm.is_finite() {
            return Err(IndexError::BadEmbedding);
        }
        let unit: Vec<f64> = e.embedding.iter().map(|&x| f64::from(x) / norm).collect();
        if let Some(pos) = self
            .entries
            .iter()
            .position(|x| x.asset_id == e.asset_id && x.yaw_bin == e.yaw_bin)
        {
            self.entries[pos] = e;
            self.units[pos * self.dim..(pos + 1) * self.dim].copy_from_slice(&unit);
        } else {
            self.entries.push(e);
            self.units.extend_from_slice(&unit);
        }
        Ok(())
    }

    /// Top-k entries by cosine similarity, descending. Ties break by
    /// `asset_id`, then `yaw_bin`, making the ranking fully deterministic.
    pub fn query(&self, q: &[f32], k: usize) -> Result<Vec<(&AssetEntry, f64)>, IndexError> {
        if self.entries.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if q.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                got: q.len(),
            });
        }
        let qn = norm_f64(q);
        if qn == 0.0 || !qn.is_finite() {
            return Err(IndexError::ZeroQuery);
        }
        let qu: Vec<f64> = q.iter().map(|&x| f64::from(x) / qn).collect();

        let mut scored: Vec<(usize, f64)> = (0..self.entries.len())
            .map(|i| {
                let row = &self.units[i * self.dim..(i + 1) * self.dim];
                let sim: f64 = row.iter().zip(&qu).map(|(a, b)| a * b).sum();
                (i, sim)
            })
            .collect();
        scored.sort_by(|(i, a), (j, b)| {
            b.partial_cmp(a)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| {
                    let ea = &self.entries[*i];
                    let eb = &self.entries[*j];
                    ea.asset_id
                        .cmp(&eb.asset_id)
                        .then(ea.yaw_bin.cmp(&eb.yaw_bin))
                })
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, sim)| (&self.entries[i], sim))
            .collect())
    }

    /// Writes the store: header (magic, version, dim, count) then fixed-width
    /// records (asset_id u32, category u8, yaw_bin u8, f32 embedding), all
    /// little-endian.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<(), IndexError> {
        w.write_all(&STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.asset_id.to_le_bytes())?;
            w.write_all(&[e.category.as_u8(), e.yaw_bin.index()])?;
            for v in &e.embedding {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self, IndexError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| IndexError::Truncated("header"))?;
        if magic != STORE_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != STORE_VERSION {
            return Err(IndexError::BadVersion(version));
        }
        let dim = read_u32(r)? as usize;
        let count = read_u32(r)? as usize;
        let mut index = AssetIndex::new(dim);
        for _ in 0..count {
            let asset_id = read_u32(r)?;
            let mut meta = [0u8; 2];
            r.read_exact(&mut meta)
                .map_err(|_| IndexError::Truncated("record meta"))?;
            let category = Category::from_u8(meta[0]).ok_or(IndexError::BadCategory(meta[0]))?;
            let yaw_bin = YawBin::new(meta[1]).ok_or(IndexError::BadYawBin(meta[1]))?;
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|_| IndexError::Truncated("embedding"))?;
                embedding.push(f32::from_le_bytes(b));
            }
            index.insert(AssetEntry {
                asset_id,
                category,
                yaw_bin,
                embedding,
            })?;
        }
        Ok(index)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), IndexError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, IndexError> {
        let data = std::fs::read(path)?;
        AssetIndex::read(&mut std::io::Cursor::new(data))
    }
}

fn norm_f64(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Embedding regression loss: `(1 - cos(pred, target)) + lambda * (|pred| - |target|)^2`.
///
/// The cosine term alone is invariant to the prediction's norm; the second
/// term pins the norm to the target's.
pub fn cosine_embedding_loss(pred: &[f64], target: &[f64], lambda: f64) -> f64 {
    assert_eq!(pred.len(), target.len());
    let np = norm(pred);
    let nt = norm(target);
    assert!(nt > 0.0, "target must be nonzero");
    let cos = dot(pred, target) / (np * nt);
    (1.0 - cos) + lambda * (np - nt) * (np - nt)
}

/// Analytic gradient of [`cosine_embedding_loss`] with respect to `pred`.
/// Defined for nonzero `pred`.
pub fn cosine_embedding_loss_grad(pred: &[f64], target: &[f64], lambda: f64) -> Vec<f64> {
    assert_eq!(pred.len(), target.len());
    let np = norm(pred);
    let nt = norm(target);
    assert!(np > 0.0 && nt > 0.0);
    let cos = dot(pred, target) / (np * nt);
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let dcos = t / (np * nt) - cos * p / (np * np);
            let dnorm = 2.0 * lambda * (np - nt) * p / np;
            -dcos + dnorm
        })
        .collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IndexError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| IndexError::Truncated("u32 field"))?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rot::yaw_bin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(asset_id: u32, bin: u8, embedding: Vec<f32>) -> AssetEntry {
        AssetEntry {
            asset_id,
            category: Category::from_u8((asset_id % 6) as u8).unwrap(),
            yaw_bin: YawBin::new(bin).unwrap(),
            embedding,
        }
    }

    fn random_index(n: usize, d: usize, rng: &mut ChaCha8Rng) -> AssetIndex {
        let mut idx = AssetIndex::new(d);
        for i in 0..n {
            let emb: Vec<f32> = (0..d).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
            idx.insert(entry(i as u32 / 8, (i % 8) as u8, emb)).unwrap();
        }
        idx
    }

    #[test]
    fn insert_then_query_top1_is_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut idx = random_index(100, 16, &mut rng);
        let e = entry(99, 3, (0..16).map(|i| (i as f32 + 1.0) / 16.0).collect());
        idx.insert(e.clone()).unwrap();
        let hits = idx.query(&e.embedding, 1).unwrap();
        assert_eq!(hits[0].0.asset_id, 99);
        assert_eq!(hits[0].0.yaw_bin.index(), 3);
        assert!((hits[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_key_replaces() {
        let mut idx = AssetIndex::new(4);
        idx.insert(entry(1, 2, vec![1.0, 0.0, 0.0, 0.0])).unwrap();
        idx.insert(entry(1, 2, vec![0.0, 1.0, 0.0, 0.0])).unwrap();
        assert_eq!(idx.len(), 1);
        let hits = idx.query(&[0.0, 1.0, 0.0, 0.0], 1).unwrap();
        assert!((hits[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn negated_vector_has_similarity_minus_one() {
        let mut idx = AssetIndex::new(3);
        idx.insert(entry(0, 0, vec![0.3, -0.4, 0.5])).unwrap();
        let q = [-0.3f32, 0.4, -0.5];
        let hits = idx.query(&q, 1).unwrap();
        assert!((hits[0].1 + 1.0).abs() < 1e-9);
    }

    #[test]
    fn errors_are_reported() {
        let mut idx = AssetIndex::new(4);
        assert!(matches!(
            idx.query(&[1.0; 4], 1),
            Err(IndexError::EmptyIndex)
        ));
        assert!(matches!(
            idx.insert(entry(0, 0, vec![1.0; 3])),
            Err(IndexError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            idx.insert(entry(0, 0, vec![0.0; 4])),
            Err(IndexError::BadEmbedding)
        ));
        idx.insert(entry(0, 0, vec![1.0; 4])).unwrap();
        assert!(matches!(
            idx.query(&[0.0; 4], 1),
            Err(IndexError::ZeroQuery)
        ));
    }

    #[test]
    fn query_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 12;
        let idx = random_index(500, d, &mut rng);
        for _ in 0..20 {
            let q: Vec<f32> = (0..d).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
            let got = idx.query(&q, idx.len()).unwrap();

            // Independent scan with the same arithmetic.
            let qn = (q.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>()).sqrt();
            let mut oracle: Vec<(u32, u8, f64)> = idx
                .entries()
                .iter()
                .map(|e| {
                    let en = (e.embedding.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>())
                        .sqrt();
                    let dot: f64 = e
                        .embedding
                        .iter()
                        .zip(&q)
                        .map(|(&a, &b)| (f64::from(a) / en) * (f64::from(b) / qn))
                        .sum();
                    (e.asset_id, e.yaw_bin.index(), dot)
                })
                .collect();
            oracle.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap()
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            for (hit, exp) in got.iter().zip(&oracle) {
                assert_eq!((hit.0.asset_id, hit.0.yaw_bin.index()), (exp.0, exp.1));
            }
        }
    }

    #[test]
    fn similarity_invariant_to_query_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let idx = random_index(50, 8, &mut rng);
        let q: Vec<f32> = (0..8).map(|_| rng.gen::<f32>() - 0.5).collect();
        // Power-of-two scale keeps the f32 direction bit-identical.
        let scaled: Vec<f32> = q.iter().map(|x| x * 8.0).collect();
        let a = idx.query(&q, 5).unwrap();
        let b = idx.query(&scaled, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0.asset_id, y.0.asset_id);
            assert!((x.1 - y.1).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_zero_at_target_and_scale_behavior() {
        let t = [0.5, -1.25, 2.0, 0.25];
        assert!(cosine_embedding_loss(&t, &t, 0.1).abs() < 1e-12);
        let doubled: Vec<f64> = t.iter().map(|x| 2.0 * x).collect();
        assert!(cosine_embedding_loss(&doubled, &t, 0.0).abs() < 1e-12);
        assert!(cosine_embedding_loss(&doubled, &t, 0.1) > 0.0);
    }

    #[test]
    fn loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let d = 6;
            let p: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let t: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let lambda = 0.1;
            // Plain scalar recomputation.
            let np = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nt = t.iter().map(|x| x * x).sum::<f64>().sqrt();
            if np < 1e-3 || nt < 1e-3 {
                continue;
            }
            let cos = p.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>() / (np * nt);
            let oracle = (1.0 - cos) + lambda * (np - nt) * (np - nt);
            assert!((cosine_embedding_loss(&p, &t, lambda) - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..20 {
            let d = 5;
            let p: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let t: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            if norm(&p) < 1e-2 || norm(&t) < 1e-2 {
                continue;
            }
            let g = cosine_embedding_loss_grad(&p, &t, 0.1);
            let h = 1e-6;
            for i in 0..d {
                let mut plus = p.clone();
                plus[i] += h;
                let mut minus = p.clone();
                minus[i] -= h;
                let fd = (cosine_embedding_loss(&plus, &t, 0.1)
                    - cosine_embedding_loss(&minus, &t, 0.1))
                    / (2.0 * h);
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                assert!((fd - g[i]).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn store_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let idx = random_index(60, 8, &mut rng);
        let mut buf = Vec::new();
        idx.write(&mut buf).unwrap();
        let back = AssetIndex::read(&mut std::io::Cursor::new(buf.clone())).unwrap();
        assert_eq!(back.len(), idx.len());
        assert_eq!(back.dim(), idx.dim());
        for (a, b) in idx.entries().iter().zip(back.entries()) {
            assert_eq!(a, b);
        }
        let mut buf2 = Vec::new();
        back.write(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn desk_scale_pool_count() {
        // 60 assets x 8 bins.
        let mut idx = AssetIndex::new(4);
        for asset in 0..60u32 {
            for bin in 0..8u8 {
                let yaw = yaw_bin(f64::from(bin) * 5.0);
                idx.insert(AssetEntry {
                    asset_id: asset,
                    category: Category::from_u8((asset % 6) as u8).unwrap(),
                    yaw_bin: yaw,
                    embedding: vec![1.0, asset as f32, bin as f32, 0.5],
                })
                .unwrap();
            }
        }
        assert_eq!(idx.len(), 480);
    }
}
