//! Momentum memory bank of per-class feature prototypes.
//!
//! The bank is plain data: it never takes part in backpropagation and has
//! no optimizer state. Class means are weighted toward features that are
//! dissimilar to the current prototype.

use serde::{Deserialize, Serialize};

use crate::data::UNLABELED;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    num_classes: usize,
    dim: usize,
    alpha: f64,
    /// Row-major `K × D`.
    rows: Vec<f64>,
    initialized: Vec<bool>,
}

/// Cosine similarity, defined as 0 when either vector has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

impl MemoryBank {
    /// A zero-initialized `num_classes × dim` bank.
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::invalid("memory bank needs positive num_classes and dim"));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::invalid(format!("momentum {alpha} outside [0, 1)")));
        }
        Ok(MemoryBank {
            num_classes,
            dim,
            alpha,
            rows: vec![0.0; num_classes * dim],
            initialized: vec![false; num_classes],
        })
    }

    pub fn from_rows(num_classes: usize, dim: usize, alpha: f64, rows: Vec<f64>, initialized: Vec<bool>) -> Result<Self> {
        let mut bank = Self::new(num_classes, dim, alpha)?;
        if rows.len() != num_classes * dim || initialized.len() != num_classes {
            return Err(Error::invalid("memory bank rows do not match its shape"));
        }
        bank.rows = rows;
        bank.initialized = initialized;
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.rows[k * self.dim..(k + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }

    /// Weights `s_i = (1 − sim(M_k, z_i)) / Σ_j (1 − sim(M_k, z_j))`;
    /// uniform when every similarity is 1. Empty input gives no weights.
    pub fn class_weights(&self, k: usize, features: &[&[f64]]) -> Vec<f64> {
        if features.is_empty() {
            return Vec::new();
        }
        let proto = self.row(k);
        let raw: Vec<f64> = features
            .iter()
            .map(|z| (1.0 - cosine_similarity(proto, z)).max(0.0))
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter().map(|r| r / total).collect()
        } else {
            vec![1.0 / features.len() as f64; features.len()]
        }
    }

    /// Weighted mean `m_k` of the given features, `None` when empty.
    pub fn weighted_mean(&self, k: usize, features: &[&[f64]]) -> Option<Vec<f64>> {
        let weights = self.class_weights(k, features);
        if weights.is_empty() {
            return None;
        }
        let mut m = vec![0.0; self.dim];
        for (w, z) in weights.iter().zip(features) {
            for (acc, v) in m.iter_mut().zip(z.iter()) {
                *acc += w * v;
            }
        }
        Some(m)
    }

    /// Mean feature of the pixels labeled `k` across a batch. `z` is
    /// `n × D × H × W`; `labels` holds `n·H·W` scribble values.
    pub fn class_mean_features(&self, z: &Tensor, labels: &[u8], k: usize) -> Result<Option<Vec<f64>>> {
        if z.c != self.dim {
            return Err(Error::invalid(format!("features have {} channels, bank dim is {}", z.c, self.dim)));
        }
        if labels.len() != z.n * z.plane() {
            return Err(Error::invalid("label count does not match the feature map"));
        }
        if k >= self.num_classes {
            return Err(Error::invalid(format!("class {k} out of range")));
        }
        let pixels = gather_class_features(z, labels, k as u8);
        let refs: Vec<&[f64]> = pixels.iter().map(Vec::as_slice).collect();
        Ok(self.weighted_mean(k, &refs))
    }

    /// Means for every class, computed against the current prototypes.
    pub fn all_class_means(&self, z: &Tensor, labels: &[u8]) -> Result<Vec<Option<Vec<f64>>>> {
        (0..self.num_classes).map(|k| self.class_mean_features(z, labels, k)).collect()
    }

    /// `M_k ← α M_k + (1 − α) m_k` for every class with a mean; absent
    /// classes keep their row untouched.
    pub fn update(&mut self, means: &[Option<Vec<f64>>]) -> Result<()> {
        if means.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} class means given for a {}-class bank",
                means.len(),
                self.num_classes
            )));
        }
        if let Some(bad) = means.iter().flatten().find(|m| m.len() != self.dim) {
            return Err(Error::invalid(format!("mean of length {} for bank dim {}", bad.len(), self.dim)));
        }
        let a = self.alpha;
        for (k, m) in means.iter().enumerate() {
            let Some(m) = m else { continue };
            let row = &mut self.rows[k * self.dim..(k + 1) * self.dim];
            for (r, v) in row.iter_mut().zip(m) {
                *r = a * *r + (1.0 - a) * v;
            }
            self.initialized[k] = true;
        }
        Ok(())
    }
}

/// Feature vectors of the pixels labeled `class`, in batch/row-major order.
fn gather_class_features(z: &Tensor, labels: &[u8], class: u8) -> Vec<Vec<f64>> {
    debug_assert_ne!(class, UNLABELED);
    let hw = z.plane();
    let mut out = Vec::new();
    for (idx, &l) in labels.iter().enumerate() {
        if l != class {
            continue;
        }
        let (s, i) = (idx / hw, idx % hw);
        let sample = z.sample(s);
        out.push((0..z.c).map(|c| sample[c * hw + i]).collect());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_mean_is_that_pixel() {
        let mut bank = MemoryBank::new(2, 2, 0.9).unwrap();
        bank.update(&[Some(vec![1.0, 0.0]), None]).unwrap();
        let z = [3.0, -1.0];
        assert_eq!(bank.weighted_mean(0, &[&z]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn zero_prototype_gives_plain_mean() {
        let bank = MemoryBank::new(2, 2, 0.9).unwrap();
        let (a, b) = ([1.0, 2.0], [3.0, 6.0]);
        assert_eq!(bank.class_weights(1, &[&a, &b]), vec![0.5, 0.5]);
        assert_eq!(bank.weighted_mean(1, &[&a, &b]).unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn degenerate_similarities_fall_back_to_uniform() {
        let bank = MemoryBank::from_rows(1, 2, 0.9, vec![1.0, 1.0], vec![true]).unwrap();
        let (a, b) = ([2.0, 2.0], [5.0, 5.0]);
        assert_eq!(bank.class_weights(0, &[&a, &b]), vec![0.5, 0.5]);
    }

    #[test]
    fn update_from_zero() {
        let mut bank = MemoryBank::new(2, 3, 0.9).unwrap();
        bank.update(&[Some(vec![1.0, 2.0, 3.0]), None]).unwrap();
        let expect = [0.1, 0.2, 0.3];
        for (a, b) in bank.row(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(bank.row(1), &[0.0, 0.0, 0.0]);
        assert_eq!(bank.initialized(), &[true, false]);
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut bank = MemoryBank::new(2, 3, 0.9).unwrap();
        assert!(bank.update(&[Some(vec![1.0]), None]).is_err());
        assert!(bank.update(&[None]).is_err());
        assert!(MemoryBank::new(2, 3, 1.0).is_err());
    }

    #[test]
    fn class_means_from_tensor() {
        let bank = MemoryBank::new(2, 2, 0.9).unwrap();
        // one sample, 2 channels, 1×3 pixels
        let z = Tensor::from_vec(1, 2, 1, 3, vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
        let labels = [0, UNLABELED, 0];
        let m = bank.class_mean_features(&z, &labels, 0).unwrap().unwrap();
        assert_eq!(m, vec![2.0, 20.0]);
        assert_eq!(bank.class_mean_features(&z, &labels, 1).unwrap(), None);
    }
}
