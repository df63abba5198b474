//! Per-dimension z-score normalization fitted on training frames.

use serde::{Deserialize, Serialize};

use crate::model::Motion;
use crate::{Error, Result};

/// Standard deviations are floored here so constant dimensions stay finite.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// No-op normalization (mean 0, std 1).
    pub fn identity(dim: usize) -> NormStats {
        NormStats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fit over every frame of every clip (population statistics).
    pub fn fit(motions: &[Motion]) -> Result<NormStats> {
        let dim = match motions.first() {
            Some(m) => m.dim(),
            None => return Err(Error::InvalidData("cannot fit normalization on no clips".into())),
        };
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for m in motions {
            if m.dim() != dim {
                return Err(Error::InvalidData(format!(
                    "clip dim {} differs from first clip dim {dim}",
                    m.dim()
                )));
            }
            for t in 0..m.n_frames() {
                for (acc, &v) in mean.iter_mut().zip(m.frame(t)) {
                    *acc += v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::InvalidData("cannot fit normalization on empty clips".into()));
        }
        for v in &mut mean {
            *v /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for m in motions {
            for t in 0..m.n_frames() {
                for ((acc, &mu), &v) in var.iter_mut().zip(&mean).zip(m.frame(t)) {
                    let d = v - mu;
                    *acc += d * d;
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(NormStats { mean, std })
    }

    /// Raw values to normalized: (x - mean) / std.
    pub fn apply(&self, motion: &Motion) -> Motion {
        assert_eq!(motion.dim(), self.dim());
        let mut out = motion.clone();
        let dim = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let d = i % dim;
            *v = (*v - self.mean[d]) / self.std[d];
        }
        out
    }

    /// Normalized values back to raw: x * std + mean.
    pub fn invert(&self, motion: &Motion) -> Motion {
        assert_eq!(motion.dim(), self.dim());
        let mut out = motion.clone();
        let dim = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let d = i % dim;
            *v = *v * self.std[d] + self.mean[d];
        }
        out
    }

    /// Per-dimension scale/shift that maps normalized rows to raw rows,
    /// for building denormalization into a differentiable graph.
    pub fn denorm_scale_shift(&self) -> (&[f64], &[f64]) {
        (&self.std, &self.mean)
    }
}
