//! Per-dimension z-scoring of frame feature vectors.

use skilledit_core::{MotionClip, Real};

use crate::error::{ModelError, Result};

/// Standard deviations below this are treated as constant dimensions.
const MIN_STD: f64 = 1e-4;

/// Mean and standard deviation per feature dimension, kept in `f32` so a
/// checkpoint round trip reproduces them exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl FeatureStats {
    /// Statistics over every row produced by `rows`.
    pub fn fit_rows<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        let mut n = 0usize;
        for r in rows {
            if r.len() != dim {
                return Err(ModelError::InvalidArgument(format!("row of {} values, expected {dim}", r.len())));
            }
            for (i, &x) in r.iter().enumerate() {
                sum[i] += x;
                sq[i] += x * x;
            }
            n += 1;
        }
        if n == 0 {
            return Err(ModelError::InvalidArgument("no rows to fit feature statistics".into()));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let v = (s / nf - m * m).max(0.0).sqrt();
                if v < MIN_STD {
                    1.0
                } else {
                    v as f32
                }
            })
            .collect();
        Ok(Self { mean: mean.iter().map(|&m| m as f32).collect(), std })
    }

    /// Full frame features (root + joints) over a corpus.
    pub fn fit_clips<S: Real>(clips: &[MotionClip<S>]) -> Result<Self> {
        let first = clips.first().ok_or_else(|| ModelError::InvalidArgument("empty corpus".into()))?;
        let dim = first.feature_dim();
        let mut rows = Vec::new();
        for c in clips {
            if c.feature_dim() != dim {
                return Err(ModelError::InvalidArgument(format!(
                    "clip {} has {} features per frame, expected {dim}",
                    c.id(),
                    c.feature_dim()
                )));
            }
            for f in &c.frames {
                rows.push(f.assemble_feature_vector()?.iter().map(|x| x.to_f64_lossless()).collect::<Vec<f64>>());
            }
        }
        Self::fit_rows(dim, rows.iter().map(|r| r.as_slice()))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, row: &[f64], out: &mut Vec<f32>) {
        for ((&x, &m), &s) in row.iter().zip(&self.mean).zip(&self.std) {
            out.push(((x - m as f64) / s as f64) as f32);
        }
    }

    pub fn denormalize(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&x, &m), &s)| x as f64 * s as f64 + m as f64)
            .collect()
    }

    /// Row-major `T x F` normalized features of a clip.
    pub fn normalize_clip<S: Real>(&self, clip: &MotionClip<S>) -> Result<Vec<f32>> {
        if clip.feature_dim() != self.dim() {
            return Err(ModelError::InvalidArgument(format!(
                "clip {} has {} features per frame, model expects {}",
                clip.id(),
                clip.feature_dim(),
                self.dim()
            )));
        }
        let mut out = Vec::with_capacity(clip.len() * self.dim());
        for f in &clip.frames {
            let row: Vec<f64> = f.assemble_feature_vector()?.iter().map(|x| x.to_f64_lossless()).collect();
            self.normalize(&row, &mut out);
        }
        Ok(out)
    }
}
