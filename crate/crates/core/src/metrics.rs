//! Expert-quality metrics: Procrustes-aligned MPJPE, pose improvement,
//! Fréchet distance between Gaussian feature statistics and FID improvement.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fk::forward_kinematics;
use crate::kinematics::MaskSpan;
use crate::linalg::{svd_square, symmetric_eigen};
use crate::motion::{MotionClip, Skeleton};
use crate::rotation::{det3, mat_vec, norm3, sub3, Mat3, Vec3};
use crate::scalar::Real;

/// Similarity transform mapping a source point set onto a target.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesResult<S> {
    pub rotation: Mat3<S>,
    pub scale: S,
    pub translation: Vec3<S>,
    /// Root-mean-square distance after alignment, in input units.
    pub residual: S,
}

impl<S: Real> ProcrustesResult<S> {
    pub fn apply(&self, p: Vec3<S>) -> Vec3<S> {
        let r = mat_vec(&self.rotation, p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
            self.scale * r[2] + self.translation[2],
        ]
    }
}

fn centroid<S: Real>(pts: &[Vec3<S>]) -> Vec3<S> {
    let n = S::of_usize(pts.len());
    let mut c = [S::zero(); 3];
    for p in pts {
        for i in 0..3 {
            c[i] = c[i] + p[i];
        }
    }
    c.map(|x| x / n)
}

/// Closed-form similarity alignment (scale, proper rotation, translation)
/// of `source` onto `target`.
pub fn procrustes_align<S: Real>(source: &[Vec3<S>], target: &[Vec3<S>]) -> Result<ProcrustesResult<S>> {
    if source.len() != target.len() {
        return Err(CoreError::Shape(format!(
            "{} source points vs {} target points",
            source.len(),
            target.len()
        )));
    }
    let n = source.len();
    if n < 3 {
        return Err(CoreError::DegenerateGeometry(format!("need at least 3 points, got {n}")));
    }
    let (mu_s, mu_t) = (centroid(source), centroid(target));
    let nf = S::of_usize(n);
    let mut h = vec![S::zero(); 9];
    let mut var_s = S::zero();
    for (s, t) in source.iter().zip(target) {
        let x = sub3(*s, mu_s);
        let y = sub3(*t, mu_t);
        var_s = var_s + x[0] * x[0] + x[1] * x[1] + x[2] * x[2];
        for i in 0..3 {
            for j in 0..3 {
                h[i * 3 + j] = h[i * 3 + j] + y[i] * x[j];
            }
        }
    }
    var_s = var_s / nf;
    h.iter_mut().for_each(|v| *v = *v / nf);
    let (u, sv, v) = svd_square(&h, 3);
    if !(sv[0] > S::zero()) || sv[1] <= sv[0] * S::of(1e-12) || var_s <= S::zero() {
        return Err(CoreError::DegenerateGeometry(
            "point configuration is rank deficient".into(),
        ));
    }
    let to_mat = |m: &[S]| -> Mat3<S> {
        [
            [m[0], m[1], m[2]],
            [m[3], m[4], m[5]],
            [m[6], m[7], m[8]],
        ]
    };
    let (um, vm) = (to_mat(&u), to_mat(&v));
    let d = if det3(&um) * det3(&vm) < S::zero() { -S::one() } else { S::one() };
    let mut rotation = [[S::zero(); 3]; 3];
    for (i, row) in rotation.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = um[i][0] * vm[j][0] + um[i][1] * vm[j][1] + d * um[i][2] * vm[j][2];
        }
    }
    let scale = (sv[0] + sv[1] + d * sv[2]) / var_s;
    let rm = mat_vec(&rotation, mu_s);
    let translation = [
        mu_t[0] - scale * rm[0],
        mu_t[1] - scale * rm[1],
        mu_t[2] - scale * rm[2],
    ];
    let mut result = ProcrustesResult {
        rotation,
        scale,
        translation,
        residual: S::zero(),
    };
    let sq: S = source
        .iter()
        .zip(target)
        .map(|(s, t)| {
            let e = norm3(sub3(result.apply(*s), *t));
            e * e
        })
        .sum();
    result.residual = (sq / nf).sqrt();
    Ok(result)
}

/// Mean joint distance after Procrustes alignment of one frame.
pub fn pa_frame_error<S: Real>(pred: &[Vec3<S>], target: &[Vec3<S>]) -> Result<S> {
    let fit = procrustes_align(pred, target)?;
    let total: S = pred
        .iter()
        .zip(target)
        .map(|(p, t)| norm3(sub3(fit.apply(*p), *t)))
        .sum();
    Ok(total / S::of_usize(pred.len()))
}

/// PA-MPJPE over the frames of `span` only.
pub fn pa_mpjpe<S: Real>(
    pred: &MotionClip<S>,
    target: &MotionClip<S>,
    skeleton: &Skeleton<S>,
    span: &MaskSpan,
) -> Result<S> {
    if pred.len() != target.len() || pred.num_joints != target.num_joints {
        return Err(CoreError::Shape(format!(
            "clips differ in shape: {}x{} vs {}x{}",
            pred.len(),
            pred.num_joints,
            target.len(),
            target.num_joints
        )));
    }
    if span.hi < span.lo || span.hi >= pred.len() {
        return Err(CoreError::InvalidArgument(format!(
            "span [{}, {}] is empty or outside {} frames",
            span.lo,
            span.hi,
            pred.len()
        )));
    }
    let pp = forward_kinematics(pred, skeleton)?;
    let tp = forward_kinematics(target, skeleton)?;
    let mut total = S::zero();
    for t in span.frames() {
        total = total + pa_frame_error(pp.frame(t), tp.frame(t))?;
    }
    Ok(total / S::of_usize(span.width()))
}

/// Per-novice pose-improvement breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseImprovement {
    pub err_novice: f64,
    /// Minimum over edits of the expert-averaged error.
    pub err_gen: f64,
    pub edit_errors: Vec<f64>,
    pub p_percent: f64,
}

/// `(err_novice - err_gen) / err_novice * 100`.
pub fn improvement_percent(err_before: f64, err_after: f64) -> Result<f64> {
    if !(err_before > 0.0) {
        return Err(CoreError::UndefinedImprovement(format!(
            "baseline error is {err_before}"
        )));
    }
    Ok((err_before - err_after) / err_before * 100.0)
}

/// Aggregates already computed errors: minimum over edits, then relative improvement.
pub fn pose_improvement_from_errors(err_novice: f64, edit_errors: &[f64]) -> Result<PoseImprovement> {
    if edit_errors.is_empty() {
        return Err(CoreError::InvalidArgument("no edits".into()));
    }
    let err_gen = edit_errors.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(PoseImprovement {
        err_novice,
        err_gen,
        edit_errors: edit_errors.to_vec(),
        p_percent: improvement_percent(err_novice, err_gen)?,
    })
}

/// Each clip's error is averaged over the `k` experts; the best of the `m`
/// edits is compared against the novice.
pub fn pose_improvement<S: Real>(
    novice: &MotionClip<S>,
    edits: &[MotionClip<S>],
    experts: &[MotionClip<S>],
    skeleton: &Skeleton<S>,
    span: &MaskSpan,
) -> Result<PoseImprovement> {
    if experts.is_empty() {
        return Err(CoreError::InvalidArgument("no expert references".into()));
    }
    let expert_mean = |clip: &MotionClip<S>| -> Result<f64> {
        let mut sum = 0.0;
        for e in experts {
            sum += pa_mpjpe(clip, e, skeleton, span)?.to_f64_lossless();
        }
        Ok(sum / experts.len() as f64)
    };
    let err_novice = expert_mean(novice)?;
    let edit_errors = edits.iter().map(expert_mean).collect::<Result<Vec<_>>>()?;
    pose_improvement_from_errors(err_novice, &edit_errors)
}

/// Mean and covariance of a feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats<S> {
    pub mean: Vec<S>,
    /// Row-major `d x d`.
    pub cov: Vec<S>,
}

/// Covariance estimate used when building [`GaussianStats`] from samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Shrinkage {
    /// Ledoit-Wolf shrinkage toward a scaled identity when `n < 2 d`.
    #[default]
    Auto,
    Never,
    Always,
}

impl<S: Real> GaussianStats<S> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d {
            return Err(CoreError::InvalidStats(format!(
                "covariance has {} entries for dimension {d}",
                self.cov.len()
            )));
        }
        if !self.mean.iter().chain(&self.cov).all(|x| x.is_finite()) {
            return Err(CoreError::InvalidStats("non-finite entries".into()));
        }
        let scale = self.cov.iter().fold(S::one(), |m, x| m.max(x.abs()));
        for i in 0..d {
            for j in (i + 1)..d {
                if (self.cov[i * d + j] - self.cov[j * d + i]).abs() > S::of(1e-9) * scale {
                    return Err(CoreError::InvalidStats(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let (vals, _) = symmetric_eigen(&self.cov, d);
        if let Some(&min) = vals.first() {
            if min < -S::of(1e-8) * scale {
                return Err(CoreError::InvalidStats(format!("covariance has eigenvalue {min}")));
            }
        }
        Ok(())
    }

    /// Sample statistics of `samples` (each of equal dimension).
    pub fn from_samples(samples: &[Vec<S>], shrinkage: Shrinkage) -> Result<Self> {
        let n = samples.len();
        if n < 2 {
            return Err(CoreError::InvalidArgument(format!("need at least 2 samples, got {n}")));
        }
        let d = samples[0].len();
        if samples.iter().any(|s| s.len() != d) {
            return Err(CoreError::Shape("samples differ in dimension".into()));
        }
        let nf = S::of_usize(n);
        let mut mean = vec![S::zero(); d];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s) {
                *m = *m + *x;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nf);
        let centered: Vec<Vec<S>> = samples
            .iter()
            .map(|s| s.iter().zip(&mean).map(|(x, m)| *x - *m).collect())
            .collect();
        let mut scatter = vec![S::zero(); d * d];
        for x in &centered {
            for i in 0..d {
                let xi = x[i];
                for j in i..d {
                    scatter[i * d + j] = scatter[i * d + j] + xi * x[j];
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                scatter[i * d + j] = scatter[j * d + i];
            }
        }
        let shrink = match shrinkage {
            Shrinkage::Never => false,
            Shrinkage::Always => true,
            Shrinkage::Auto => n < 2 * d,
        };
        let cov = if shrink {
            ledoit_wolf(&centered, &scatter, d)
        } else {
            let denom = S::of_usize(n - 1);
            scatter.iter().map(|x| *x / denom).collect()
        };
        let stats = Self { mean, cov };
        stats.validate()?;
        Ok(stats)
    }
}

/// Ledoit-Wolf shrinkage of the biased sample covariance toward `mu * I`.
fn ledoit_wolf<S: Real>(centered: &[Vec<S>], scatter: &[S], d: usize) -> Vec<S> {
    let nf = S::of_usize(centered.len());
    let emp: Vec<S> = scatter.iter().map(|x| *x / nf).collect();
    let mu = (0..d).map(|i| emp[i * d + i]).sum::<S>() / S::of_usize(d);
    let mut delta = S::zero();
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { mu } else { S::zero() };
            let diff = emp[i * d + j] - target;
            delta = delta + diff * diff;
        }
    }
    let emp_fro: S = emp.iter().map(|x| *x * *x).sum();
    let mut beta = S::zero();
    for x in centered {
        let sq: S = x.iter().map(|v| *v * *v).sum();
        let mut quad = S::zero();
        for i in 0..d {
            let row: S = (0..d).map(|j| emp[i * d + j] * x[j]).sum();
            quad = quad + x[i] * row;
        }
        beta = beta + sq * sq - S::of(2.0) * quad + emp_fro;
    }
    beta = beta / (nf * nf);
    let lambda = if delta > S::zero() { (beta.min(delta) / delta).max(S::zero()) } else { S::one() };
    let mut out: Vec<S> = emp.iter().map(|x| *x * (S::one() - lambda)).collect();
    for i in 0..d {
        out[i * d + i] = out[i * d + i] + lambda * mu;
    }
    out
}

fn sym_sqrt<S: Real>(m: &[S], d: usize) -> Vec<S> {
    let (vals, vecs) = symmetric_eigen(m, d);
    let roots: Vec<S> = vals.iter().map(|v| v.max(S::zero()).sqrt()).collect();
    let mut out = vec![S::zero(); d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = (0..d).map(|k| vecs[i * d + k] * roots[k] * vecs[j * d + k]).sum();
        }
    }
    out
}

fn matmul_sq<S: Real>(a: &[S], b: &[S], d: usize) -> Vec<S> {
    let mut c = vec![S::zero(); d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                c[i * d + j] = c[i * d + j] + aik * b[k * d + j];
            }
        }
    }
    c
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2 (Σa Σb)^½)`, using the symmetric form
/// `(Σa^½ Σb Σa^½)^½` for the cross term.
pub fn frechet_distance<S: Real>(a: &GaussianStats<S>, b: &GaussianStats<S>) -> Result<S> {
    a.validate()?;
    b.validate()?;
    let d = a.dim();
    if b.dim() != d {
        return Err(CoreError::InvalidStats(format!("dimensions {d} and {} differ", b.dim())));
    }
    let mean_term: S = a.mean.iter().zip(&b.mean).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
    let trace = |m: &[S]| (0..d).map(|i| m[i * d + i]).sum::<S>();
    let sa = sym_sqrt(&a.cov, d);
    let mut m = matmul_sq(&matmul_sq(&sa, &b.cov, d), &sa, d);
    for i in 0..d {
        for j in (i + 1)..d {
            let avg = (m[i * d + j] + m[j * d + i]) * S::of(0.5);
            m[i * d + j] = avg;
            m[j * d + i] = avg;
        }
    }
    let (vals, _) = symmetric_eigen(&m, d);
    let cross: S = vals
        .iter()
        .map(|v| v.max(S::zero()).sqrt())
        .sum();
    let fd = mean_term + trace(&a.cov) + trace(&b.cov) - S::of(2.0) * cross;
    Ok(fd.max(S::zero()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidImprovement {
    pub fd_novice: f64,
    pub fd_edited: f64,
    pub f_percent: f64,
}

/// Relative reduction of the Fréchet distance to the expert features.
pub fn fid_improvement<S: Real>(
    novice: &[Vec<S>],
    edited: &[Vec<S>],
    expert: &[Vec<S>],
    shrinkage: Shrinkage,
) -> Result<FidImprovement> {
    let ref_stats = GaussianStats::from_samples(expert, shrinkage)?;
    let fd_novice = frechet_distance(&GaussianStats::from_samples(novice, shrinkage)?, &ref_stats)?
        .to_f64_lossless();
    let fd_edited = frechet_distance(&GaussianStats::from_samples(edited, shrinkage)?, &ref_stats)?
        .to_f64_lossless();
    if fd_novice <= 1e-12 {
        return Err(CoreError::UndefinedImprovement(
            "novice features already match the expert distribution".into(),
        ));
    }
    Ok(FidImprovement {
        fd_novice,
        fd_edited,
        f_percent: (fd_novice - fd_edited) / fd_novice * 100.0,
    })
}
