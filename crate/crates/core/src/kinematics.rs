//! Scalar kinematic signals, skill-critical peak selection and mask spans.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fk::forward_kinematics;
use crate::motion::{MotionClip, Skeleton};
use crate::rotation::{norm3, sub3, Vec3};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    VerticalRootVelocity,
    MaxJointJerk,
    FootAcceleration,
    PosturalExtremeness,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KinematicSignalSpec {
    pub kind: SignalKind,
    /// Joints used by the jerk and acceleration signals; all joints when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_joints: Option<Vec<usize>>,
    #[serde(default = "default_smoothing")]
    pub smoothing_window: usize,
}

fn default_smoothing() -> usize {
    5
}

impl Default for KinematicSignalSpec {
    fn default() -> Self {
        Self {
            kind: SignalKind::VerticalRootVelocity,
            target_joints: None,
            smoothing_window: default_smoothing(),
        }
    }
}

impl KinematicSignalSpec {
    pub fn new(kind: SignalKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.smoothing_window == 0 || self.smoothing_window.is_multiple_of(2) {
            return Err(CoreError::InvalidArgument(format!(
                "smoothing window must be odd and positive, got {}",
                self.smoothing_window
            )));
        }
        Ok(())
    }
}

/// Inclusive frame range `[lo, hi]` centered (when not clamped) on `center`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    #[serde(rename = "t_star")]
    pub center: usize,
    pub half_width: usize,
    pub lo: usize,
    pub hi: usize,
}

impl MaskSpan {
    pub fn width(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn contains(&self, t: usize) -> bool {
        self.lo <= t && t <= self.hi
    }

    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }

    pub fn check_within(&self, len: usize) -> Result<()> {
        if self.lo > self.center || self.center > self.hi || self.hi >= len || self.width() < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "span [{}, {}] around {} is invalid for a clip of {len} frames",
                self.lo, self.hi, self.center
            )));
        }
        Ok(())
    }
}

/// `k`-th replicated-boundary finite difference of a scalar sequence.
///
/// Differences are taken where the stencil fits and the nearest valid value is
/// copied to the boundary frames.
fn finite_difference(x: &[f64], order: usize, fps: f64) -> Vec<f64> {
    let n = x.len();
    let (first, last, stencil): (usize, usize, fn(&[f64], usize) -> f64) = match order {
        1 => (1, n - 2, |x, t| (x[t + 1] - x[t - 1]) * 0.5),
        2 => (1, n - 2, |x, t| (x[t + 1] - x[t]) - (x[t] - x[t - 1])),
        3 => (1, n - 3, |x, t| (x[t + 2] - x[t - 1]) - 3.0 * (x[t + 1] - x[t])),
        _ => unreachable!("only orders 1..=3 are used"),
    };
    let scale = fps.powi(order as i32);
    let mut out = vec![0.0; n];
    for (t, o) in out.iter_mut().enumerate().take(last + 1).skip(first) {
        *o = stencil(x, t) * scale;
    }
    let (head, tail) = (out[first], out[last]);
    out[..first].fill(head);
    out[last + 1..].fill(tail);
    out
}

fn vector_difference_norm(series: &[Vec3<f64>], order: usize, fps: f64) -> Vec<f64> {
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|i| {
            let xs: Vec<f64> = series.iter().map(|p| p[i]).collect();
            finite_difference(&xs, order, fps)
        })
        .collect();
    (0..series.len())
        .map(|t| norm3([comps[0][t], comps[1][t], comps[2][t]]))
        .collect()
}

/// Centered moving average; the window shrinks at the clip boundaries.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return x.to_vec();
    }
    let half = window / 2;
    let n = x.len();
    (0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(n - 1);
            x[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Computes the scalar signal `h(t)` for a clip.
pub fn compute_signal<S: Real>(
    clip: &MotionClip<S>,
    skeleton: &Skeleton<S>,
    spec: &KinematicSignalSpec,
) -> Result<Vec<S>> {
    spec.validate()?;
    let n = clip.len();
    let fps = clip.fps.to_f64_lossless();
    let min_len = if spec.kind == SignalKind::MaxJointJerk { 4 } else { 3 };
    if n < min_len {
        return Err(CoreError::InsufficientLength { needed: min_len, got: n });
    }
    let targets = || -> Result<Vec<usize>> {
        let joints = spec
            .target_joints
            .clone()
            .unwrap_or_else(|| (0..clip.num_joints).collect());
        if let Some(&bad) = joints.iter().find(|&&j| j >= clip.num_joints) {
            return Err(CoreError::InvalidArgument(format!(
                "target joint {bad} does not exist in a {}-joint clip",
                clip.num_joints
            )));
        }
        if joints.is_empty() {
            return Err(CoreError::InvalidArgument("no target joints".into()));
        }
        Ok(joints)
    };
    let raw: Vec<f64> = match spec.kind {
        SignalKind::VerticalRootVelocity => {
            let up = clip.up_axis.index();
            let height: Vec<f64> = clip
                .frames
                .iter()
                .map(|f| f.root_translation[up].to_f64_lossless())
                .collect();
            finite_difference(&height, 1, fps)
        }
        SignalKind::MaxJointJerk | SignalKind::FootAcceleration => {
            let joints = targets()?;
            let pos = forward_kinematics(&clip.cast::<f64>(), &skeleton.cast::<f64>())?;
            let order = if spec.kind == SignalKind::MaxJointJerk { 3 } else { 2 };
            let mut out = vec![f64::NEG_INFINITY; n];
            for &j in &joints {
                let series: Vec<Vec3<f64>> = (0..n).map(|t| pos.get(t, j)).collect();
                for (o, v) in out.iter_mut().zip(vector_difference_norm(&series, order, fps)) {
                    *o = o.max(v);
                }
            }
            out
        }
        SignalKind::PosturalExtremeness => {
            let dim = 3 * clip.num_joints;
            let mut mean = vec![0.0; dim];
            for f in &clip.frames {
                for (m, x) in mean.iter_mut().zip(&f.joint_rotations) {
                    *m += x.to_f64_lossless();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            clip.frames
                .iter()
                .map(|f| {
                    f.joint_rotations
                        .iter()
                        .zip(&mean)
                        .map(|(x, m)| (x.to_f64_lossless() - m).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        }
    };
    Ok(moving_average(&raw, spec.smoothing_window)
        .into_iter()
        .map(S::of)
        .collect())
}

/// Index of the maximum, earliest index on ties.
pub fn select_peak<S: Real>(signal: &[S]) -> Result<usize> {
    if signal.is_empty() {
        return Err(CoreError::InvalidArgument("empty signal".into()));
    }
    if let Some(t) = signal.iter().position(|x| !x.is_finite()) {
        return Err(CoreError::InvalidInput(format!("signal value at {t} is not finite")));
    }
    let mut best = 0;
    for (t, &v) in signal.iter().enumerate().skip(1) {
        if v > signal[best] {
            best = t;
        }
    }
    Ok(best)
}

/// Span length `max(2, floor(alpha * T))`.
///
/// A tolerance of `1e-9` absorbs binary rounding of decimal `alpha` values so
/// that e.g. `0.29 * 100` floors to 29.
pub fn span_length(alpha: f64, len: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(CoreError::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    let raw = (alpha * len as f64 + 1e-9).floor() as usize;
    Ok(raw.max(2))
}

/// Span of `length` frames centered on `center`, clamped to `[0, len - 1]`.
pub fn span_with_length(center: usize, len: usize, length: usize) -> Result<MaskSpan> {
    if len < 2 {
        return Err(CoreError::InvalidArgument(format!("clip of {len} frames is too short to mask")));
    }
    if center >= len {
        return Err(CoreError::InvalidArgument(format!(
            "peak index {center} outside clip of {len} frames"
        )));
    }
    let half_width = (length.max(2)) / 2;
    let lo = center.saturating_sub(half_width);
    let hi = (center + half_width).min(len - 1);
    Ok(MaskSpan {
        center,
        half_width,
        lo,
        hi,
    })
}

pub fn make_span(center: usize, len: usize, alpha: f64) -> Result<MaskSpan> {
    span_with_length(center, len, span_length(alpha, len)?)
}

/// Signal, peak and span in one call; identical at training and inference.
pub fn locate_span<S: Real>(
    clip: &MotionClip<S>,
    skeleton: &Skeleton<S>,
    spec: &KinematicSignalSpec,
    alpha: f64,
) -> Result<MaskSpan> {
    let signal = compute_signal(clip, skeleton, spec)?;
    make_span(select_peak(&signal)?, clip.len(), alpha)
}

/// Distance between consecutive positions, used by a few diagnostics.
pub fn mean_step_length(series: &[Vec3<f64>]) -> f64 {
    if series.len() < 2 {
        return 0.0;
    }
    series.windows(2).map(|w| norm3(sub3(w[1], w[0]))).sum::<f64>() / (series.len() - 1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::PoseFrame;
    use proptest::prelude::*;

    fn clip_from(frames: Vec<PoseFrame<f64>>) -> MotionClip<f64> {
        let j = frames[0].num_joints();
        MotionClip::new(30.0, j, frames).unwrap()
    }

    #[test]
    fn constant_clip_has_zero_derivative_signals() {
        let sk = Skeleton::<f64>::default_humanoid();
        let mut f = PoseFrame::zeros(8);
        f.root_translation = [0.3, 1.0, 2.0];
        f.joint_rotations.iter_mut().enumerate().for_each(|(i, x)| *x = 0.05 * i as f64);
        let clip = clip_from(vec![f; 10]);
        for kind in [
            SignalKind::VerticalRootVelocity,
            SignalKind::MaxJointJerk,
            SignalKind::FootAcceleration,
            SignalKind::PosturalExtremeness,
        ] {
            let s = compute_signal(&clip, &sk, &KinematicSignalSpec::new(kind)).unwrap();
            assert!(s.iter().all(|x| x.abs() < 1e-12), "{kind:?}: {s:?}");
        }
    }

    #[test]
    fn linear_height_has_unit_velocity() {
        let sk = Skeleton::<f64>::default_humanoid();
        let frames = (0..12)
            .map(|t| {
                let mut f = PoseFrame::zeros(8);
                f.root_translation[1] = t as f64 / 30.0;
                f
            })
            .collect();
        let clip = clip_from(frames);
        let spec = KinematicSignalSpec {
            smoothing_window: 1,
            ..KinematicSignalSpec::new(SignalKind::VerticalRootVelocity)
        };
        let s = compute_signal(&clip, &sk, &spec).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-9), "{s:?}");
    }

    #[test]
    fn jerk_needs_four_frames() {
        let sk = Skeleton::<f64>::default_humanoid();
        let clip = clip_from(vec![PoseFrame::zeros(8); 3]);
        let err = compute_signal(&clip, &sk, &KinematicSignalSpec::new(SignalKind::MaxJointJerk));
        assert!(matches!(err, Err(CoreError::InsufficientLength { needed: 4, got: 3 })));
    }

    #[test]
    fn unknown_target_joint_rejected() {
        let sk = Skeleton::<f64>::default_humanoid();
        let clip = clip_from(vec![PoseFrame::zeros(8); 6]);
        let spec = KinematicSignalSpec {
            target_joints: Some(vec![9]),
            ..KinematicSignalSpec::new(SignalKind::FootAcceleration)
        };
        assert!(compute_signal(&clip, &sk, &spec).is_err());
    }

    #[test]
    fn even_smoothing_window_rejected() {
        let spec = KinematicSignalSpec {
            smoothing_window: 4,
            ..KinematicSignalSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cubic_position_has_constant_jerk() {
        let sk = Skeleton::new(vec![None], vec![[0.0; 3]], vec![], crate::motion::Axis::Y).unwrap();
        let frames = (0..10)
            .map(|t| {
                let mut f = PoseFrame::zeros(1);
                let s = t as f64 / 30.0;
                f.root_translation[2] = s * s * s;
                f
            })
            .collect();
        let clip = clip_from(frames);
        let spec = KinematicSignalSpec {
            smoothing_window: 1,
            ..KinematicSignalSpec::new(SignalKind::MaxJointJerk)
        };
        let s = compute_signal(&clip, &sk, &spec).unwrap();
        assert!(s.iter().all(|v| (v - 6.0).abs() < 1e-6), "{s:?}");
    }

    #[test]
    fn peak_examples() {
        assert_eq!(select_peak(&[0.0, 1.0, 0.0]).unwrap(), 1);
        assert_eq!(select_peak(&[2.0, 2.0, 1.0]).unwrap(), 0);
        let inc: Vec<f64> = (0..64).map(|t| t as f64).collect();
        assert_eq!(select_peak(&inc).unwrap(), 63);
        assert!(select_peak::<f64>(&[]).is_err());
        assert!(select_peak(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn span_examples() {
        let s = make_span(60, 120, 0.15).unwrap();
        assert_eq!((s.half_width, s.width()), (9, 19));
        assert_eq!(span_length(0.15, 120).unwrap(), 18);
        assert_eq!(span_length(0.05, 10).unwrap(), 2);
        assert_eq!(make_span(5, 10, 0.05).unwrap().half_width, 1);
        let s = make_span(0, 64, 0.3).unwrap();
        assert_eq!(span_length(0.3, 64).unwrap(), 19);
        assert_eq!((s.half_width, s.lo, s.hi), (9, 0, 9));
        assert!(make_span(0, 64, 1.0).is_err());
        assert!(make_span(0, 64, 0.0).is_err());
        assert!(make_span(64, 64, 0.2).is_err());
    }

    proptest! {
        #[test]
        fn peak_invariant_to_affine_rescaling(
            xs in proptest::collection::vec(-100.0f64..100.0, 1..50),
            shift in -50.0f64..50.0,
            scale in 0.01f64..10.0,
        ) {
            let moved: Vec<f64> = xs.iter().map(|x| x * scale + shift).collect();
            // rescaling can merge near-ties through rounding; compare on exact ties only
            let p = select_peak(&xs).unwrap();
            let q = select_peak(&moved).unwrap();
            prop_assert!(p == q || xs[p] == xs[q] || (moved[p] - moved[q]).abs() < 1e-9);
        }

        #[test]
        fn span_contains_center_and_is_bounded(
            len in 2usize..300,
            center_frac in 0.0f64..1.0,
            alpha in 0.001f64..0.999,
        ) {
            let center = ((len - 1) as f64 * center_frac) as usize;
            let s = make_span(center, len, alpha).unwrap();
            prop_assert!(s.contains(center));
            prop_assert!(s.width() >= 2);
            prop_assert!(s.width() <= 2 * s.half_width + 1);
            prop_assert!(s.hi < len);
        }
    }
}
