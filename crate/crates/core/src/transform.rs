//! Sagittal mirroring and temporal resampling of clips.

use crate::error::{CoreError, Result};
use crate::motion::{MotionClip, PoseFrame, Skeleton};
use crate::rotation::{slerp_axis_angle, Vec3};
use crate::scalar::Real;

/// Reflection of an axis-angle rotation across the `x = 0` plane.
#[inline]
pub fn mirror_axis_angle<S: Real>(v: Vec3<S>) -> Vec3<S> {
    [v[0], -v[1], -v[2]]
}

pub fn mirror_frame<S: Real>(frame: &PoseFrame<S>, skeleton: &Skeleton<S>) -> PoseFrame<S> {
    let r = frame.root_translation;
    let mut out = PoseFrame {
        root_translation: [-r[0], r[1], r[2]],
        root_orientation: mirror_axis_angle(frame.root_orientation),
        joint_rotations: frame.joint_rotations.clone(),
    };
    for j in 0..skeleton.num_joints() {
        out.set_joint(skeleton.mirror_of(j), mirror_axis_angle(frame.joint(j)));
    }
    out
}

/// Mirrors a clip across the sagittal (`x = 0`) plane, swapping left/right joints.
pub fn mirror_sagittal<S: Real>(clip: &MotionClip<S>, skeleton: &Skeleton<S>) -> Result<MotionClip<S>> {
    if clip.num_joints != skeleton.num_joints() {
        return Err(CoreError::Shape(format!(
            "clip has {} joints, skeleton has {}",
            clip.num_joints,
            skeleton.num_joints()
        )));
    }
    let mut out = clip.clone();
    out.frames = clip.frames.iter().map(|f| mirror_frame(f, skeleton)).collect();
    Ok(out)
}

fn interpolate_frame<S: Real>(a: &PoseFrame<S>, b: &PoseFrame<S>, t: S) -> PoseFrame<S> {
    let lerp = |x: S, y: S| x + (y - x) * t;
    let mut out = PoseFrame {
        root_translation: [
            lerp(a.root_translation[0], b.root_translation[0]),
            lerp(a.root_translation[1], b.root_translation[1]),
            lerp(a.root_translation[2], b.root_translation[2]),
        ],
        root_orientation: slerp_axis_angle(a.root_orientation, b.root_orientation, t),
        joint_rotations: a.joint_rotations.clone(),
    };
    for j in 0..a.num_joints() {
        out.set_joint(j, slerp_axis_angle(a.joint(j), b.joint(j), t));
    }
    out
}

/// Uniformly resamples a clip to `target_length` frames, keeping both endpoints.
///
/// Translations are interpolated linearly and rotations spherically. The frame
/// rate is rescaled so that the clip keeps its duration.
pub fn resample_uniform<S: Real>(clip: &MotionClip<S>, target_length: usize) -> Result<MotionClip<S>> {
    if target_length < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "target length must be at least 2, got {target_length}"
        )));
    }
    let src = clip.len();
    if src == target_length {
        return Ok(clip.clone());
    }
    let mut frames = Vec::with_capacity(target_length);
    for i in 0..target_length {
        // exact rational position i * (src - 1) / (target - 1)
        let num = i * (src - 1);
        let den = target_length - 1;
        let lo = num / den;
        let rem = num % den;
        if rem == 0 {
            frames.push(clip.frames[lo].clone());
        } else {
            let t = S::of_usize(rem) / S::of_usize(den);
            frames.push(interpolate_frame(&clip.frames[lo], &clip.frames[lo + 1], t));
        }
    }
    let mut out = clip.clone();
    out.fps = clip.fps * S::of_usize(target_length - 1) / S::of_usize(src - 1);
    out.frames = frames;
    Ok(out)
}
