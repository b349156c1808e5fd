//! Forward kinematics over a [`Skeleton`].

use crate::error::{CoreError, Result};
use crate::motion::{MotionClip, PoseFrame, Skeleton};
use crate::rotation::{add3, axis_angle_to_matrix, mat_mul, mat_vec, Mat3, Vec3};
use crate::scalar::Real;

/// Global joint positions, `frames x joints` points.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions<S> {
    pub num_frames: usize,
    pub num_joints: usize,
    pub points: Vec<Vec3<S>>,
}

impl<S: Real> JointPositions<S> {
    pub fn frame(&self, t: usize) -> &[Vec3<S>] {
        &self.points[t * self.num_joints..(t + 1) * self.num_joints]
    }

    pub fn get(&self, t: usize, j: usize) -> Vec3<S> {
        self.points[t * self.num_joints + j]
    }

    /// Frame `t` flattened to `3 * J` scalars.
    pub fn frame_flat(&self, t: usize) -> Vec<S> {
        self.frame(t).iter().flatten().copied().collect()
    }

    /// All frames flattened, one `3 * J` row per frame.
    pub fn rows(&self) -> Vec<Vec<S>> {
        (0..self.num_frames).map(|t| self.frame_flat(t)).collect()
    }
}

/// Positions of every joint for a single frame.
pub fn forward_kinematics_frame<S: Real>(frame: &PoseFrame<S>, skeleton: &Skeleton<S>) -> Vec<Vec3<S>> {
    let n = skeleton.num_joints();
    let mut pos = vec![[S::zero(); 3]; n];
    let mut rot: Vec<Mat3<S>> = vec![[[S::zero(); 3]; 3]; n];
    for &j in skeleton.topological_order() {
        let local = axis_angle_to_matrix(frame.joint(j));
        match skeleton.parents[j] {
            None => {
                rot[j] = mat_mul(&axis_angle_to_matrix(frame.root_orientation), &local);
                pos[j] = frame.root_translation;
            }
            Some(p) => {
                pos[j] = add3(pos[p], mat_vec(&rot[p], skeleton.offsets[j]));
                rot[j] = mat_mul(&rot[p], &local);
            }
        }
    }
    pos
}

pub fn forward_kinematics<S: Real>(clip: &MotionClip<S>, skeleton: &Skeleton<S>) -> Result<JointPositions<S>> {
    if clip.num_joints != skeleton.num_joints() {
        return Err(CoreError::Shape(format!(
            "clip has {} joints, skeleton has {}",
            clip.num_joints,
            skeleton.num_joints()
        )));
    }
    let mut points = Vec::with_capacity(clip.len() * clip.num_joints);
    for f in &clip.frames {
        points.extend(forward_kinematics_frame(f, skeleton));
    }
    Ok(JointPositions {
        num_frames: clip.len(),
        num_joints: clip.num_joints,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::Axis;
    use crate::rotation::{axis_angle_to_matrix, sub3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain() -> Skeleton<f64> {
        Skeleton::new(vec![None, Some(0)], vec![[0.0, 1.0, 0.0]; 2], vec![], Axis::Y).unwrap()
    }

    #[test]
    fn identity_rotations_stack_offsets() {
        let mut f = PoseFrame::zeros(2);
        f.root_translation = [0.5, -1.0, 2.0];
        let clip = MotionClip::new(30.0, 2, vec![f.clone(), f]).unwrap();
        let p = forward_kinematics(&clip, &chain()).unwrap();
        assert_eq!(p.get(0, 0), [0.5, -1.0, 2.0]);
        assert_eq!(p.get(0, 1), [0.5, 0.0, 2.0]);
    }

    #[test]
    fn root_half_turn_about_z_flips_child() {
        let sk = Skeleton::new(vec![None, Some(0)], vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![], Axis::Y)
            .unwrap();
        let mut f = PoseFrame::zeros(2);
        f.root_translation = [3.0, 4.0, 5.0];
        f.root_orientation = [0.0, 0.0, std::f64::consts::PI];
        let pos = forward_kinematics_frame(&f, &sk);
        let d = sub3(pos[1], [2.0, 4.0, 5.0]);
        assert!(d.iter().all(|x| x.abs() < 1e-9), "{pos:?}");
    }

    #[test]
    fn translation_moves_every_joint() {
        let sk = Skeleton::<f64>::default_humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut f = PoseFrame::zeros(8);
        for x in f.joint_rotations.iter_mut() {
            *x = rng.random::<f64>() - 0.5;
        }
        let base = forward_kinematics_frame(&f, &sk);
        let delta = [0.25, -0.5, 1.0];
        f.root_translation = delta;
        let moved = forward_kinematics_frame(&f, &sk);
        for (a, b) in base.iter().zip(&moved) {
            for i in 0..3 {
                assert!((b[i] - a[i] - delta[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_rotation_equivariance() {
        let sk = Skeleton::<f64>::default_humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut f = PoseFrame::zeros(8);
            for x in f.joint_rotations.iter_mut() {
                *x = rng.random::<f64>() - 0.5;
            }
            f.root_orientation = [rng.random(), rng.random(), rng.random()];
            f.root_translation = [rng.random(), rng.random(), rng.random()];
            let g = [rng.random::<f64>() * 2.0 - 1.0, rng.random(), rng.random::<f64>() - 0.5];
            let gm = axis_angle_to_matrix(g);
            let base = forward_kinematics_frame(&f, &sk);
            let rotated_root = crate::rotation::Quat::from_axis_angle(g)
                .mul(crate::rotation::Quat::from_axis_angle(f.root_orientation))
                .to_axis_angle();
            let mut g_frame = f.clone();
            g_frame.root_orientation = rotated_root;
            g_frame.root_translation = mat_vec(&gm, f.root_translation);
            let moved = forward_kinematics_frame(&g_frame, &sk);
            for (a, b) in base.iter().zip(&moved) {
                let expect = mat_vec(&gm, *a);
                for i in 0..3 {
                    assert!((expect[i] - b[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn joint_count_mismatch_is_shape_error() {
        let clip = MotionClip::new(30.0, 3, vec![PoseFrame::<f64>::zeros(3); 2]).unwrap();
        assert!(matches!(forward_kinematics(&clip, &chain()), Err(CoreError::Shape(_))));
    }
}
