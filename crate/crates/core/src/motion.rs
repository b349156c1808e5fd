//! Motion clips, pose frames and skeletons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rotation::Vec3;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    #[default]
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SkillLabel {
    Expert,
    Novice,
}

/// Optional per-clip annotations carried through file I/O.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClipMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub technique: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<SkillLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narration_embedding: Option<Vec<f64>>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// One frame: root translation, root orientation and per-joint rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame<S> {
    pub root_translation: Vec3<S>,
    pub root_orientation: Vec3<S>,
    /// `3 * J` axis-angle components, joint-major.
    pub joint_rotations: Vec<S>,
}

impl<S: Real> PoseFrame<S> {
    pub fn zeros(num_joints: usize) -> Self {
        Self {
            root_translation: [S::zero(); 3],
            root_orientation: [S::zero(); 3],
            joint_rotations: vec![S::zero(); 3 * num_joints],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_rotations.len() / 3
    }

    pub fn feature_len(&self) -> usize {
        6 + self.joint_rotations.len()
    }

    pub fn joint(&self, j: usize) -> Vec3<S> {
        let b = 3 * j;
        [
            self.joint_rotations[b],
            self.joint_rotations[b + 1],
            self.joint_rotations[b + 2],
        ]
    }

    pub fn set_joint(&mut self, j: usize, v: Vec3<S>) {
        self.joint_rotations[3 * j..3 * j + 3].copy_from_slice(&v);
    }

    pub fn is_finite(&self) -> bool {
        self.root_translation.iter().all(|x| x.is_finite())
            && self.root_orientation.iter().all(|x| x.is_finite())
            && self.joint_rotations.iter().all(|x| x.is_finite())
    }

    /// Flattens the frame into `[r | o | p]`.
    pub fn assemble_feature_vector(&self) -> Result<Vec<S>> {
        if !self.is_finite() {
            return Err(CoreError::InvalidInput(
                "pose frame contains a non-finite component".into(),
            ));
        }
        let mut out = Vec::with_capacity(self.feature_len());
        out.extend_from_slice(&self.root_translation);
        out.extend_from_slice(&self.root_orientation);
        out.extend_from_slice(&self.joint_rotations);
        Ok(out)
    }

    /// Inverse of [`PoseFrame::assemble_feature_vector`].
    pub fn from_features(features: &[S]) -> Result<Self> {
        if features.len() < 9 || !(features.len() - 6).is_multiple_of(3) {
            return Err(CoreError::Shape(format!(
                "feature vector of length {} is not 6 + 3J with J >= 1",
                features.len()
            )));
        }
        Ok(Self {
            root_translation: [features[0], features[1], features[2]],
            root_orientation: [features[3], features[4], features[5]],
            joint_rotations: features[6..].to_vec(),
        })
    }
}

/// A length-`T` motion sequence sampled at `fps`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionClip<S> {
    pub fps: S,
    pub num_joints: usize,
    pub up_axis: Axis,
    pub metadata: ClipMetadata,
    pub frames: Vec<PoseFrame<S>>,
}

impl<S: Real> MotionClip<S> {
    /// Builds a clip and checks every invariant.
    pub fn new(fps: S, num_joints: usize, frames: Vec<PoseFrame<S>>) -> Result<Self> {
        let clip = Self {
            fps,
            num_joints,
            up_axis: Axis::default(),
            metadata: ClipMetadata::default(),
            frames,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn with_up_axis(mut self, axis: Axis) -> Self {
        self.up_axis = axis;
        self
    }

    pub fn with_metadata(mut self, metadata: ClipMetadata) -> Self {
        self.metadata = metadata;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps.is_finite() && self.fps > S::zero()) {
            return Err(CoreError::Validation(format!("fps must be positive, got {}", self.fps)));
        }
        if self.num_joints == 0 {
            return Err(CoreError::Validation("num_joints must be positive".into()));
        }
        if self.frames.len() < 2 {
            return Err(CoreError::Validation(format!(
                "clip needs at least 2 frames, got {}",
                self.frames.len()
            )));
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.joint_rotations.len() != 3 * self.num_joints {
                return Err(CoreError::Validation(format!(
                    "frame {t} has {} components, expected {}",
                    f.feature_len(),
                    6 + 3 * self.num_joints
                )));
            }
            if !f.is_finite() {
                return Err(CoreError::Validation(format!("frame {t} has a non-finite component")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        6 + 3 * self.num_joints
    }

    pub fn id(&self) -> &str {
        self.metadata.id.as_deref().unwrap_or("")
    }

    /// `T x (6 + 3J)` row-major feature matrix.
    pub fn feature_matrix(&self) -> Result<Vec<S>> {
        let mut out = Vec::with_capacity(self.len() * self.feature_dim());
        for f in &self.frames {
            out.extend(f.assemble_feature_vector()?);
        }
        Ok(out)
    }

    /// Rebuilds frames from a row-major feature matrix, keeping this clip's header.
    pub fn with_features(&self, features: &[S]) -> Result<Self> {
        let d = self.feature_dim();
        if !features.len().is_multiple_of(d) {
            return Err(CoreError::Shape(format!(
                "feature matrix of {} values is not a multiple of {d}",
                features.len()
            )));
        }
        let frames = features
            .chunks_exact(d)
            .map(PoseFrame::from_features)
            .collect::<Result<Vec<_>>>()?;
        let clip = Self {
            frames,
            ..self.header_clone()
        };
        clip.validate()?;
        Ok(clip)
    }

    fn header_clone(&self) -> Self {
        Self {
            fps: self.fps,
            num_joints: self.num_joints,
            up_axis: self.up_axis,
            metadata: self.metadata.clone(),
            frames: Vec::new(),
        }
    }

    pub fn cast<U: Real>(&self) -> MotionClip<U> {
        let c = |x: S| U::of(x.to_f64_lossless());
        MotionClip {
            fps: c(self.fps),
            num_joints: self.num_joints,
            up_axis: self.up_axis,
            metadata: self.metadata.clone(),
            frames: self
                .frames
                .iter()
                .map(|f| PoseFrame {
                    root_translation: f.root_translation.map(c),
                    root_orientation: f.root_orientation.map(c),
                    joint_rotations: f.joint_rotations.iter().map(|&x| c(x)).collect(),
                })
                .collect(),
        }
    }
}

/// Kinematic tree used for forward kinematics and mirroring.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton<S> {
    /// Parent of each joint, `None` for the root.
    pub parents: Vec<Option<usize>>,
    /// Offset of each joint in its parent's frame. The root offset is ignored.
    pub offsets: Vec<Vec3<S>>,
    pub mirror_pairs: Vec<(usize, usize)>,
    pub up_axis: Axis,
    pub names: Vec<String>,
    order: Vec<usize>,
    mirror_map: Vec<usize>,
}

impl<S: Real> Skeleton<S> {
    pub fn new(
        parents: Vec<Option<usize>>,
        offsets: Vec<Vec3<S>>,
        mirror_pairs: Vec<(usize, usize)>,
        up_axis: Axis,
    ) -> Result<Self> {
        let n = parents.len();
        if n == 0 {
            return Err(CoreError::Validation("skeleton has no joints".into()));
        }
        if offsets.len() != n {
            return Err(CoreError::Validation(format!(
                "{} offsets for {n} joints",
                offsets.len()
            )));
        }
        let roots: Vec<usize> = (0..n).filter(|&j| parents[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(CoreError::Validation(format!(
                "skeleton must have exactly one root, found {}",
                roots.len()
            )));
        }
        let mut children = vec![Vec::new(); n];
        for (j, p) in parents.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == j {
                    return Err(CoreError::Validation(format!("joint {j} has invalid parent {p}")));
                }
                children[p].push(j);
            }
        }
        // breadth-first order from the root; unreachable joints mean a cycle
        let mut order = vec![roots[0]];
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            order.extend_from_slice(&children[j]);
            head += 1;
        }
        if order.len() != n {
            return Err(CoreError::Validation("parent indices do not form a single tree".into()));
        }
        let mut mirror_map: Vec<usize> = (0..n).collect();
        let mut seen = vec![false; n];
        for &(l, r) in &mirror_pairs {
            if l >= n || r >= n || l == r || seen[l] || seen[r] {
                return Err(CoreError::Validation(format!(
                    "mirror pair ({l}, {r}) is out of range or repeats a joint"
                )));
            }
            seen[l] = true;
            seen[r] = true;
            mirror_map[l] = r;
            mirror_map[r] = l;
        }
        Ok(Self {
            names: (0..n).map(|j| format!("joint{j}")).collect(),
            parents,
            offsets,
            mirror_pairs,
            up_axis,
            order,
            mirror_map,
        })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_joints() {
            return Err(CoreError::Validation("one name per joint required".into()));
        }
        self.names = names;
        Ok(self)
    }

    pub fn num_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    /// Joints ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Mirror counterpart of each joint (itself when unpaired).
    pub fn mirror_of(&self, joint: usize) -> usize {
        self.mirror_map[joint]
    }

    /// Joints with no children.
    pub fn leaves(&self) -> Vec<usize> {
        (0..self.num_joints())
            .filter(|&j| !self.parents.contains(&Some(j)))
            .collect()
    }

    /// Small 8-joint humanoid: x lateral (left positive), y up, z forward.
    pub fn default_humanoid() -> Self {
        let o = |x: f64, y: f64, z: f64| [S::of(x), S::of(y), S::of(z)];
        Self::new(
            vec![None, Some(0), Some(1), Some(1), Some(0), Some(0), Some(4), Some(5)],
            vec![
                o(0.0, 0.0, 0.0),
                o(0.0, 0.5, 0.0),
                o(0.32, 0.05, 0.0),
                o(-0.32, 0.05, 0.0),
                o(0.12, -0.45, 0.0),
                o(-0.12, -0.45, 0.0),
                o(0.0, -0.45, 0.0),
                o(0.0, -0.45, 0.0),
            ],
            vec![(2, 3), (4, 5), (6, 7)],
            Axis::Y,
        )
        .and_then(|s| {
            s.with_names(
                ["pelvis", "chest", "l_shoulder", "r_shoulder", "l_knee", "r_knee", "l_ankle", "r_ankle"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect(),
            )
        })
        .expect("built-in skeleton is valid")
    }

    pub fn cast<U: Real>(&self) -> Skeleton<U> {
        Skeleton {
            parents: self.parents.clone(),
            offsets: self
                .offsets
                .iter()
                .map(|o| o.map(|x| U::of(x.to_f64_lossless())))
                .collect(),
            mirror_pairs: self.mirror_pairs.clone(),
            up_axis: self.up_axis,
            names: self.names.clone(),
            order: self.order.clone(),
            mirror_map: self.mirror_map.clone(),
        }
    }
}
