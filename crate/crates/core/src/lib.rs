//! Motion clips, skeletons and forward kinematics, kinematic phase
//! selection, evaluation-pair alignment and expert-quality metrics.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the scalar to `f64`, which is what the pipeline uses end to end.

pub mod alignment;
pub mod error;
pub mod fk;
pub mod io;
pub mod kinematics;
pub mod linalg;
pub mod metrics;
pub mod motion;
pub mod rotation;
pub mod scalar;
pub mod transform;

pub use error::{CoreError, Result};
pub use kinematics::{KinematicSignalSpec, MaskSpan, SignalKind};
pub use motion::{Axis, ClipMetadata, MotionClip, PoseFrame, Skeleton, SkillLabel};
pub use scalar::Real;

pub type Clip = MotionClip<f64>;
pub type Frame = PoseFrame<f64>;
pub type Skel = Skeleton<f64>;
pub type Pair = alignment::EvalPair<f64>;
pub type Positions = fk::JointPositions<f64>;
pub type Stats = metrics::GaussianStats<f64>;

pub type Clip32 = MotionClip<f32>;
pub type Skel32 = Skeleton<f32>;
