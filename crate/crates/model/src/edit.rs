//! Novice-to-expert editing: tokenize, mask the kinematic span, infill, decode
//! and splice back into the novice clip.

use serde::{Deserialize, Serialize};
use skilledit_core::kinematics::locate_span;
use skilledit_core::rotation::Quat;
use skilledit_core::{KinematicSignalSpec, MaskSpan, MotionClip, PoseFrame, Skeleton};

use crate::error::{ModelError, Result};
use crate::infiller::{InfillMode, Infiller};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOptions {
    pub signal: KinematicSignalSpec,
    pub alpha: f64,
    /// Number of edits; the first is greedy, the rest are sampled.
    pub m: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Blend decoded rotations into the novice over the two frames inside
    /// each span boundary.
    pub crossfade: bool,
}

impl EditOptions {
    pub fn new(signal: KinematicSignalSpec) -> Self {
        Self { signal, alpha: 0.15, m: 3, temperature: 1.0, seed: 0, crossfade: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub clips: Vec<MotionClip<f64>>,
    pub span: MaskSpan,
    pub modes: Vec<InfillMode>,
    /// Seed used for each edit.
    pub seeds: Vec<u64>,
}

/// Weight of the decoded pose at frame `t` of `span`: ramps 1/3, 2/3, 1 from
/// each boundary inward.
pub fn crossfade_weight(span: &MaskSpan, t: usize) -> f64 {
    let from_lo = (t - span.lo + 1) as f64 / 3.0;
    let from_hi = (span.hi - t + 1) as f64 / 3.0;
    from_lo.min(from_hi).min(1.0)
}

/// Novice frames everywhere except the joint rotations inside `span`, which
/// come from `decoded`.
pub fn splice(novice: &MotionClip<f64>, decoded: &[Vec<f64>], span: &MaskSpan, crossfade: bool) -> Result<MotionClip<f64>> {
    span.check_within(novice.len())?;
    if decoded.len() != novice.len() {
        return Err(ModelError::InvalidArgument(format!(
            "decoded {} frames for a clip of {}",
            decoded.len(),
            novice.len()
        )));
    }
    let mut out = novice.clone();
    for t in span.frames() {
        let gen = PoseFrame::from_features(&decoded[t])?;
        if gen.num_joints() != novice.num_joints {
            return Err(ModelError::InvalidArgument("decoded joint count differs from the novice".into()));
        }
        let frame = &mut out.frames[t];
        let w = if crossfade { crossfade_weight(span, t) } else { 1.0 };
        for j in 0..novice.num_joints {
            let target = gen.joint(j);
            let v = if w >= 1.0 {
                target
            } else {
                Quat::from_axis_angle(frame.joint(j)).slerp(Quat::from_axis_angle(target), w).to_axis_angle()
            };
            frame.set_joint(j, v);
        }
    }
    Ok(out)
}

/// Produces `m` edited versions of `novice`.
pub fn edit_motion(
    novice: &MotionClip<f64>,
    tokenizer: &Tokenizer,
    infiller: &Infiller,
    skeleton: &Skeleton<f64>,
    options: &EditOptions,
) -> Result<EditResult> {
    if tokenizer.technique != infiller.technique {
        return Err(ModelError::Config(format!(
            "tokenizer is for {:?} but infiller is for {:?}",
            tokenizer.technique, infiller.technique
        )));
    }
    if tokenizer.config.num_books != infiller.num_books || tokenizer.config.codes_per_book != infiller.codes_per_book {
        return Err(ModelError::Config("tokenizer and infiller disagree on the codebook layout".into()));
    }
    if options.m == 0 {
        return Err(ModelError::InvalidArgument("m must be at least 1".into()));
    }
    let span = locate_span(novice, skeleton, &options.signal, options.alpha)?;
    let tokens = tokenizer.tokenize(novice)?;
    let mut result = EditResult { clips: Vec::new(), span, modes: Vec::new(), seeds: Vec::new() };
    for i in 0..options.m {
        let mode = if i == 0 { InfillMode::Greedy } else { InfillMode::Sample { temperature: options.temperature } };
        let seed = options.seed.wrapping_add(i as u64);
        let filled = infiller.infill(&tokens.tokens, &span, mode, seed)?;
        let decoded = tokenizer.decode(&filled)?;
        result.clips.push(splice(novice, &decoded, &span, options.crossfade)?);
        result.modes.push(mode);
        result.seeds.push(seed);
    }
    Ok(result)
}
