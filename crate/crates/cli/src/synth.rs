//! Synthetic technique corpus: experts are phase-locked stride cycles with a
//! jump and a skill-specific pose around takeoff; novices are copies of
//! held-out experts with that pose corrupted near the kinematic peak.

use std::f64::consts::PI;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skilledit_core::kinematics::{compute_signal, select_peak};
use skilledit_core::{ClipMetadata, KinematicSignalSpec, MotionClip, PoseFrame, Skeleton, SkillLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTechniqueSpec {
    pub frames: usize,
    pub fps: f64,
    pub num_joints: usize,
    pub train_experts: usize,
    pub heldout_experts: usize,
    /// Designed takeoff frame; each clip draws it within `peak_jitter`.
    pub peak_frame: usize,
    pub peak_jitter: usize,
    /// Stride frequency band in Hz.
    pub stride_hz: [f64; 2],
    pub speed: [f64; 2],
    pub jump_height: [f64; 2],
    /// Spread of the stride phase at takeoff, radians.
    pub phase_jitter: f64,
    /// Relative spread of the movement amplitudes.
    pub amplitude_jitter: f64,
    /// Largest per-component rotation offset injected into novices, radians.
    pub novice_amplitude: f64,
    /// Fraction of the skill pose novices keep.
    pub novice_skill: f64,
    /// Frames touched by the novice corruption, centered on the peak.
    pub novice_width: usize,
    /// Novices are shifted in time by up to this many frames.
    pub timing_jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticTechniqueSpec {
    fn default() -> Self {
        Self {
            frames: 64,
            fps: 30.0,
            num_joints: 8,
            train_experts: 512,
            heldout_experts: 240,
            peak_frame: 32,
            peak_jitter: 1,
            stride_hz: [1.4, 1.8],
            speed: [2.5, 3.5],
            jump_height: [0.3, 0.5],
            phase_jitter: 0.2,
            amplitude_jitter: 0.15,
            novice_amplitude: 0.6,
            novice_skill: 0.2,
            novice_width: 9,
            timing_jitter: 2,
            seed: 0,
        }
    }
}

impl SyntheticTechniqueSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_joints != 8 {
            bail!("the synthetic generator drives the 8-joint humanoid, got num_joints = {}", self.num_joints);
        }
        if self.novice_width == 0 || self.novice_width > self.frames {
            bail!("novice_width must be in 1..={}, got {}", self.frames, self.novice_width);
        }
        let margin = self.peak_jitter + self.novice_width / 2 + self.timing_jitter + 2;
        if self.peak_frame < margin || self.peak_frame + margin >= self.frames {
            bail!("peak_frame {} leaves no room for the corruption window in {} frames", self.peak_frame, self.frames);
        }
        if self.train_experts == 0 || self.heldout_experts == 0 {
            bail!("corpus sizes must be positive");
        }
        for (name, [lo, hi]) in [("stride_hz", self.stride_hz), ("speed", self.speed), ("jump_height", self.jump_height)] {
            if !(lo > 0.0 && lo <= hi) {
                bail!("{name} band [{lo}, {hi}] is invalid");
            }
        }
        if !(self.fps > 0.0) || !(0.0..1.0).contains(&self.amplitude_jitter) || !(0.0..=1.0).contains(&self.novice_skill) {
            bail!("fps, amplitude_jitter or novice_skill out of range");
        }
        Ok(())
    }
}

/// How a novice was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoviceSource {
    pub novice_id: String,
    /// Index into the held-out experts.
    pub expert_index: usize,
    pub expert_id: String,
    /// Peak frame of the source expert, where the corruption is centered.
    pub peak: usize,
    /// Frames the novice lags its source by.
    pub shift: i64,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub train_experts: Vec<MotionClip<f64>>,
    pub heldout_experts: Vec<MotionClip<f64>>,
    pub novices: Vec<MotionClip<f64>>,
    pub pairing: Vec<NoviceSource>,
    /// Designed takeoff frame of every training then held-out expert.
    pub designed_peaks: Vec<usize>,
}

struct ExpertParams {
    takeoff: usize,
    omega: f64,
    phase: f64,
    speed: f64,
    height: f64,
    scale: f64,
    skill: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skill pose weight: peaks just after takeoff.
fn skill_curve(t: f64, takeoff: usize) -> f64 {
    (-((t - takeoff as f64 - 1.0) / 2.5).powi(2)).exp()
}

/// Joint-rotation offsets that make up the skill pose (knee tuck, chest lean,
/// arms up), per unit of `skill_curve`.
const SKILL_POSE: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [0.35, 0.0, 0.0],
    [-1.2, 0.0, 0.3],
    [-1.2, 0.0, -0.3],
    [-0.9, 0.0, 0.0],
    [-0.9, 0.0, 0.0],
    [0.6, 0.0, 0.0],
    [0.6, 0.0, 0.0],
];

fn sample_params(spec: &SyntheticTechniqueSpec, rng: &mut ChaCha8Rng) -> ExpertParams {
    let j = spec.peak_jitter as i64;
    let takeoff = (spec.peak_frame as i64 + rng.random_range(-j..=j)) as usize;
    let hz = rng.random_range(spec.stride_hz[0]..=spec.stride_hz[1]);
    let omega = 2.0 * PI * hz / spec.fps;
    // stride phase is locked to takeoff, so the legs are in the same place at the jump
    let at_takeoff = PI / 2.0 + rng.random_range(-spec.phase_jitter..=spec.phase_jitter);
    let phase = at_takeoff - omega * takeoff as f64;
    let aj = spec.amplitude_jitter;
    ExpertParams {
        takeoff,
        omega,
        phase,
        speed: rng.random_range(spec.speed[0]..=spec.speed[1]),
        height: rng.random_range(spec.jump_height[0]..=spec.jump_height[1]),
        scale: rng.random_range(1.0 - aj..=1.0 + aj),
        skill: rng.random_range(0.9..=1.1),
    }
}

fn expert_clip(spec: &SyntheticTechniqueSpec, p: &ExpertParams, id: String) -> Result<MotionClip<f64>> {
    let frames = (0..spec.frames)
        .map(|t| {
            let tf = t as f64;
            let a = p.omega * tf + p.phase;
            let s = p.scale;
            let g = p.skill * skill_curve(tf, p.takeoff);
            let rise = sigmoid((tf - p.takeoff as f64) / 1.5) - sigmoid((tf - p.takeoff as f64 - 14.0) / 3.0);
            let mut f = PoseFrame::zeros(8);
            f.root_translation = [
                0.03 * s * a.sin(),
                0.95 + p.height * rise + 0.01 * (2.0 * a).sin(),
                p.speed * tf / spec.fps,
            ];
            f.root_orientation = [0.0, 0.05 * s * a.sin(), 0.0];
            let swing = [
                [0.05 * s * (2.0 * a).sin(), 0.08 * s * a.sin(), 0.0],
                [0.15 + 0.05 * s * (2.0 * a).sin(), -0.1 * s * a.sin(), 0.0],
                [-0.6 * s * a.sin(), 0.0, 0.2],
                [0.6 * s * a.sin(), 0.0, -0.2],
                [0.5 * s * a.sin(), 0.0, 0.05],
                [-0.5 * s * a.sin(), 0.0, -0.05],
                [0.2 * s * (1.0 + a.cos()), 0.0, 0.0],
                [0.2 * s * (1.0 - a.cos()), 0.0, 0.0],
            ];
            for (j, (base, skill)) in swing.iter().zip(SKILL_POSE).enumerate() {
                f.set_joint(j, [base[0] + g * skill[0], base[1] + g * skill[1], base[2] + g * skill[2]]);
            }
            f
        })
        .collect();
    let meta = ClipMetadata { id: Some(id), skill: Some(SkillLabel::Expert), ..ClipMetadata::default() };
    Ok(MotionClip::new(spec.fps, 8, frames)?.with_metadata(meta))
}

/// Raised-cosine weight that is 1 at `center` and reaches 0 just outside
/// `width` frames.
pub fn corruption_window(t: usize, center: usize, width: usize) -> f64 {
    let half = (width / 2) as f64;
    let d = (t as f64 - center as f64).abs();
    if d > half {
        0.0
    } else {
        0.5 * (1.0 + (PI * d / (half + 1.0)).cos())
    }
}

/// Corrupts joint rotations inside the window around `peak`: part of the
/// skill pose is removed and a random offset is added.
pub fn corrupt(
    expert: &MotionClip<f64>,
    peak: usize,
    spec: &SyntheticTechniqueSpec,
    rng: &mut ChaCha8Rng,
) -> MotionClip<f64> {
    let a = spec.novice_amplitude;
    let offsets: Vec<f64> = (0..3 * expert.num_joints).map(|_| rng.random_range(-a..=a)).collect();
    let mut out = expert.clone();
    let missing = 1.0 - spec.novice_skill;
    for (t, frame) in out.frames.iter_mut().enumerate() {
        let w = corruption_window(t, peak, spec.novice_width);
        if w == 0.0 {
            continue;
        }
        let g = skill_curve(t as f64, peak);
        for j in 0..expert.num_joints {
            let mut v = frame.joint(j);
            for c in 0..3 {
                v[c] += w * (offsets[3 * j + c] - missing * g * SKILL_POSE[j][c]);
            }
            frame.set_joint(j, v);
        }
    }
    out
}

/// `out[t] = clip[t - shift]`, holding the first or last frame at the ends.
pub fn time_shift(clip: &MotionClip<f64>, shift: i64) -> MotionClip<f64> {
    let n = clip.len() as i64;
    let mut out = clip.clone();
    for t in 0..n {
        let src = (t - shift).clamp(0, n - 1);
        out.frames[t as usize] = clip.frames[src as usize].clone();
    }
    out
}

pub fn synth_generate(spec: &SyntheticTechniqueSpec, skeleton: &Skeleton<f64>, signal: &KinematicSignalSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    if skeleton.num_joints() != spec.num_joints {
        bail!("skeleton has {} joints, generator needs {}", skeleton.num_joints(), spec.num_joints);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut designed_peaks = Vec::with_capacity(spec.train_experts + spec.heldout_experts);
    let mut make = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<MotionClip<f64>>> {
        (0..n)
            .map(|i| {
                let p = sample_params(spec, rng);
                designed_peaks.push(p.takeoff);
                expert_clip(spec, &p, format!("{prefix}-{i:04}"))
            })
            .collect()
    };
    let train_experts = make("expert", spec.train_experts, &mut rng)?;
    let heldout_experts = make("reference", spec.heldout_experts, &mut rng)?;

    let mut novices = Vec::with_capacity(heldout_experts.len());
    let mut pairing = Vec::with_capacity(heldout_experts.len());
    let tj = spec.timing_jitter as i64;
    for (i, expert) in heldout_experts.iter().enumerate() {
        let peak = select_peak(&compute_signal(expert, skeleton, signal)?)?;
        let shift = rng.random_range(-tj..=tj);
        let mut novice = time_shift(&corrupt(expert, peak, spec, &mut rng), shift);
        let id = format!("novice-{i:04}");
        novice.metadata = ClipMetadata { id: Some(id.clone()), skill: Some(SkillLabel::Novice), ..ClipMetadata::default() };
        pairing.push(NoviceSource { novice_id: id, expert_index: i, expert_id: expert.id().to_string(), peak, shift });
        novices.push(novice);
    }
    Ok(SynthCorpus { train_experts, heldout_experts, novices, pairing, designed_peaks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use skilledit_core::SignalKind;

    fn small() -> SyntheticTechniqueSpec {
        SyntheticTechniqueSpec { train_experts: 60, heldout_experts: 20, seed: 4, ..SyntheticTechniqueSpec::default() }
    }

    fn signal() -> KinematicSignalSpec {
        KinematicSignalSpec::new(SignalKind::VerticalRootVelocity)
    }

    #[test]
    fn sizes_and_ids() {
        let c = synth_generate(&small(), &Skeleton::default_humanoid(), &signal()).unwrap();
        assert_eq!((c.train_experts.len(), c.heldout_experts.len(), c.novices.len()), (60, 20, 20));
        assert_eq!(c.designed_peaks.len(), 80);
        assert_eq!(c.novices[3].id(), "novice-0003");
        assert_eq!(c.pairing[3].expert_id, "reference-0003");
        assert!(c.train_experts.iter().all(|e| e.len() == 64 && e.num_joints == 8));
    }

    #[test]
    fn peaks_match_design() {
        let sk = Skeleton::default_humanoid();
        let c = synth_generate(&small(), &sk, &signal()).unwrap();
        let all: Vec<_> = c.train_experts.iter().chain(&c.heldout_experts).collect();
        let hits = all
            .iter()
            .zip(&c.designed_peaks)
            .filter(|(e, &d)| {
                let p = select_peak(&compute_signal(e, &sk, &signal()).unwrap()).unwrap();
                p.abs_diff(d) <= 2
            })
            .count();
        assert!(hits as f64 >= 0.95 * all.len() as f64, "{hits}/{}", all.len());
    }

    #[test]
    fn corruption_stays_in_window() {
        let spec = small();
        let sk = Skeleton::default_humanoid();
        let c = synth_generate(&spec, &sk, &signal()).unwrap();
        let e = &c.heldout_experts[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = corrupt(e, 30, &spec, &mut rng);
        for t in 0..e.len() {
            if t.abs_diff(30) > 4 {
                assert_eq!(n.frames[t], e.frames[t]);
            } else {
                assert_eq!(n.frames[t].root_translation, e.frames[t].root_translation);
                assert_ne!(n.frames[t].joint_rotations, e.frames[t].joint_rotations);
            }
        }
        // the shifted novice still moves its root exactly as the source does
        let src = &c.heldout_experts[c.pairing[5].expert_index];
        let shift = c.pairing[5].shift;
        for t in 5..59 {
            let s = (t as i64 - shift) as usize;
            assert_eq!(c.novices[5].frames[t].root_translation, src.frames[s].root_translation);
        }
    }

    #[test]
    fn window_shape() {
        assert_eq!(corruption_window(10, 10, 9), 1.0);
        assert_eq!(corruption_window(15, 10, 9), 0.0);
        assert!(corruption_window(14, 10, 9) > 0.0);
        assert_eq!(corruption_window(6, 10, 9), corruption_window(14, 10, 9));
    }

    #[test]
    fn deterministic() {
        let sk = Skeleton::default_humanoid();
        let a = synth_generate(&small(), &sk, &signal()).unwrap();
        let b = synth_generate(&small(), &sk, &signal()).unwrap();
        assert_eq!(a.novices, b.novices);
        assert_eq!(a.pairing, b.pairing);
    }
}
