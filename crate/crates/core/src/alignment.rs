//! Evaluation-pair construction: operative-moment mining, clip extraction,
//! dynamic time warping, path-based resampling and chirality selection.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fk::forward_kinematics;
use crate::kinematics::{locate_span, KinematicSignalSpec, MaskSpan};
use crate::motion::{MotionClip, Skeleton};
use crate::scalar::{dist_sq, dot, norm_sq, Real};
use crate::transform::mirror_sagittal;

pub fn cosine_similarity<S: Real>(a: &[S], b: &[S]) -> Result<S> {
    if a.len() != b.len() {
        return Err(CoreError::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm_sq(a), norm_sq(b));
    if na == S::zero() || nb == S::zero() {
        return Err(CoreError::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let c = dot(a, b) / (na.sqrt() * nb.sqrt());
    Ok(c.max(-S::one()).min(S::one()))
}

/// Timestamped narration with a precomputed sentence embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrationRecord {
    pub t: f64,
    pub text: String,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionPolicy {
    pub operative_phrase_embeddings: Vec<Vec<f64>>,
    #[serde(default = "default_theta")]
    pub theta_sim: f64,
    pub delta_minus: usize,
    pub delta_plus: usize,
    #[serde(default = "default_buffer")]
    pub buffer: usize,
}

fn default_theta() -> f64 {
    0.5
}

fn default_buffer() -> usize {
    30
}

impl ExtractionPolicy {
    pub fn new(phrases: Vec<Vec<f64>>, delta_minus: usize, delta_plus: usize) -> Self {
        Self {
            operative_phrase_embeddings: phrases,
            theta_sim: default_theta(),
            delta_minus,
            delta_plus,
            buffer: default_buffer(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_sim > 0.0 && self.theta_sim < 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "theta_sim must be in (0, 1), got {}",
                self.theta_sim
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperativeMoment {
    pub timestamp: f64,
    pub score: f64,
    pub narration_index: usize,
}

/// Narrations whose best phrase similarity reaches `theta_sim`.
pub fn find_operative_moments(
    narrations: &[NarrationRecord],
    policy: &ExtractionPolicy,
) -> Result<Vec<OperativeMoment>> {
    policy.validate()?;
    if narrations.is_empty() {
        return Err(CoreError::InvalidArgument("no narrations".into()));
    }
    let mut out = Vec::new();
    for (i, n) in narrations.iter().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for phrase in &policy.operative_phrase_embeddings {
            best = best.max(cosine_similarity(phrase, &n.embedding)?);
        }
        if best >= policy.theta_sim {
            out.push(OperativeMoment {
                timestamp: n.t,
                score: best,
                narration_index: i,
            });
        }
    }
    Ok(out)
}

/// Cuts `[t* - δ⁻, t* + δ⁺]` (widened by the buffer on both sides when requested).
pub fn extract_clip<S: Real>(
    full: &MotionClip<S>,
    center: usize,
    policy: &ExtractionPolicy,
    with_buffer: bool,
) -> Result<MotionClip<S>> {
    if center >= full.len() {
        return Err(CoreError::InvalidArgument(format!(
            "operative frame {center} outside recording of {} frames",
            full.len()
        )));
    }
    let pad = if with_buffer { policy.buffer } else { 0 };
    let start = center as i64 - (policy.delta_minus + pad) as i64;
    let end = (center + policy.delta_plus + pad) as i64;
    let len = full.len();
    if start < 0 || end >= len as i64 {
        return Err(CoreError::OutOfRange {
            start,
            end,
            len,
            deficit_before: (-start).max(0) as usize,
            deficit_after: (end - (len as i64 - 1)).max(0) as usize,
        });
    }
    let mut out = full.clone();
    out.frames = full.frames[start as usize..=end as usize].to_vec();
    out.validate()?;
    Ok(out)
}

/// Converts a timestamp in seconds to the nearest frame index.
pub fn timestamp_to_frame<S: Real>(clip: &MotionClip<S>, seconds: f64) -> usize {
    (seconds * clip.fps.to_f64_lossless()).round().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtwAlignment<S> {
    pub path: Vec<(usize, usize)>,
    pub cost: S,
}

/// Minimum-cost monotone alignment with steps (1,0), (0,1), (1,1) and
/// squared-euclidean frame cost.
///
/// Backtracking prefers the diagonal, then a step in `a`, then a step in `b`.
pub fn dtw_align<S: Real>(a: &[Vec<S>], b: &[Vec<S>]) -> Result<DtwAlignment<S>> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(CoreError::InvalidArgument("dtw needs non-empty sequences".into()));
    }
    let mut acc = vec![S::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = dist_sq(&a[i], &b[j]);
            let prev = match (i, j) {
                (0, 0) => S::zero(),
                (0, _) => acc[j - 1],
                (_, 0) => acc[(i - 1) * m],
                _ => acc[(i - 1) * m + j - 1]
                    .min(acc[(i - 1) * m + j])
                    .min(acc[i * m + j - 1]),
            };
            acc[i * m + j] = prev + c;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        (i, j) = match (i, j) {
            (0, _) => (0, j - 1),
            (_, 0) => (i - 1, 0),
            _ => {
                let diag = acc[(i - 1) * m + j - 1];
                let up = acc[(i - 1) * m + j];
                let left = acc[i * m + j - 1];
                if diag <= up && diag <= left {
                    (i - 1, j - 1)
                } else if up <= left {
                    (i - 1, j)
                } else {
                    (i, j - 1)
                }
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwAlignment {
        path,
        cost: acc[n * m - 1],
    })
}

/// Sum of frame costs along a path.
pub fn path_cost<S: Real>(a: &[Vec<S>], b: &[Vec<S>], path: &[(usize, usize)]) -> S {
    path.iter().map(|&(i, j)| dist_sq(&a[i], &b[j])).sum()
}

pub fn validate_path(path: &[(usize, usize)], n: usize, m: usize) -> Result<()> {
    if path.first() != Some(&(0, 0)) || path.last() != Some(&(n.wrapping_sub(1), m.wrapping_sub(1))) {
        return Err(CoreError::InvalidPath(format!(
            "path must run from (0, 0) to ({}, {})",
            n as i64 - 1,
            m as i64 - 1
        )));
    }
    for w in path.windows(2) {
        let (di, dj) = (w[1].0 as i64 - w[0].0 as i64, w[1].1 as i64 - w[0].1 as i64);
        if !matches!((di, dj), (1, 0) | (0, 1) | (1, 1)) {
            return Err(CoreError::InvalidPath(format!("illegal step {:?} -> {:?}", w[0], w[1])));
        }
    }
    Ok(())
}

/// For each novice frame, picks the (lower) median expert frame matched to it.
pub fn resample_by_path<S: Real>(
    expert: &MotionClip<S>,
    path: &[(usize, usize)],
    novice_len: usize,
) -> Result<MotionClip<S>> {
    validate_path(path, novice_len, expert.len())?;
    let mut matched: Vec<Vec<usize>> = vec![Vec::new(); novice_len];
    for &(i, j) in path {
        matched[i].push(j);
    }
    let mut out = expert.clone();
    out.frames = matched
        .iter()
        .map(|js| {
            // steps are monotone, so js is already sorted
            expert.frames[js[(js.len() - 1) / 2]].clone()
        })
        .collect();
    out.validate()?;
    Ok(out)
}

/// Frame representation compared by DTW.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DtwFeatures {
    /// Forward-kinematics joint positions.
    #[default]
    JointPositions,
    /// Raw joint-rotation parameters.
    PoseParameters,
}

pub fn dtw_rows<S: Real>(clip: &MotionClip<S>, skeleton: &Skeleton<S>, mode: DtwFeatures) -> Result<Vec<Vec<S>>> {
    match mode {
        DtwFeatures::JointPositions => Ok(forward_kinematics(clip, skeleton)?.rows()),
        DtwFeatures::PoseParameters => Ok(clip.frames.iter().map(|f| f.joint_rotations.clone()).collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChiralAlignment<S> {
    pub aligned: MotionClip<S>,
    pub mirrored: bool,
    pub cost: S,
    /// Cost of the variant that was not chosen.
    pub other_cost: S,
}

/// Aligns both the expert and its mirror image and keeps the cheaper one
/// (the unmirrored expert on ties).
pub fn align_with_chirality<S: Real>(
    novice: &MotionClip<S>,
    expert: &MotionClip<S>,
    skeleton: &Skeleton<S>,
    mode: DtwFeatures,
) -> Result<ChiralAlignment<S>> {
    if novice.num_joints != expert.num_joints {
        return Err(CoreError::Shape("novice and expert joint counts differ".into()));
    }
    let nov = dtw_rows(novice, skeleton, mode)?;
    let mirrored_clip = mirror_sagittal(expert, skeleton)?;
    let plain = dtw_align(&nov, &dtw_rows(expert, skeleton, mode)?)?;
    let flipped = dtw_align(&nov, &dtw_rows(&mirrored_clip, skeleton, mode)?)?;
    let (chosen, source, mirrored, other) = if flipped.cost < plain.cost {
        (flipped, &mirrored_clip, true, plain.cost)
    } else {
        (plain, expert, false, flipped.cost)
    };
    Ok(ChiralAlignment {
        aligned: resample_by_path(source, &chosen.path, novice.len())?,
        mirrored,
        cost: chosen.cost,
        other_cost: other,
    })
}

/// One novice with `k` time-aligned expert references and a shared span.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair<S> {
    pub novice: MotionClip<S>,
    pub novice_index: usize,
    pub experts: Vec<MotionClip<S>>,
    pub expert_indices: Vec<usize>,
    pub mirrored: Vec<bool>,
    pub span: MaskSpan,
    /// Descending; negated DTW cost when ranking by motion.
    pub similarity_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingOptions {
    pub k: usize,
    pub alpha: f64,
    #[serde(default)]
    pub dtw_features: DtwFeatures,
}

impl Default for PairingOptions {
    fn default() -> Self {
        Self {
            k: 3,
            alpha: 0.15,
            dtw_features: DtwFeatures::JointPositions,
        }
    }
}

fn all_have_embeddings<S>(clips: &[MotionClip<S>]) -> bool {
    clips.iter().all(|c| c.metadata.narration_embedding.is_some())
}

/// Retrieves, aligns and spans the top-`k` experts for every novice.
///
/// Experts are ranked by narration-embedding cosine similarity when every clip
/// carries an embedding, otherwise by chirality-aware DTW cost.
pub fn build_eval_pairs<S: Real>(
    novices: &[MotionClip<S>],
    experts: &[MotionClip<S>],
    skeleton: &Skeleton<S>,
    signal: &KinematicSignalSpec,
    options: &PairingOptions,
) -> Result<Vec<EvalPair<S>>> {
    if experts.is_empty() {
        return Err(CoreError::InvalidArgument("expert corpus is empty".into()));
    }
    if options.k == 0 {
        return Err(CoreError::InvalidArgument("k must be at least 1".into()));
    }
    let k = if experts.len() < options.k {
        log::warn!(
            "only {} expert clips available, using k = {} instead of {}",
            experts.len(),
            experts.len(),
            options.k
        );
        experts.len()
    } else {
        options.k
    };
    let use_text = all_have_embeddings(novices) && all_have_embeddings(experts);
    let expert_rows: Vec<(Vec<Vec<S>>, Vec<Vec<S>>)> = if use_text {
        Vec::new()
    } else {
        experts
            .iter()
            .map(|e| {
                Ok((
                    dtw_rows(e, skeleton, options.dtw_features)?,
                    dtw_rows(&mirror_sagittal(e, skeleton)?, skeleton, options.dtw_features)?,
                ))
            })
            .collect::<Result<_>>()?
    };

    let mut pairs = Vec::with_capacity(novices.len());
    for (ni, novice) in novices.iter().enumerate() {
        if novice.num_joints != skeleton.num_joints() {
            return Err(CoreError::Shape(format!("novice {ni} does not match the skeleton")));
        }
        let mut scored: Vec<(usize, f64)> = if use_text {
            let ne = novice.metadata.narration_embedding.as_ref().expect("checked above");
            experts
                .iter()
                .enumerate()
                .map(|(ei, e)| {
                    let ee = e.metadata.narration_embedding.as_ref().expect("checked above");
                    Ok((ei, cosine_similarity(ne, ee)?))
                })
                .collect::<Result<_>>()?
        } else {
            let nov = dtw_rows(novice, skeleton, options.dtw_features)?;
            expert_rows
                .iter()
                .enumerate()
                .map(|(ei, (plain, flipped))| {
                    let c = dtw_align(&nov, plain)?.cost.min(dtw_align(&nov, flipped)?.cost);
                    Ok((ei, -c.to_f64_lossless()))
                })
                .collect::<Result<_>>()?
        };
        // stable sort keeps lower expert index first on equal scores
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        scored.truncate(k);

        let span = locate_span(novice, skeleton, signal, options.alpha)?;
        let mut pair = EvalPair {
            novice: novice.clone(),
            novice_index: ni,
            experts: Vec::with_capacity(k),
            expert_indices: Vec::with_capacity(k),
            mirrored: Vec::with_capacity(k),
            span,
            similarity_scores: Vec::with_capacity(k),
        };
        for (ei, score) in scored {
            let aligned = align_with_chirality(novice, &experts[ei], skeleton, options.dtw_features)?;
            pair.experts.push(aligned.aligned);
            pair.expert_indices.push(ei);
            pair.mirrored.push(aligned.mirrored);
            pair.similarity_scores.push(score);
        }
        pairs.push(pair);
    }
    Ok(pairs)
}
