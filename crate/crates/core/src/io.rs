//! JSON clip and skeleton files.
//!
//! Clip file:
//! `{"fps": f, "num_joints": J, "up_axis": "y", "metadata": {...}, "frames": [[6 + 3J numbers], ...]}`
//!
//! Skeleton file:
//! `{"parents": [-1, 0, ...], "offsets": [[x, y, z], ...], "mirror_pairs": [[l, r], ...]}`

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::motion::{Axis, ClipMetadata, MotionClip, PoseFrame, Skeleton};
use crate::scalar::Real;

#[derive(Deserialize)]
struct ClipFileIn {
    fps: Option<f64>,
    num_joints: Option<usize>,
    up_axis: Option<Axis>,
    #[serde(default)]
    metadata: ClipMetadata,
    frames: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct ClipFileOut<'a> {
    fps: f64,
    num_joints: usize,
    up_axis: Axis,
    metadata: &'a ClipMetadata,
    frames: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    parents: Vec<i64>,
    offsets: Vec<[f64; 3]>,
    #[serde(default)]
    mirror_pairs: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    up_axis: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    names: Option<Vec<String>>,
}

fn parse_err(path: &Path, context: impl Into<String>) -> CoreError {
    CoreError::Parse {
        path: path.to_path_buf(),
        context: context.into(),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses clip JSON text. `origin` is only used in error messages.
pub fn parse_clip<S: Real>(text: &str, origin: &Path) -> Result<MotionClip<S>> {
    let raw: ClipFileIn = serde_json::from_str(text).map_err(|e| {
        parse_err(origin, format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    let fps = raw.fps.ok_or_else(|| parse_err(origin, "missing field `fps`"))?;
    let num_joints = raw
        .num_joints
        .ok_or_else(|| parse_err(origin, "missing field `num_joints`"))?;
    let rows = raw.frames.ok_or_else(|| parse_err(origin, "missing field `frames`"))?;
    let width = 6 + 3 * num_joints;
    let mut frames = Vec::with_capacity(rows.len());
    for (t, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(parse_err(
                origin,
                format!("frame {t} has {} values, expected {width}", row.len()),
            ));
        }
        let vals: Vec<S> = row.iter().map(|&x| S::of(x)).collect();
        frames.push(PoseFrame::from_features(&vals)?);
    }
    let clip = MotionClip {
        fps: S::of(fps),
        num_joints,
        up_axis: raw.up_axis.unwrap_or_default(),
        metadata: raw.metadata,
        frames,
    };
    clip.validate()?;
    Ok(clip)
}

pub fn clip_to_json<S: Real>(clip: &MotionClip<S>) -> Result<String> {
    clip.validate()?;
    let out = ClipFileOut {
        fps: clip.fps.to_f64_lossless(),
        num_joints: clip.num_joints,
        up_axis: clip.up_axis,
        metadata: &clip.metadata,
        frames: clip
            .frames
            .iter()
            .map(|f| {
                f.root_translation
                    .iter()
                    .chain(&f.root_orientation)
                    .chain(&f.joint_rotations)
                    .map(|x| x.to_f64_lossless())
                    .collect()
            })
            .collect(),
    };
    serde_json::to_string(&out).map_err(|e| CoreError::Validation(e.to_string()))
}

pub fn read_clip<S: Real>(path: impl AsRef<Path>) -> Result<MotionClip<S>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_clip(&text, path)
}

pub fn write_clip<S: Real>(clip: &MotionClip<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = clip_to_json(clip)?;
    fs::write(path, text).map_err(io_err(path))
}

pub fn parse_skeleton<S: Real>(text: &str, origin: &Path) -> Result<Skeleton<S>> {
    let raw: SkeletonFile = serde_json::from_str(text).map_err(|e| {
        parse_err(origin, format!("line {}, column {}: {e}", e.line(), e.column()))
    })?;
    let n = raw.parents.len();
    let parents = raw
        .parents
        .iter()
        .enumerate()
        .map(|(j, &p)| match p {
            p if p < 0 => Ok(None),
            p if (p as usize) < n => Ok(Some(p as usize)),
            p => Err(parse_err(origin, format!("parents[{j}] = {p} is out of range"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = raw.offsets.iter().map(|o| o.map(S::of)).collect();
    let pairs = raw.mirror_pairs.iter().map(|p| (p[0], p[1])).collect();
    let skeleton = Skeleton::new(parents, offsets, pairs, raw.up_axis.unwrap_or_default())?;
    match raw.names {
        Some(names) => skeleton.with_names(names),
        None => Ok(skeleton),
    }
}

pub fn skeleton_to_json<S: Real>(skeleton: &Skeleton<S>) -> Result<String> {
    let raw = SkeletonFile {
        parents: skeleton
            .parents
            .iter()
            .map(|p| p.map_or(-1, |p| p as i64))
            .collect(),
        offsets: skeleton.offsets.iter().map(|o| o.map(|x| x.to_f64_lossless())).collect(),
        mirror_pairs: skeleton.mirror_pairs.iter().map(|&(l, r)| [l, r]).collect(),
        up_axis: Some(skeleton.up_axis),
        names: Some(skeleton.names.clone()),
    };
    serde_json::to_string_pretty(&raw).map_err(|e| CoreError::Validation(e.to_string()))
}

pub fn read_skeleton<S: Real>(path: impl AsRef<Path>) -> Result<Skeleton<S>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_skeleton(&text, path)
}

pub fn write_skeleton<S: Real>(skeleton: &Skeleton<S>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, skeleton_to_json(skeleton)?).map_err(io_err(path))
}
