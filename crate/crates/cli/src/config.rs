//! Run configuration: one JSON document holding every hyperparameter and seed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use skilledit_core::alignment::DtwFeatures;
use skilledit_core::metrics::Shrinkage;
use skilledit_core::{KinematicSignalSpec, Skeleton};
use skilledit_model::{ClassifierConfig, InfillerConfig, TokenizerConfig};

use crate::synth::SyntheticTechniqueSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub tokenizer: u64,
    pub infiller: u64,
    pub classifier: u64,
    pub edit: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

impl Seeds {
    /// Distinct per-stage seeds derived from one number.
    pub fn from_base(base: u64) -> Self {
        let s = |k: u64| base.wrapping_mul(1_000_003).wrapping_add(k);
        Self { tokenizer: s(23), infiller: s(37), classifier: s(41), edit: s(53) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub technique: String,
    /// Skeleton JSON file; the built-in 8-joint humanoid when absent.
    pub skeleton: Option<PathBuf>,
    pub signal: KinematicSignalSpec,
    /// Span fraction used at inference; training spans use `infiller.alpha_train`.
    pub alpha_infer: f64,
    /// Expected clip length in frames for this technique.
    pub clip_length: usize,
    pub tokenizer: TokenizerConfig,
    pub infiller: InfillerConfig,
    pub classifier: ClassifierConfig,
    /// Experts retrieved per novice.
    pub k: usize,
    /// Edits per novice.
    pub m: usize,
    pub temperature: f64,
    /// Blend decoded rotations in at span boundaries.
    pub crossfade: bool,
    pub dtw_features: DtwFeatures,
    pub shrinkage: Shrinkage,
    /// Share of the expert training clips the infiller sees.
    pub train_fraction: f64,
    /// Novices held back for evaluation; the rest train the classifier.
    pub eval_novices: usize,
    pub synth: SyntheticTechniqueSpec,
    pub seeds: Seeds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            technique: "jump".into(),
            skeleton: None,
            signal: KinematicSignalSpec::default(),
            alpha_infer: 0.15,
            clip_length: 64,
            tokenizer: TokenizerConfig::desk(),
            infiller: InfillerConfig::desk(),
            classifier: ClassifierConfig::default(),
            k: 3,
            m: 3,
            temperature: 1.0,
            crossfade: true,
            dtw_features: DtwFeatures::JointPositions,
            shrinkage: Shrinkage::Auto,
            train_fraction: 1.0,
            eval_novices: 120,
            synth: SyntheticTechniqueSpec::default(),
            seeds: Seeds::default(),
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file; relative skeleton paths resolve
    /// against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(sk) = &cfg.skeleton {
            if sk.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.skeleton = Some(base.join(sk));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.technique.is_empty() {
            bail!("technique name is empty");
        }
        if let Some(p) = &self.skeleton {
            if !p.is_file() {
                bail!("skeleton file {} does not exist", p.display());
            }
        }
        if !(self.alpha_infer > 0.0 && self.alpha_infer < 1.0) {
            bail!("alpha_infer must be in (0, 1), got {}", self.alpha_infer);
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            bail!("train_fraction must be in (0, 1], got {}", self.train_fraction);
        }
        if self.k == 0 || self.m == 0 {
            bail!("k and m must be at least 1");
        }
        if !(self.temperature > 0.0) {
            bail!("temperature must be positive");
        }
        if self.clip_length != self.synth.frames {
            bail!("clip_length {} differs from synth.frames {}", self.clip_length, self.synth.frames);
        }
        if self.eval_novices == 0 || self.eval_novices >= self.synth.heldout_experts {
            bail!(
                "eval_novices must leave at least one of the {} novices for the classifier",
                self.synth.heldout_experts
            );
        }
        if self.tokenizer.max_seq_len < self.clip_length || self.infiller.max_seq_len < self.clip_length {
            bail!("model max_seq_len is shorter than clip_length {}", self.clip_length);
        }
        self.signal.validate()?;
        self.synth.validate()?;
        self.tokenizer.validate()?;
        self.infiller.validate()?;
        Ok(())
    }

    /// Reseeds every stage, including the synthetic generator, from `base`.
    pub fn set_base_seed(&mut self, base: u64) {
        self.seeds = Seeds::from_base(base);
        self.synth.seed = base.wrapping_mul(1_000_003).wrapping_add(11);
    }

    pub fn load_skeleton(&self) -> Result<Skeleton<f64>> {
        match &self.skeleton {
            None => Ok(Skeleton::default_humanoid()),
            Some(p) => skilledit_core::io::read_skeleton(p).with_context(|| format!("reading skeleton {}", p.display())),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
