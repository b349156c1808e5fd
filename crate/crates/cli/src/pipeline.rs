//! Pipeline stages. Each stage reads its inputs from and writes its outputs
//! to a run directory, so stages can run one at a time or all together.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use skilledit_core::alignment::{build_eval_pairs, PairingOptions};
use skilledit_core::io::{clip_to_json, parse_clip};
use skilledit_core::kinematics::{compute_signal, locate_span, select_peak};
use skilledit_core::metrics::{fid_improvement, improvement_percent, pose_improvement, FidImprovement};
use skilledit_core::{MaskSpan, MotionClip, Skeleton};
use skilledit_model::{
    edit_motion, Classifier, ClassifierReport, EditOptions, Infiller, InfillerEpoch, SpannedClip,
    TokenSequence, Tokenizer,
};

use crate::config::RunConfig;
use crate::synth::synth_generate;

/// Files of one run. Shared artifacts (data, tokenizer, pairs, classifier)
/// live under `root`; per-variant ones (infiller, edits, metrics) under
/// `variant`, which equals `root` outside of sweeps.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub variant: PathBuf,
}

pub const EXPERTS: &str = "data/experts.jsonl";
pub const REFERENCES: &str = "data/references.jsonl";
pub const NOVICES: &str = "data/novices.jsonl";
pub const PAIRING: &str = "data/pairing.json";
pub const TOKENIZER: &str = "checkpoints/tokenizer.xedt";
pub const TOKENIZER_LOG: &str = "logs/tokenizer.json";
pub const EXPERT_TOKENS: &str = "tokens/experts.jsonl";
pub const INFILLER: &str = "checkpoints/infiller.xedt";
pub const INFILLER_LOG: &str = "logs/infiller.json";
pub const PAIRS: &str = "pairs.json";
pub const ALIGNED: &str = "pairs/aligned.jsonl";
pub const CLASSIFIER: &str = "checkpoints/classifier.xedt";
pub const CLASSIFIER_LOG: &str = "logs/classifier.json";
pub const EDITS: &str = "edits";
pub const METRICS: &str = "metrics.json";
pub const EVAL_LOG: &str = "logs/eval.json";
pub const CONFIG: &str = "config.json";

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        let root = root.into();
        Self { variant: root.clone(), root }
    }

    pub fn with_variant(&self, name: &str) -> Self {
        Self { root: self.root.clone(), variant: self.root.join(name) }
    }

    pub fn shared(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn own(&self, rel: &str) -> PathBuf {
        self.variant.join(rel)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_clips(path: &Path, clips: &[MotionClip<f64>]) -> Result<()> {
    ensure_parent(path)?;
    let mut text = String::new();
    for c in clips {
        text.push_str(&clip_to_json(c)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_clips(path: &Path) -> Result<Vec<MotionClip<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_clip(l, path).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).with_context(|| format!("parsing {}", path.display())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillerLog {
    pub train_clips: usize,
    pub epochs: Vec<InfillerEpoch>,
    /// Greedy top-1 accuracy per book on held-out reference experts.
    pub heldout_accuracy: Vec<f64>,
    pub chance: f64,
}

/// One novice and its retrieved experts, as written to `pairs.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub clip_id: String,
    pub novice_index: usize,
    pub expert_ids: Vec<String>,
    pub mirrored: Vec<bool>,
    pub similarity: Vec<f64>,
    pub span: MaskSpan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSidecar {
    pub t_star: usize,
    pub lo: usize,
    pub hi: usize,
    pub alpha: f64,
    pub mode: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub clip_id: String,
    pub err_novice: f64,
    pub err_gen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub technique: String,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "F")]
    pub f: f64,
    pub per_pair: Vec<PairMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub pairs: usize,
    pub mean_err_novice: f64,
    pub mean_err_gen: f64,
    pub fid: FidImprovement,
    pub novice_features: usize,
    pub edited_features: usize,
    pub expert_features: usize,
}

pub fn edit_path(dir: &RunDir, clip_id: &str, i: usize) -> PathBuf {
    dir.own(EDITS).join(clip_id).join(format!("edit-{i}.json"))
}

pub fn sidecar_path(dir: &RunDir, clip_id: &str, i: usize) -> PathBuf {
    dir.own(EDITS).join(clip_id).join(format!("edit-{i}.meta.json"))
}

fn timed<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    info!("stage {name}: start");
    let out = f().with_context(|| format!("stage {name}"))?;
    info!("stage {name}: done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(out)
}

fn eval_novices(cfg: &RunConfig, novices: Vec<MotionClip<f64>>) -> Vec<MotionClip<f64>> {
    novices.into_iter().take(cfg.eval_novices).collect()
}

pub fn stage_synth(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    timed("synth", || {
        let sk = cfg.load_skeleton()?;
        let corpus = synth_generate(&cfg.synth, &sk, &cfg.signal)?;
        write_clips(&dir.shared(EXPERTS), &corpus.train_experts)?;
        write_clips(&dir.shared(REFERENCES), &corpus.heldout_experts)?;
        write_clips(&dir.shared(NOVICES), &corpus.novices)?;
        write_json(&dir.shared(PAIRING), &corpus.pairing)?;
        info!(
            "synth: {} experts, {} references, {} novices",
            corpus.train_experts.len(),
            corpus.heldout_experts.len(),
            corpus.novices.len()
        );
        Ok(())
    })
}

pub fn stage_train_tokenizer(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    timed("train-tokenizer", || {
        let experts = read_clips(&dir.shared(EXPERTS))?;
        check_lengths(cfg, &experts)?;
        let (tok, log) = Tokenizer::train(&experts, &cfg.tokenizer, &cfg.technique, cfg.seeds.tokenizer)?;
        ensure_parent(&dir.shared(TOKENIZER))?;
        tok.save(dir.shared(TOKENIZER))?;
        write_json(&dir.shared(TOKENIZER_LOG), &log)?;
        let seqs = experts.iter().map(|c| tok.tokenize(c)).collect::<skilledit_model::Result<Vec<_>>>()?;
        write_lines(&dir.shared(EXPERT_TOKENS), &seqs)?;
        Ok(())
    })
}

fn check_lengths(cfg: &RunConfig, clips: &[MotionClip<f64>]) -> Result<()> {
    if let Some(c) = clips.iter().find(|c| c.len() != cfg.clip_length) {
        bail!("clip {} has {} frames, config expects {}", c.id(), c.len(), cfg.clip_length);
    }
    Ok(())
}

/// Number of training clips used at `fraction`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

pub fn stage_train_infiller(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    timed("train-infiller", || {
        let sk = cfg.load_skeleton()?;
        let experts = read_clips(&dir.shared(EXPERTS))?;
        let seqs: Vec<TokenSequence> = read_lines(&dir.shared(EXPERT_TOKENS))?;
        if seqs.len() != experts.len() {
            bail!("{} token sequences for {} expert clips", seqs.len(), experts.len());
        }
        let n = fraction_count(cfg.train_fraction, experts.len());
        let peaks = experts[..n]
            .iter()
            .map(|c| Ok(select_peak(&compute_signal(c, &sk, &cfg.signal)?)?))
            .collect::<Result<Vec<_>>>()?;
        let tok = Tokenizer::load(dir.shared(TOKENIZER))?;
        let (inf, epochs) = Infiller::train(
            &seqs[..n],
            &peaks,
            tok.config.num_books,
            tok.config.codes_per_book,
            &cfg.infiller,
            &cfg.technique,
            cfg.seeds.infiller,
        )?;
        ensure_parent(&dir.own(INFILLER))?;
        inf.save(dir.own(INFILLER))?;

        let refs = read_clips(&dir.shared(REFERENCES))?;
        let ref_seqs = refs.iter().map(|c| tok.tokenize(c)).collect::<skilledit_model::Result<Vec<_>>>()?;
        let spans = refs
            .iter()
            .map(|c| Ok(locate_span(c, &sk, &cfg.signal, cfg.alpha_infer)?))
            .collect::<Result<Vec<_>>>()?;
        let heldout_accuracy = inf.masked_accuracy(&ref_seqs, &spans)?;
        let chance = 1.0 / tok.config.codes_per_book as f64;
        info!("infiller held-out accuracy {heldout_accuracy:?} (chance {chance:.4}) from {n} clips");
        write_json(&dir.own(INFILLER_LOG), &InfillerLog { train_clips: n, epochs, heldout_accuracy, chance })?;
        Ok(())
    })
}

pub fn stage_pair(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    timed("pair", || {
        let sk = cfg.load_skeleton()?;
        let novices = eval_novices(cfg, read_clips(&dir.shared(NOVICES))?);
        let refs = read_clips(&dir.shared(REFERENCES))?;
        let options = PairingOptions { k: cfg.k, alpha: cfg.alpha_infer, dtw_features: cfg.dtw_features };
        let pairs = build_eval_pairs(&novices, &refs, &sk, &cfg.signal, &options)?;
        let records: Vec<PairRecord> = pairs
            .iter()
            .map(|p| PairRecord {
                clip_id: p.novice.id().to_string(),
                novice_index: p.novice_index,
                expert_ids: p.expert_indices.iter().map(|&i| refs[i].id().to_string()).collect(),
                mirrored: p.mirrored.clone(),
                similarity: p.similarity_scores.clone(),
                span: p.span,
            })
            .collect();
        let aligned: Vec<MotionClip<f64>> = pairs.iter().flat_map(|p| p.experts.iter().cloned()).collect();
        write_json(&dir.shared(PAIRS), &records)?;
        write_clips(&dir.shared(ALIGNED), &aligned)?;
        Ok(())
    })
}

struct LoadedPairs {
    records: Vec<PairRecord>,
    novices: Vec<MotionClip<f64>>,
    /// `aligned[i]` holds the k experts of pair `i`.
    aligned: Vec<Vec<MotionClip<f64>>>,
}

fn load_pairs(cfg: &RunConfig, dir: &RunDir) -> Result<LoadedPairs> {
    let records: Vec<PairRecord> = read_json(&dir.shared(PAIRS))?;
    let novices = eval_novices(cfg, read_clips(&dir.shared(NOVICES))?);
    let flat = read_clips(&dir.shared(ALIGNED))?;
    let mut aligned = Vec::with_capacity(records.len());
    let mut at = 0;
    for r in &records {
        let k = r.expert_ids.len();
        if at + k > flat.len() {
            bail!("{} holds fewer aligned experts than {} lists", ALIGNED, PAIRS);
        }
        aligned.push(flat[at..at + k].to_vec());
        at += k;
    }
    let novices = records
        .iter()
        .map(|r| {
            novices
                .get(r.novice_index)
                .filter(|n| n.id() == r.clip_id)
                .cloned()
                .with_context(|| format!("novice {} not found", r.clip_id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedPairs { records, novices, aligned })
}

pub fn stage_edit(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    timed("edit", || {
        let sk = cfg.load_skeleton()?;
        let tok = Tokenizer::load(dir.shared(TOKENIZER))?;
        let inf = Infiller::load(dir.own(INFILLER))?;
        let pairs = load_pairs(cfg, dir)?;
        for (rec, novice) in pairs.records.iter().zip(&pairs.novices) {
            let options = EditOptions {
                signal: cfg.signal.clone(),
                alpha: cfg.alpha_infer,
                m: cfg.m,
                temperature: cfg.temperature,
                seed: cfg.seeds.edit.wrapping_add(1000 * rec.novice_index as u64),
                crossfade: cfg.crossfade,
            };
            let res = edit_motion(novice, &tok, &inf, &sk, &options)?;
            if res.span != rec.span {
                bail!("edit span for {} differs from the pairing span", rec.clip_id);
            }
            for (i, clip) in res.clips.iter().enumerate() {
                let mut clip = clip.clone();
                clip.metadata.id = Some(format!("{}-edit-{i}", rec.clip_id));
                clip.metadata.skill = None;
                let path = edit_path(dir, &rec.clip_id, i);
                write_clips(&path, std::slice::from_ref(&clip))?;
                let sidecar = EditSidecar {
                    t_star: res.span.center,
                    lo: res.span.lo,
                    hi: res.span.hi,
                    alpha: cfg.alpha_infer,
                    mode: res.modes[i].label().to_string(),
                    seed: res.seeds[i],
                };
                write_json(&sidecar_path(dir, &rec.clip_id, i), &sidecar)?;
            }
        }
        info!("edited {} novices, {} edits each", pairs.records.len(), cfg.m);
        Ok(())
    })
}

fn spanned<'a>(clips: &'a [MotionClip<f64>], sk: &Skeleton<f64>, cfg: &RunConfig) -> Result<Vec<SpannedClip<'a>>> {
    clips
        .iter()
        .map(|clip| Ok(SpannedClip { clip, span: locate_span(clip, sk, &cfg.signal, cfg.alpha_infer)? }))
        .collect()
}

pub fn stage_train_classifier(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    timed("train-classifier", || {
        let sk = cfg.load_skeleton()?;
        let experts = read_clips(&dir.shared(EXPERTS))?;
        let novices: Vec<_> = read_clips(&dir.shared(NOVICES))?.into_iter().skip(cfg.eval_novices).collect();
        let (model, report): (Classifier, ClassifierReport) = Classifier::train(
            &spanned(&experts, &sk, cfg)?,
            &spanned(&novices, &sk, cfg)?,
            &cfg.classifier,
            &cfg.technique,
            cfg.seeds.classifier,
        )?;
        ensure_parent(&dir.shared(CLASSIFIER))?;
        model.save(dir.shared(CLASSIFIER))?;
        write_json(&dir.shared(CLASSIFIER_LOG), &report)?;
        Ok(())
    })
}

pub fn read_edits(cfg: &RunConfig, dir: &RunDir, clip_id: &str) -> Result<Vec<MotionClip<f64>>> {
    (0..cfg.m)
        .map(|i| {
            let mut v = read_clips(&edit_path(dir, clip_id, i))?;
            v.pop().with_context(|| format!("empty edit file for {clip_id}"))
        })
        .collect()
}

pub fn stage_eval(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsReport> {
    timed("eval", || {
        let sk = cfg.load_skeleton()?;
        let pairs = load_pairs(cfg, dir)?;
        let classifier = Classifier::load(dir.shared(CLASSIFIER))?;
        if classifier.technique != cfg.technique {
            bail!("classifier was trained for {:?}, run is {:?}", classifier.technique, cfg.technique);
        }
        let mut per_pair = Vec::with_capacity(pairs.records.len());
        let mut greedy = Vec::with_capacity(pairs.records.len());
        for ((rec, novice), experts) in pairs.records.iter().zip(&pairs.novices).zip(&pairs.aligned) {
            let edits = read_edits(cfg, dir, &rec.clip_id)?;
            let pi = pose_improvement(novice, &edits, experts, &sk, &rec.span)?;
            per_pair.push(PairMetrics { clip_id: rec.clip_id.clone(), err_novice: pi.err_novice, err_gen: pi.err_gen });
            greedy.push(edits.into_iter().next().expect("m >= 1"));
        }
        let n = per_pair.len() as f64;
        let mean_err_novice = per_pair.iter().map(|p| p.err_novice).sum::<f64>() / n;
        let mean_err_gen = per_pair.iter().map(|p| p.err_gen).sum::<f64>() / n;
        let p = improvement_percent(mean_err_novice, mean_err_gen)?;

        let novice_items: Vec<SpannedClip<'_>> =
            pairs.novices.iter().zip(&pairs.records).map(|(clip, r)| SpannedClip { clip, span: r.span }).collect();
        let edited_items: Vec<SpannedClip<'_>> =
            greedy.iter().zip(&pairs.records).map(|(clip, r)| SpannedClip { clip, span: r.span }).collect();
        let expert_items: Vec<SpannedClip<'_>> = pairs
            .aligned
            .iter()
            .zip(&pairs.records)
            .flat_map(|(es, r)| es.iter().map(move |clip| SpannedClip { clip, span: r.span }))
            .collect();
        let fid = fid_improvement(
            &classifier.features(&novice_items)?,
            &classifier.features(&edited_items)?,
            &classifier.features(&expert_items)?,
            cfg.shrinkage,
        )?;
        let report = MetricsReport { technique: cfg.technique.clone(), p, f: fid.f_percent, per_pair };
        write_json(&dir.own(METRICS), &report)?;
        write_json(
            &dir.own(EVAL_LOG),
            &EvalLog {
                pairs: report.per_pair.len(),
                mean_err_novice,
                mean_err_gen,
                fid,
                novice_features: novice_items.len(),
                edited_features: edited_items.len(),
                expert_features: expert_items.len(),
            },
        )?;
        info!("P = {:.2}%, F = {:.2}% over {} pairs", report.p, report.f, report.per_pair.len());
        Ok(report)
    })
}

fn write_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, cfg.to_json() + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Every stage in order.
pub fn run_pipeline(cfg: &RunConfig, dir: &RunDir) -> Result<MetricsReport> {
    cfg.validate().context("stage config")?;
    write_config(cfg, &dir.own(CONFIG))?;
    stage_synth(cfg, dir)?;
    stage_train_tokenizer(cfg, dir)?;
    stage_train_infiller(cfg, dir)?;
    stage_pair(cfg, dir)?;
    stage_edit(cfg, dir)?;
    stage_train_classifier(cfg, dir)?;
    stage_eval(cfg, dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub fraction: f64,
    pub directory: String,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "F")]
    pub f: f64,
}

pub fn variant_name(fraction: f64) -> String {
    format!("fraction-{fraction:.2}")
}

/// Shared stages once, then one infiller, edit set and report per fraction.
pub fn run_sweep(cfg: &RunConfig, dir: &RunDir, fractions: &[f64]) -> Result<Vec<SweepEntry>> {
    if fractions.is_empty() {
        bail!("stage sweep: no fractions given");
    }
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            bail!("stage sweep: fraction {f} is outside (0, 1]");
        }
    }
    cfg.validate().context("stage config")?;
    write_config(cfg, &dir.shared(CONFIG))?;
    stage_synth(cfg, dir)?;
    stage_train_tokenizer(cfg, dir)?;
    stage_pair(cfg, dir)?;
    stage_train_classifier(cfg, dir)?;
    let mut entries = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let name = variant_name(fraction);
        let sub = dir.with_variant(&name);
        let vcfg = RunConfig { train_fraction: fraction, ..cfg.clone() };
        write_config(&vcfg, &sub.own(CONFIG))?;
        stage_train_infiller(&vcfg, &sub)?;
        stage_edit(&vcfg, &sub)?;
        let report = stage_eval(&vcfg, &sub)?;
        entries.push(SweepEntry { fraction, directory: name, p: report.p, f: report.f });
    }
    let mut sorted = entries.clone();
    sorted.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
    for w in sorted.windows(2) {
        if w[1].p < w[0].p || w[1].f < w[0].f {
            warn!(
                "sweep: metrics drop from fraction {} (P {:.2}, F {:.2}) to {} (P {:.2}, F {:.2})",
                w[0].fraction, w[0].p, w[0].f, w[1].fraction, w[1].p, w[1].f
            );
        }
    }
    write_json(&dir.shared("sweep.json"), &entries)?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::NoviceSource;

    #[test]
    fn fraction_counts() {
        assert_eq!(fraction_count(1.0, 512), 512);
        assert_eq!(fraction_count(0.3, 512), 154);
        assert_eq!(fraction_count(0.001, 10), 1);
        assert_eq!(variant_name(0.3), "fraction-0.30");
    }

    #[test]
    fn clip_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::synth::SyntheticTechniqueSpec { train_experts: 3, heldout_experts: 2, ..Default::default() };
        let c = synth_generate(&spec, &Skeleton::default_humanoid(), &Default::default()).unwrap();
        let path = dir.path().join("a/b.jsonl");
        write_clips(&path, &c.novices).unwrap();
        assert_eq!(read_clips(&path).unwrap(), c.novices);
        let p: Vec<NoviceSource> = c.pairing.clone();
        write_json(&dir.path().join("p.json"), &p).unwrap();
        assert_eq!(read_json::<Vec<NoviceSource>>(&dir.path().join("p.json")).unwrap(), p);
    }
}
