//! Novice-vs-expert classifier whose pooled hidden layer is the feature space
//! for Fréchet statistics.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skilledit_core::{MaskSpan, MotionClip};
use skilledit_nn::{Adam, AdamConfig, Checkpoint, Graph, Linear, ParamStore, Var};

use crate::error::{ModelError, Result};
use crate::features::FeatureStats;
use crate::tokenizer::read_meta;

pub const FEATURE_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of each class held out for the accuracy report.
    pub holdout: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 32, epochs: 60, holdout: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_examples: usize,
    pub heldout_examples: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub final_loss: f64,
}

/// A clip and the frames its features are pooled over.
#[derive(Debug, Clone, Copy)]
pub struct SpannedClip<'a> {
    pub clip: &'a MotionClip<f64>,
    pub span: MaskSpan,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub technique: String,
    pub num_joints: usize,
    pub stats: FeatureStats,
    store: ParamStore<f32>,
    l1: Linear,
    l2: Linear,
    head: Linear,
}

const KIND: &str = "classifier";

/// Root orientation and joint rotations; root translation is left out so the
/// classifier cannot key on where a clip happens to be in the world.
fn frame_input(row: &[f64]) -> &[f64] {
    &row[3..]
}

impl Classifier {
    fn new(config: ClassifierConfig, num_joints: usize, stats: FeatureStats, technique: &str, seed: u64) -> Result<Self> {
        let dim = 3 + 3 * num_joints;
        if stats.dim() != dim {
            return Err(ModelError::InvalidArgument(format!("feature statistics have {} dims, expected {dim}", stats.dim())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "cls.l1", dim, FEATURE_DIM, &mut rng);
        let l2 = Linear::new(&mut store, "cls.l2", FEATURE_DIM, FEATURE_DIM, &mut rng);
        let head = Linear::new(&mut store, "cls.head", FEATURE_DIM, 1, &mut rng);
        Ok(Self { config, technique: technique.to_string(), num_joints, stats, store, l1, l2, head })
    }

    fn span_rows(&self, items: &[SpannedClip<'_>]) -> Result<(Vec<f32>, Vec<(usize, usize)>)> {
        let mut x = Vec::new();
        let mut segments = Vec::with_capacity(items.len());
        let mut row = 0;
        for it in items {
            if it.clip.num_joints != self.num_joints {
                return Err(ModelError::InvalidArgument(format!(
                    "clip {} has {} joints, classifier expects {}",
                    it.clip.id(),
                    it.clip.num_joints,
                    self.num_joints
                )));
            }
            it.span.check_within(it.clip.len())?;
            for t in it.span.frames() {
                let f = it.clip.frames[t].assemble_feature_vector()?;
                self.stats.normalize(frame_input(&f), &mut x);
            }
            segments.push((row, row + it.span.width()));
            row += it.span.width();
        }
        Ok((x, segments))
    }

    fn pooled(&self, g: &mut Graph<'_, f32>, items: &[SpannedClip<'_>]) -> Result<Var> {
        let (x, segments) = self.span_rows(items)?;
        let rows = segments.last().map(|s| s.1).unwrap_or(0);
        let xv = g.constant(skilledit_nn::Tensor::matrix(rows, self.stats.dim(), x)?);
        let h = self.l1.forward(g, xv)?;
        let h = g.gelu(h);
        let h = self.l2.forward(g, h)?;
        let h = g.gelu(h);
        Ok(g.mean_segments(h, &segments)?)
    }

    /// 64-d span-pooled feature for each clip.
    pub fn features(&self, items: &[SpannedClip<'_>]) -> Result<Vec<Vec<f64>>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::with_params(&self.store);
        let p = self.pooled(&mut g, items)?;
        let v = g.value(p);
        Ok((0..v.rows()).map(|r| v.row(r).iter().map(|&x| x as f64).collect()).collect())
    }

    /// Probability that each clip is expert.
    pub fn predict(&self, items: &[SpannedClip<'_>]) -> Result<Vec<f64>> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::with_params(&self.store);
        let p = self.pooled(&mut g, items)?;
        let logit = self.head.forward(&mut g, p)?;
        Ok(g.value(logit).data().iter().map(|&z| 1.0 / (1.0 + (-(z as f64)).exp())).collect())
    }

    fn accuracy(&self, items: &[SpannedClip<'_>], labels: &[bool]) -> Result<f64> {
        if items.is_empty() {
            return Ok(f64::NAN);
        }
        let p = self.predict(items)?;
        Ok(p.iter().zip(labels).filter(|(p, &l)| (**p >= 0.5) == l).count() as f64 / items.len() as f64)
    }

    /// Binary cross-entropy training, expert = 1. Each class is split into
    /// train and held-out parts; the larger class is subsampled to balance
    /// the training set.
    pub fn train(
        experts: &[SpannedClip<'_>],
        novices: &[SpannedClip<'_>],
        config: &ClassifierConfig,
        technique: &str,
        seed: u64,
    ) -> Result<(Self, ClassifierReport)> {
        if experts.is_empty() || novices.is_empty() {
            return Err(ModelError::InvalidArgument(format!(
                "classifier needs both classes, got {} expert and {} novice clips",
                experts.len(),
                novices.len()
            )));
        }
        if !(0.0..1.0).contains(&config.holdout) || config.batch_size == 0 || config.epochs == 0 || !(config.lr > 0.0) {
            return Err(ModelError::Config("invalid classifier config".into()));
        }
        let num_joints = experts[0].clip.num_joints;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = |n: usize, rng: &mut ChaCha8Rng| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let held = ((n as f64) * config.holdout).round() as usize;
            let held = held.min(n.saturating_sub(1));
            let train = idx.split_off(held);
            (train, idx)
        };
        let (mut e_train, e_held) = split(experts.len(), &mut rng);
        let (mut n_train, n_held) = split(novices.len(), &mut rng);
        let per_class = e_train.len().min(n_train.len());
        e_train.truncate(per_class);
        n_train.truncate(per_class);

        let mut train: Vec<(SpannedClip<'_>, bool)> = e_train.iter().map(|&i| (experts[i], true)).collect();
        train.extend(n_train.iter().map(|&i| (novices[i], false)));
        let mut held: Vec<(SpannedClip<'_>, bool)> = e_held.iter().map(|&i| (experts[i], true)).collect();
        held.extend(n_held.iter().map(|&i| (novices[i], false)));

        let rows: Vec<Vec<f64>> = train
            .iter()
            .flat_map(|(it, _)| it.span.frames().map(|t| it.clip.frames[t].assemble_feature_vector()))
            .collect::<std::result::Result<_, _>>()?;
        let dim = 3 + 3 * num_joints;
        let stats = FeatureStats::fit_rows(dim, rows.iter().map(|r| frame_input(r)))?;
        let mut model = Self::new(config.clone(), num_joints, stats, technique, seed ^ 0xc1a5)?;
        let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &model.store);
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut final_loss = f64::NAN;
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let items: Vec<SpannedClip<'_>> = chunk.iter().map(|&i| train[i].0).collect();
                let labels: Vec<f32> = chunk.iter().map(|&i| if train[i].1 { 1.0 } else { 0.0 }).collect();
                let (grads, loss) = {
                    let mut g = Graph::with_params(&model.store);
                    let p = model.pooled(&mut g, &items)?;
                    let logit = model.head.forward(&mut g, p)?;
                    let loss = g.bce_with_logits(logit, &labels)?;
                    g.backward(loss)?;
                    (g.param_grads(), g.value(loss).item() as f64)
                };
                adam.step(&mut model.store, &grads);
                sum += loss * chunk.len() as f64;
            }
            final_loss = sum / train.len() as f64;
            if epoch % 20 == 0 || epoch == config.epochs {
                info!("classifier epoch {epoch}: loss {final_loss:.4}");
            }
        }
        let (ti, tl): (Vec<_>, Vec<_>) = train.iter().copied().unzip();
        let (hi, hl): (Vec<_>, Vec<_>) = held.iter().copied().unzip();
        let report = ClassifierReport {
            train_examples: ti.len(),
            heldout_examples: hi.len(),
            train_accuracy: model.accuracy(&ti, &tl)?,
            heldout_accuracy: model.accuracy(&hi, &hl)?,
            final_loss,
        };
        info!("classifier held-out accuracy {:.3} on {} clips", report.heldout_accuracy, report.heldout_examples);
        Ok((model, report))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_text("meta/kind", KIND);
        c.put_text("meta/technique", &self.technique);
        c.put_text("meta/config", &serde_json::to_string(&self.config).expect("config serializes"));
        c.put("meta/num_joints", vec![1], vec![self.num_joints as f32]);
        c.put("norm/mean", vec![self.stats.dim()], self.stats.mean.clone());
        c.put("norm/std", vec![self.stats.dim()], self.stats.std.clone());
        self.store.write_into(&mut c);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let (technique, config) = read_meta::<ClassifierConfig>(c, KIND)?;
        let get = |name: &str| {
            c.get(name)
                .map(|r| r.data.clone())
                .ok_or_else(|| ModelError::State(format!("classifier checkpoint lacks {name}")))
        };
        let joints = get("meta/num_joints")?.first().copied().unwrap_or(0.0) as usize;
        let stats = FeatureStats { mean: get("norm/mean")?, std: get("norm/std")? };
        let mut model = Self::new(config, joints, stats, &technique, 0)?;
        model.store.read_from(c)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use skilledit_core::kinematics::span_with_length;
    use skilledit_core::PoseFrame;

    fn clip(rng: &mut ChaCha8Rng, offset: f64) -> MotionClip<f64> {
        let frames = (0..12)
            .map(|_| {
                let mut f = PoseFrame::zeros(3);
                f.root_translation = [rng.random::<f64>() * 5.0, 0.0, 0.0];
                f.joint_rotations.iter_mut().for_each(|x| *x = rng.random::<f64>() - 0.5);
                f.joint_rotations[4] += offset;
                f
            })
            .collect();
        MotionClip::new(30.0, 3, frames).unwrap()
    }

    fn corpus(n: usize, sep: f64, seed: u64) -> (Vec<MotionClip<f64>>, Vec<MotionClip<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = (0..n).map(|_| clip(&mut rng, sep)).collect();
        let v = (0..n).map(|_| clip(&mut rng, -sep)).collect();
        (e, v)
    }

    fn spanned(clips: &[MotionClip<f64>]) -> Vec<SpannedClip<'_>> {
        let span = span_with_length(6, 12, 5).unwrap();
        clips.iter().map(|clip| SpannedClip { clip, span }).collect()
    }

    #[test]
    fn separable_classes() {
        let (e, n) = corpus(60, 0.5, 1);
        let (m, rep) = Classifier::train(&spanned(&e), &spanned(&n), &ClassifierConfig::default(), "t", 3).unwrap();
        assert!(rep.heldout_accuracy >= 0.95, "{rep:?}");
        assert_eq!(m.features(&spanned(&e[..2])).unwrap()[0].len(), FEATURE_DIM);
        let back = Classifier::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.features(&spanned(&e[..3])).unwrap(), m.features(&spanned(&e[..3])).unwrap());
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let (e, n) = corpus(250, 0.5, 2);
        let mut all: Vec<MotionClip<f64>> = e.into_iter().chain(n).collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(7));
        let (a, b) = all.split_at(250);
        let cfg = ClassifierConfig { epochs: 20, ..ClassifierConfig::default() };
        let (_, rep) = Classifier::train(&spanned(a), &spanned(b), &cfg, "t", 4).unwrap();
        assert!((rep.heldout_accuracy - 0.5).abs() <= 0.1, "{rep:?}");
    }

    #[test]
    fn reruns_are_identical_and_single_class_fails() {
        let (e, n) = corpus(20, 0.5, 5);
        let cfg = ClassifierConfig { epochs: 5, ..ClassifierConfig::default() };
        let (a, ra) = Classifier::train(&spanned(&e), &spanned(&n), &cfg, "t", 8).unwrap();
        let (b, rb) = Classifier::train(&spanned(&e), &spanned(&n), &cfg, "t", 8).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        assert!(Classifier::train(&spanned(&e), &[], &cfg, "t", 8).is_err());
    }
}
