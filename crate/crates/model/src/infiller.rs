//! Bidirectional masked-token model over tokenized motion.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skilledit_core::kinematics::{span_length, span_with_length};
use skilledit_core::MaskSpan;
use skilledit_nn::layers::DropoutRng;
use skilledit_nn::{Adam, AdamConfig, AttnMask, Checkpoint, Graph, Linear, ParamId, ParamStore, Reduction, Tensor, Transformer, TransformerConfig, Var};

use crate::error::{ModelError, Result};
use crate::tokenizer::read_meta;
use crate::tokens::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfillerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub lr: f64,
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Upper bound of the training span length as a fraction of `T`.
    pub alpha_train: f64,
}

impl Default for InfillerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl InfillerConfig {
    pub fn desk() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 64,
            hidden_dim: 128,
            max_seq_len: 128,
            dropout: 0.1,
            lr: 1e-3,
            lr_final_fraction: 0.1,
            batch_size: 16,
            epochs: 60,
            alpha_train: 0.3,
        }
    }

    /// Full-size setting: 12 layers, width 256, 8 heads, Adam lr 1e-4, batch 16.
    pub fn full() -> Self {
        Self {
            layers: 12,
            heads: 8,
            model_dim: 256,
            hidden_dim: 1024,
            lr: 1e-4,
            lr_final_fraction: 1.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(ModelError::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return Err(ModelError::Config("lr must be positive and lr_final_fraction in (0, 1]".into()));
        }
        if !(self.alpha_train > 0.0 && self.alpha_train < 1.0) {
            return Err(ModelError::Config(format!("alpha_train must be in (0, 1), got {}", self.alpha_train)));
        }
        self.transformer().validate()?;
        Ok(())
    }

    fn transformer(&self) -> TransformerConfig {
        TransformerConfig {
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            hidden_dim: self.hidden_dim,
            causal: false,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }
}

/// How masked positions are filled at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InfillMode {
    Greedy,
    Sample { temperature: f64 },
}

impl InfillMode {
    pub fn label(&self) -> &'static str {
        match self {
            InfillMode::Greedy => "greedy",
            InfillMode::Sample { .. } => "sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfillerEpoch {
    pub epoch: usize,
    /// Summed masked cross-entropy per sequence.
    pub loss: f64,
    pub masked_positions: usize,
}

#[derive(Debug, Clone)]
pub struct Infiller {
    pub config: InfillerConfig,
    pub technique: String,
    pub num_books: usize,
    pub codes_per_book: usize,
    store: ParamStore<f32>,
    embeddings: Vec<ParamId>,
    mask_embedding: ParamId,
    encoder: Transformer,
    heads: Vec<Linear>,
}

/// Training-time span: a length drawn uniformly from `[2, max(2, floor(alpha * T))]`
/// centered on `peak`.
pub fn sample_training_span(peak: usize, len: usize, alpha: f64, rng: &mut ChaCha8Rng) -> Result<MaskSpan> {
    let upper = span_length(alpha, len)?;
    let length = rng.random_range(2..=upper);
    Ok(span_with_length(peak, len, length)?)
}

const KIND: &str = "infiller";

impl Infiller {
    pub fn new(
        config: InfillerConfig,
        num_books: usize,
        codes_per_book: usize,
        technique: &str,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if num_books == 0 || codes_per_book < 2 {
            return Err(ModelError::Config(format!(
                "need at least one book of two codes, got {num_books} x {codes_per_book}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let embeddings = (0..num_books)
            .map(|b| store.add_normal(format!("inf.embed{b}"), &[codes_per_book, d], 0.02, &mut rng))
            .collect();
        let mask_embedding = store.add_normal("inf.mask", &[1, d], 0.02, &mut rng);
        let encoder = Transformer::new(&mut store, "inf.encoder", config.transformer(), &mut rng)?;
        let heads = (0..num_books)
            .map(|b| Linear::new(&mut store, &format!("inf.head{b}"), d, codes_per_book, &mut rng))
            .collect();
        Ok(Self {
            config,
            technique: technique.to_string(),
            num_books,
            codes_per_book,
            store,
            embeddings,
            mask_embedding,
            encoder,
            heads,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    fn check(&self, seqs: &[&[Vec<usize>]]) -> Result<usize> {
        let t_len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if t_len == 0 {
            return Err(ModelError::InvalidArgument("empty token sequence".into()));
        }
        if t_len > self.config.max_seq_len {
            return Err(ModelError::InvalidArgument(format!(
                "sequence of {t_len} frames exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        for s in seqs {
            if s.len() != t_len {
                return Err(ModelError::InvalidArgument("sequences in a batch differ in length".into()));
            }
            let seq = TokenSequence { clip_id: String::new(), tokens: s.to_vec(), span: None };
            seq.validate(self.num_books, self.codes_per_book)?;
        }
        Ok(t_len)
    }

    /// Masked input embeddings: summed per-book code embeddings, with masked
    /// rows replaced by the learned mask vector.
    fn embed(&self, g: &mut Graph<'_, f32>, seqs: &[&[Vec<usize>]], masked: &[bool]) -> Result<Var> {
        let mut sum: Option<Var> = None;
        for b in 0..self.num_books {
            let idx: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(move |t| t[b])).collect();
            let table = g.param(self.embeddings[b]);
            let e = g.gather(table, &idx)?;
            sum = Some(match sum {
                None => e,
                Some(s) => g.add(s, e)?,
            });
        }
        let fill = g.param(self.mask_embedding);
        Ok(g.mask_rows(sum.expect("at least one book"), fill, masked)?)
    }

    fn masked_input(&self, g: &mut Graph<'_, f32>, seqs: &[&[Vec<usize>]], masked: &[bool], t_len: usize) -> Result<Var> {
        let x = self.embed(g, seqs, masked)?;
        Ok(self.encoder.add_positions(g, x, t_len)?)
    }

    /// Transformer input for one sequence, `[T, model_dim]`: mask vector inside
    /// `span`, summed code embeddings elsewhere, positions added everywhere.
    pub fn apply_span_mask(&self, tokens: &[Vec<usize>], span: &MaskSpan) -> Result<Tensor<f32>> {
        span.check_within(tokens.len())?;
        let t_len = self.check(&[tokens])?;
        let masked = mask_vector(std::slice::from_ref(span), t_len);
        let mut g = Graph::with_params(&self.store);
        let x = self.masked_input(&mut g, &[tokens], &masked, t_len)?;
        Ok(g.value(x).clone())
    }

    /// Per-book logits, each `[B * T, K]`.
    fn logits(&self, g: &mut Graph<'_, f32>, seqs: &[&[Vec<usize>]], masked: &[bool], rng: DropoutRng<'_>) -> Result<Vec<Var>> {
        let t_len = self.check(seqs)?;
        let x = self.masked_input(g, seqs, masked, t_len)?;
        let h = self.encoder.forward_positioned(g, x, t_len, &AttnMask::Full, rng)?;
        self.heads.iter().map(|head| Ok(head.forward(g, h)?)).collect()
    }

    /// Cross-entropy summed over masked positions and books, averaged over the batch.
    pub fn mlm_loss(&self, g: &mut Graph<'_, f32>, seqs: &[&[Vec<usize>]], spans: &[MaskSpan], rng: DropoutRng<'_>) -> Result<Var> {
        if seqs.len() != spans.len() || seqs.is_empty() {
            return Err(ModelError::InvalidArgument("need one span per sequence".into()));
        }
        let t_len = seqs[0].len();
        let masked = mask_vector(spans, t_len);
        let logits = self.logits(g, seqs, &masked, rng)?;
        let mut total: Option<Var> = None;
        for (b, l) in logits.into_iter().enumerate() {
            let targets: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(move |t| t[b])).collect();
            let ce = g.cross_entropy(l, &targets, &masked, Reduction::Sum)?;
            total = Some(match total {
                None => ce,
                Some(s) => g.add(s, ce)?,
            });
        }
        Ok(g.scale(total.expect("at least one book"), 1.0 / seqs.len() as f64))
    }

    /// Trains on token sequences with a known kinematic peak per sequence.
    pub fn train(
        corpus: &[TokenSequence],
        peaks: &[usize],
        num_books: usize,
        codes_per_book: usize,
        config: &InfillerConfig,
        technique: &str,
        seed: u64,
    ) -> Result<(Self, Vec<InfillerEpoch>)> {
        if corpus.is_empty() {
            return Err(ModelError::InvalidArgument("empty infiller corpus".into()));
        }
        if corpus.len() != peaks.len() {
            return Err(ModelError::InvalidArgument("need one peak per training sequence".into()));
        }
        let mut model = Self::new(config.clone(), num_books, codes_per_book, technique, seed)?;
        let all: Vec<&[Vec<usize>]> = corpus.iter().map(|s| s.tokens.as_slice()).collect();
        let t_len = model.check(&all)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851_f42d_4c95_7f2d));
        let batch = config.batch_size.min(corpus.len());
        let total_steps = (corpus.len().div_ceil(batch) * config.epochs) as f64;
        let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &model.store);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut log = Vec::with_capacity(config.epochs);
        let mut step = 0usize;
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            let mut positions = 0;
            for chunk in order.chunks(batch) {
                let seqs: Vec<&[Vec<usize>]> = chunk.iter().map(|&i| all[i]).collect();
                let spans = chunk
                    .iter()
                    .map(|&i| sample_training_span(peaks[i], t_len, config.alpha_train, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                positions += spans.iter().map(|s| s.width()).sum::<usize>();
                let (grads, loss) = {
                    let mut g = Graph::with_params(&model.store);
                    let loss = model.mlm_loss(&mut g, &seqs, &spans, Some(&mut rng))?;
                    g.backward(loss)?;
                    (g.param_grads(), g.value(loss).item() as f64)
                };
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
                adam.config.lr = config.lr * (config.lr_final_fraction + (1.0 - config.lr_final_fraction) * cosine);
                adam.step(&mut model.store, &grads);
                step += 1;
                sum += loss * chunk.len() as f64;
            }
            let entry = InfillerEpoch { epoch, loss: sum / corpus.len() as f64, masked_positions: positions };
            info!("infiller epoch {epoch}: loss {:.4}", entry.loss);
            log.push(entry);
        }
        Ok((model, log))
    }

    /// Per-book logits for one sequence with `span` masked, `[books][T][K]`.
    pub fn predict(&self, tokens: &[Vec<usize>], span: &MaskSpan) -> Result<Vec<Vec<Vec<f32>>>> {
        span.check_within(tokens.len())?;
        let masked = mask_vector(std::slice::from_ref(span), tokens.len());
        let mut g = Graph::with_params(&self.store);
        let logits = self.logits(&mut g, &[tokens], &masked, None)?;
        Ok(logits
            .into_iter()
            .map(|l| {
                let v = g.value(l);
                (0..v.rows()).map(|r| v.row(r).to_vec()).collect()
            })
            .collect())
    }

    /// Replaces the tokens inside `span`; frames outside it are returned unchanged.
    pub fn infill(&self, tokens: &[Vec<usize>], span: &MaskSpan, mode: InfillMode, seed: u64) -> Result<Vec<Vec<usize>>> {
        if let InfillMode::Sample { temperature } = mode {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(ModelError::InvalidArgument(format!("temperature must be positive, got {temperature}")));
            }
        }
        let logits = self.predict(tokens, span)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = tokens.to_vec();
        for t in span.frames() {
            for (b, book) in logits.iter().enumerate() {
                out[t][b] = match mode {
                    InfillMode::Greedy => argmax(&book[t]),
                    InfillMode::Sample { temperature } => sample(&book[t], temperature, &mut rng),
                };
            }
        }
        Ok(out)
    }

    /// Greedy top-1 accuracy per book on the masked positions of `spans`.
    pub fn masked_accuracy(&self, corpus: &[TokenSequence], spans: &[MaskSpan]) -> Result<Vec<f64>> {
        if corpus.is_empty() || corpus.len() != spans.len() {
            return Err(ModelError::InvalidArgument("need a non-empty corpus with one span per sequence".into()));
        }
        let mut hits = vec![0usize; self.num_books];
        let mut total = 0usize;
        for (seq, span) in corpus.iter().zip(spans) {
            let pred = self.infill(&seq.tokens, span, InfillMode::Greedy, 0)?;
            for t in span.frames() {
                total += 1;
                for b in 0..self.num_books {
                    hits[b] += usize::from(pred[t][b] == seq.tokens[t][b]);
                }
            }
        }
        Ok(hits.into_iter().map(|h| h as f64 / total as f64).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.put_text("meta/kind", KIND);
        c.put_text("meta/technique", &self.technique);
        c.put_text("meta/config", &serde_json::to_string(&self.config).expect("config serializes"));
        c.put("meta/books", vec![2], vec![self.num_books as f32, self.codes_per_book as f32]);
        self.store.write_into(&mut c);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let (technique, config) = read_meta::<InfillerConfig>(c, KIND)?;
        let books = c
            .get("meta/books")
            .filter(|r| r.data.len() == 2)
            .ok_or_else(|| ModelError::State("infiller checkpoint lacks meta/books".into()))?;
        let mut model = Self::new(config, books.data[0] as usize, books.data[1] as usize, &technique, 0)?;
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

fn mask_vector(spans: &[MaskSpan], t_len: usize) -> Vec<bool> {
    spans.iter().flat_map(|s| (0..t_len).map(move |t| s.contains(t))).collect()
}

/// Highest logit, earliest on ties.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let weights: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> InfillerConfig {
        InfillerConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            hidden_dim: 16,
            max_seq_len: 16,
            dropout: 0.0,
            batch_size: 4,
            epochs: 2,
            ..InfillerConfig::desk()
        }
    }

    fn seq(shift: usize) -> Vec<Vec<usize>> {
        (0..12).map(|t| vec![(t + shift) % 5, (2 * t + shift) % 5]).collect()
    }

    #[test]
    fn masked_tokens_do_not_leak() {
        let m = Infiller::new(tiny(), 2, 5, "t", 1).unwrap();
        let span = span_with_length(6, 12, 4).unwrap();
        let a = seq(0);
        let mut b = a.clone();
        for t in span.frames() {
            b[t] = vec![4, 4];
        }
        assert_eq!(m.predict(&a, &span).unwrap(), m.predict(&b, &span).unwrap());
    }

    #[test]
    fn span_mask_is_local() {
        let m = Infiller::new(tiny(), 2, 5, "t", 1).unwrap();
        let span = span_with_length(4, 10, 2).unwrap();
        assert_eq!((span.lo, span.hi), (3, 5));
        let a = seq(0);
        let full = MaskSpan { center: 4, half_width: 1, lo: 3, hi: 5 };
        let masked = m.apply_span_mask(&a[..10], &full).unwrap();
        let mut other = a[..10].to_vec();
        other[4] = vec![0, 0];
        assert_eq!(masked, m.apply_span_mask(&other, &full).unwrap());
        // an out-of-the-way span leaves rows 0..=5 as plain embeddings
        let late = span_with_length(8, 10, 2).unwrap();
        let plain = m.apply_span_mask(&a[..10], &late).unwrap();
        for t in (0..3).chain(6..7) {
            assert_eq!(masked.row(t), plain.row(t));
        }
        assert_ne!(masked.row(4), plain.row(4));
        assert!(m.apply_span_mask(&a[..10], &span_with_length(11, 12, 4).unwrap()).is_err());
    }

    #[test]
    fn low_temperature_matches_greedy() {
        let m = Infiller::new(tiny(), 2, 5, "t", 6).unwrap();
        let span = span_with_length(6, 12, 6).unwrap();
        let a = seq(2);
        let greedy = m.infill(&a, &span, InfillMode::Greedy, 0).unwrap();
        let cold = m.infill(&a, &span, InfillMode::Sample { temperature: 1e-4 }, 17).unwrap();
        assert_eq!(greedy, cold);
    }

    #[test]
    fn uniform_model_loss() {
        let m = Infiller::new(tiny(), 2, 5, "t", 1).unwrap();
        let mut store = m.params().clone();
        for (id, name, _) in m.params().iter() {
            if name.starts_with("inf.head") {
                store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let span = span_with_length(6, 12, 4).unwrap();
        let mut g = Graph::with_params(&store);
        let a = seq(0);
        let loss = m.mlm_loss(&mut g, &[&a], &[span], None).unwrap();
        let expected = (span.width() * 2) as f64 * 5f64.ln();
        assert!((g.value(loss).item() as f64 - expected).abs() < 1e-4);
    }

    #[test]
    fn infill_keeps_tokens_outside_span() {
        let m = Infiller::new(tiny(), 2, 5, "t", 1).unwrap();
        let span = span_with_length(6, 12, 4).unwrap();
        let a = seq(1);
        let greedy = m.infill(&a, &span, InfillMode::Greedy, 0).unwrap();
        let again = m.infill(&a, &span, InfillMode::Greedy, 99).unwrap();
        assert_eq!(greedy, again);
        let s1 = m.infill(&a, &span, InfillMode::Sample { temperature: 1.0 }, 3).unwrap();
        let s2 = m.infill(&a, &span, InfillMode::Sample { temperature: 1.0 }, 3).unwrap();
        assert_eq!(s1, s2);
        for out in [&greedy, &s1] {
            for t in 0..12 {
                if !span.contains(t) {
                    assert_eq!(out[t], a[t]);
                }
                assert!(out[t].iter().all(|&k| k < 5));
            }
        }
        assert!(m.infill(&a, &span, InfillMode::Sample { temperature: 0.0 }, 3).is_err());
    }

    #[test]
    fn training_spans_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let peak = rng.random_range(0..64);
            let s = sample_training_span(peak, 64, 0.3, &mut rng).unwrap();
            assert!(s.hi < 64 && s.lo <= peak && peak <= s.hi);
            assert!((1..=9).contains(&s.half_width));
        }
    }

    #[test]
    fn argmax_and_sampling() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks: Vec<usize> = (0..200).map(|_| sample(&[0.0, 50.0, 0.0], 1.0, &mut rng)).collect();
        assert!(picks.iter().all(|&p| p == 1));
        let spread: std::collections::BTreeSet<usize> = (0..200).map(|_| sample(&[0.0, 0.0, 0.0], 1.0, &mut rng)).collect();
        assert_eq!(spread.len(), 3);
    }

    #[test]
    fn learns_and_round_trips() {
        let corpus: Vec<TokenSequence> = (0..8)
            .map(|i| TokenSequence { clip_id: format!("c{i}"), tokens: seq(0), span: None })
            .collect();
        let peaks = vec![6; 8];
        let cfg = InfillerConfig { epochs: 150, lr: 1e-2, ..tiny() };
        let (m, log) = Infiller::train(&corpus, &peaks, 2, 5, &cfg, "jump", 2).unwrap();
        assert!(log.last().unwrap().loss < log[0].loss);
        // training spans reach at most floor(0.3 * 12) = 3 frames
        let spans = vec![span_with_length(6, 12, 3).unwrap(); 8];
        let acc = m.masked_accuracy(&corpus, &spans).unwrap();
        assert!(acc.iter().all(|&a| a > 0.9), "{acc:?} {:?}", log.iter().map(|e| e.loss).collect::<Vec<_>>());
        let back = Infiller::from_checkpoint(&m.to_checkpoint()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), m.to_checkpoint().to_bytes());
        assert!(Infiller::train(&[], &[], 2, 5, &cfg, "jump", 2).is_err());
    }
}
