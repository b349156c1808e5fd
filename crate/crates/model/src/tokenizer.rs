//! Causal transformer VQ-VAE over frame features with product quantization.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use skilledit_core::{MotionClip, Real};
use skilledit_nn::layers::DropoutRng;
use skilledit_nn::{Adam, AdamConfig, Checkpoint, Graph, Linear, ParamId, ParamStore, Tensor, Transformer, TransformerConfig, Var};

use crate::error::{ModelError, Result};
use crate::features::FeatureStats;
use crate::tokens::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Number of codebooks `c`; the latent is split into `c` equal parts.
    pub num_books: usize,
    /// Codes per book `K`.
    pub codes_per_book: usize,
    /// Latent width `d_z`.
    pub latent_dim: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub causal_decoder: bool,
    /// Commitment weight.
    pub beta: f64,
    pub lr: f64,
    /// Cosine decay floor as a fraction of `lr`; 1.0 keeps the rate constant.
    pub lr_final_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TokenizerConfig {
    /// Small configuration that trains on a laptop CPU in minutes.
    pub fn desk() -> Self {
        Self {
            num_books: 2,
            codes_per_book: 64,
            latent_dim: 64,
            model_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            hidden_dim: 128,
            max_seq_len: 128,
            dropout: 0.0,
            causal_decoder: true,
            beta: 0.25,
            lr: 1e-3,
            lr_final_fraction: 0.1,
            batch_size: 32,
            epochs: 40,
        }
    }

    /// Full-size setting: c=2, K=256, d_z=256, 6+6 layers, 4 heads, hidden 384,
    /// Adam lr 5e-5, batch 64.
    pub fn full() -> Self {
        Self {
            codes_per_book: 256,
            latent_dim: 256,
            model_dim: 256,
            encoder_layers: 6,
            decoder_layers: 6,
            hidden_dim: 384,
            dropout: 0.1,
            lr: 5e-5,
            lr_final_fraction: 1.0,
            batch_size: 64,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_books == 0 || !self.latent_dim.is_multiple_of(self.num_books) {
            return bad(format!("latent_dim {} not divisible by {} books", self.latent_dim, self.num_books));
        }
        if self.codes_per_book < 2 {
            return bad("codes_per_book must be at least 2".into());
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.lr_final_fraction > 0.0 && self.lr_final_fraction <= 1.0) {
            return bad("lr must be positive and lr_final_fraction in (0, 1]".into());
        }
        if self.beta < 0.0 {
            return bad("beta must be non-negative".into());
        }
        self.transformer(true, 1).validate()?;
        Ok(())
    }

    fn transformer(&self, causal: bool, layers: usize) -> TransformerConfig {
        TransformerConfig {
            layers,
            heads: self.heads,
            model_dim: self.model_dim,
            hidden_dim: self.hidden_dim,
            causal,
            max_seq_len: self.max_seq_len,
            dropout: self.dropout,
        }
    }

    pub fn code_dim(&self) -> usize {
        self.latent_dim / self.num_books
    }
}

/// `‖x − x̂‖² + ‖z − e‖² + β‖z − e‖²` evaluated on plain values (the two
/// latent terms differ only in where gradients flow).
pub fn vq_loss(x: &[f64], x_hat: &[f64], z: &[f64], e: &[f64], beta: f64) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let latent = sq(z, e);
    sq(x, x_hat) + latent + beta * latent
}

/// Index of the nearest code (squared distance), earliest on ties.
pub fn nearest_code(codebook: &[f32], code_dim: usize, z: &[f32]) -> usize {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (k, code) in codebook.chunks_exact(code_dim).enumerate() {
        let d: f32 = code.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerEpoch {
    pub epoch: usize,
    /// Per-clip averages of the total loss and its three terms.
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    /// Fraction of codes selected at least once this epoch, per book.
    pub usage: Vec<f64>,
    pub reseeded: usize,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub technique: String,
    pub num_joints: usize,
    pub stats: FeatureStats,
    store: ParamStore<f32>,
    enc_in: Linear,
    encoder: Transformer,
    enc_out: Linear,
    codebooks: Vec<ParamId>,
    dec_in: Linear,
    decoder: Transformer,
    dec_out: Linear,
}

struct Pass {
    z: Var,
    e: Var,
    x_hat: Var,
    /// `codes[book][row]`
    codes: Vec<Vec<usize>>,
}

const KIND: &str = "tokenizer";

impl Tokenizer {
    /// Randomly initialized model.
    pub fn new(config: TokenizerConfig, num_joints: usize, stats: FeatureStats, technique: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = 6 + 3 * num_joints;
        if stats.dim() != f {
            return Err(ModelError::InvalidArgument(format!(
                "feature statistics have {} dims, expected {f}",
                stats.dim()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.model_dim;
        let enc_in = Linear::new(&mut store, "tok.enc_in", f, d, &mut rng);
        let encoder = Transformer::new(&mut store, "tok.encoder", config.transformer(true, config.encoder_layers), &mut rng)?;
        let enc_out = Linear::new(&mut store, "tok.enc_out", d, config.latent_dim, &mut rng);
        let codebooks = (0..config.num_books)
            .map(|i| store.add_normal(format!("tok.codebook{i}"), &[config.codes_per_book, config.code_dim()], 1.0, &mut rng))
            .collect();
        let dec_in = Linear::new(&mut store, "tok.dec_in", config.latent_dim, d, &mut rng);
        let decoder = Transformer::new(
            &mut store,
            "tok.decoder",
            config.transformer(config.causal_decoder, config.decoder_layers),
            &mut rng,
        )?;
        let dec_out = Linear::new(&mut store, "tok.dec_out", d, f, &mut rng);
        Ok(Self {
            config,
            technique: technique.to_string(),
            num_joints,
            stats,
            store,
            enc_in,
            encoder,
            enc_out,
            codebooks,
            dec_in,
            decoder,
            dec_out,
        })
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn feature_dim(&self) -> usize {
        6 + 3 * self.num_joints
    }

    /// Book `i` as a `[K, code_dim]` tensor.
    pub fn codebook(&self, book: usize) -> &Tensor<f32> {
        self.store.get(self.codebooks[book])
    }

    pub fn set_code(&mut self, book: usize, code: usize, value: &[f32]) {
        let cd = self.config.code_dim();
        let id = self.codebooks[book];
        self.store.get_mut(id).data_mut()[code * cd..(code + 1) * cd].copy_from_slice(value);
    }

    fn check_length(&self, t: usize) -> Result<()> {
        if t > self.config.max_seq_len {
            return Err(ModelError::InvalidArgument(format!(
                "clip of {t} frames exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if t == 0 {
            return Err(ModelError::InvalidArgument("empty clip".into()));
        }
        Ok(())
    }

    fn encode_var(&self, g: &mut Graph<'_, f32>, x: Var, t_len: usize, rng: DropoutRng<'_>) -> Result<Var> {
        let h = self.enc_in.forward(g, x)?;
        let h = self.encoder.forward(g, h, t_len, rng)?;
        Ok(self.enc_out.forward(g, h)?)
    }

    fn decode_var(&self, g: &mut Graph<'_, f32>, zq: Var, t_len: usize, rng: DropoutRng<'_>) -> Result<Var> {
        let h = self.dec_in.forward(g, zq)?;
        let h = self.decoder.forward(g, h, t_len, rng)?;
        Ok(self.dec_out.forward(g, h)?)
    }

    fn assign(&self, z: &Tensor<f32>) -> Vec<Vec<usize>> {
        let cd = self.config.code_dim();
        (0..self.config.num_books)
            .map(|b| {
                let book = self.codebook(b).data();
                (0..z.rows()).map(|r| nearest_code(book, cd, &z.row(r)[b * cd..(b + 1) * cd])).collect()
            })
            .collect()
    }

    fn lookup_var(&self, g: &mut Graph<'_, f32>, codes: &[Vec<usize>]) -> Result<Var> {
        let mut parts = Vec::with_capacity(codes.len());
        for (b, idx) in codes.iter().enumerate() {
            let table = g.param(self.codebooks[b]);
            parts.push(g.gather(table, idx)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            Ok(g.concat_cols(&parts)?)
        }
    }

    fn pass(&self, g: &mut Graph<'_, f32>, x: Var, t_len: usize, mut rng: DropoutRng<'_>) -> Result<Pass> {
        let z = self.encode_var(g, x, t_len, rng.as_deref_mut())?;
        let codes = self.assign(g.value(z));
        let e = self.lookup_var(g, &codes)?;
        let e_value = g.value(e).clone();
        let zq = g.straight_through(z, e_value)?;
        let x_hat = self.decode_var(g, zq, t_len, rng)?;
        Ok(Pass { z, e, x_hat, codes })
    }

    fn clip_input(&self, clip: &MotionClip<f64>) -> Result<Tensor<f32>> {
        self.check_length(clip.len())?;
        let x = self.stats.normalize_clip(clip)?;
        Ok(Tensor::matrix(clip.len(), self.feature_dim(), x)?)
    }

    /// Latent sequence `Z`, `[T, d_z]`.
    pub fn encode(&self, clip: &MotionClip<f64>) -> Result<Tensor<f32>> {
        let x = self.clip_input(clip)?;
        let mut g = Graph::with_params(&self.store);
        let xv = g.constant(x);
        let z = self.encode_var(&mut g, xv, clip.len(), None)?;
        Ok(g.value(z).clone())
    }

    /// Per-frame index tuples and the concatenated selected codes.
    pub fn quantize(&self, z: &Tensor<f32>) -> Result<(Vec<Vec<usize>>, Tensor<f32>)> {
        if z.cols() != self.config.latent_dim {
            return Err(ModelError::InvalidArgument(format!(
                "latent width {} differs from d_z {}",
                z.cols(),
                self.config.latent_dim
            )));
        }
        let codes = self.assign(z);
        let per_frame = (0..z.rows()).map(|r| codes.iter().map(|c| c[r]).collect()).collect();
        Ok((per_frame, self.lookup(&codes)?))
    }

    fn lookup(&self, codes: &[Vec<usize>]) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.store);
        let e = self.lookup_var(&mut g, codes)?;
        Ok(g.value(e).clone())
    }

    /// Decodes quantized latents to denormalized frame features.
    pub fn decode_latents(&self, zq: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
        self.check_length(zq.rows())?;
        let mut g = Graph::with_params(&self.store);
        let zv = g.constant(zq.clone());
        let x_hat = self.decode_var(&mut g, zv, zq.rows(), None)?;
        let out = g.value(x_hat);
        Ok((0..out.rows()).map(|r| self.stats.denormalize(out.row(r))).collect())
    }

    /// Decodes per-frame index tuples to denormalized frame features.
    pub fn decode(&self, tokens: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let seq = TokenSequence { clip_id: String::new(), tokens: tokens.to_vec(), span: None };
        seq.validate(self.config.num_books, self.config.codes_per_book)?;
        let codes: Vec<Vec<usize>> = (0..self.config.num_books)
            .map(|b| tokens.iter().map(|t| t[b]).collect())
            .collect();
        self.decode_latents(&self.lookup(&codes)?)
    }

    pub fn tokenize(&self, clip: &MotionClip<f64>) -> Result<TokenSequence> {
        let z = self.encode(clip)?;
        let (tokens, _) = self.quantize(&z)?;
        Ok(TokenSequence { clip_id: clip.id().to_string(), tokens, span: None })
    }

    /// Encode, quantize and decode a clip.
    pub fn reconstruct(&self, clip: &MotionClip<f64>) -> Result<MotionClip<f64>> {
        let seq = self.tokenize(clip)?;
        let rows = self.decode(&seq.tokens)?;
        Ok(clip.with_features(&rows.concat())?)
    }

    /// Trains on an expert corpus; returns the model and one log entry per epoch.
    pub fn train(
        corpus: &[MotionClip<f64>],
        config: &TokenizerConfig,
        technique: &str,
        seed: u64,
    ) -> Result<(Self, Vec<TokenizerEpoch>)> {
        config.validate()?;
        let first = corpus.first().ok_or_else(|| ModelError::InvalidArgument("empty tokenizer corpus".into()))?;
        let (t_len, joints) = (first.len(), first.num_joints);
        if let Some(c) = corpus.iter().find(|c| c.len() != t_len || c.num_joints != joints) {
            return Err(ModelError::InvalidArgument(format!(
                "clip {} is {}x{}, corpus uses {t_len} frames of {joints} joints",
                c.id(),
                c.len(),
                c.num_joints
            )));
        }
        let stats = FeatureStats::fit_clips(corpus)?;
        let mut model = Self::new(config.clone(), joints, stats, technique, seed)?;
        model.check_length(t_len)?;
        let f = model.feature_dim();
        let data: Vec<Vec<f32>> = corpus.iter().map(|c| model.stats.normalize_clip(c)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        let batch = config.batch_size.min(corpus.len());
        let cd = config.code_dim();

        let make_batch = |idx: &[usize]| -> Result<Tensor<f32>> {
            let mut x = Vec::with_capacity(idx.len() * t_len * f);
            for &i in idx {
                x.extend_from_slice(&data[i]);
            }
            Ok(Tensor::matrix(idx.len() * t_len, f, x)?)
        };

        // Codebooks start at encoder outputs of a random batch.
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);
        {
            let x = make_batch(&order[..batch])?;
            let z = {
                let mut g = Graph::with_params(&model.store);
                let xv = g.constant(x);
                let z = model.encode_var(&mut g, xv, t_len, None)?;
                g.value(z).clone()
            };
            for b in 0..config.num_books {
                for k in 0..config.codes_per_book {
                    let r = rng.random_range(0..z.rows());
                    let mut v = z.row(r)[b * cd..(b + 1) * cd].to_vec();
                    v.iter_mut().for_each(|x| *x += 1e-3 * (rng.random::<f32>() - 0.5));
                    model.set_code(b, k, &v);
                }
            }
        }

        let steps_per_epoch = corpus.len().div_ceil(batch);
        let total_steps = (steps_per_epoch * config.epochs) as f64;
        let base = AdamConfig { lr: config.lr, ..AdamConfig::default() };
        let mut adam = Adam::new(base, &model.store);
        let mut log = Vec::with_capacity(config.epochs);
        let mut step = 0usize;
        for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            let mut usage = vec![vec![0usize; config.codes_per_book]; config.num_books];
            let (mut sum_loss, mut sum_rec, mut sum_cb, mut sum_cm) = (0.0, 0.0, 0.0, 0.0);
            let mut last_z: Option<Tensor<f32>> = None;
            for chunk in order.chunks(batch) {
                let x = make_batch(chunk)?;
                let bsz = chunk.len() as f64;
                let (grads, parts, z_val) = {
                    let mut g = Graph::with_params(&model.store);
                    let xv = g.constant(x);
                    let p = model.pass(&mut g, xv, t_len, Some(&mut rng))?;
                    let diff = g.sub(p.x_hat, xv)?;
                    let rec = g.sum_squares(diff);
                    let zd = g.detach(p.z);
                    let d1 = g.sub(zd, p.e)?;
                    let cb = g.sum_squares(d1);
                    let ed = g.detach(p.e);
                    let d2 = g.sub(p.z, ed)?;
                    let cm = g.sum_squares(d2);
                    let cm_w = g.scale(cm, config.beta);
                    let s1 = g.add(rec, cb)?;
                    let s2 = g.add(s1, cm_w)?;
                    let loss = g.scale(s2, 1.0 / bsz);
                    g.backward(loss)?;
                    for (b, codes) in p.codes.iter().enumerate() {
                        for &k in codes {
                            usage[b][k] += 1;
                        }
                    }
                    let parts = [rec, cb, cm, loss].map(|v| g.value(v).item() as f64);
                    (g.param_grads(), parts, g.value(p.z).clone())
                };
                let progress = step as f64 / total_steps;
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                adam.config.lr = config.lr * (config.lr_final_fraction + (1.0 - config.lr_final_fraction) * cosine);
                adam.step(&mut model.store, &grads);
                step += 1;
                sum_rec += parts[0];
                sum_cb += parts[1];
                sum_cm += parts[2];
                sum_loss += parts[3] * bsz;
                last_z = Some(z_val);
            }
            let n = corpus.len() as f64;
            let mut reseeded = 0;
            if epoch < config.epochs {
                if let Some(z) = &last_z {
                    for (b, counts) in usage.iter().enumerate() {
                        for (k, &c) in counts.iter().enumerate() {
                            if c == 0 {
                                let r = rng.random_range(0..z.rows());
                                let mut v = z.row(r)[b * cd..(b + 1) * cd].to_vec();
                                v.iter_mut().for_each(|x| *x += 1e-3 * (rng.random::<f32>() - 0.5));
                                model.set_code(b, k, &v);
                                reseeded += 1;
                            }
                        }
                    }
                }
            }
            let entry = TokenizerEpoch {
                epoch,
                loss: sum_loss / n,
                recon: sum_rec / n,
                codebook: sum_cb / n,
                commit: sum_cm / n,
                usage: usage
                    .iter()
                    .map(|c| c.iter().filter(|&&u| u > 0).count() as f64 / config.codes_per_book as f64)
                    .collect(),
                reseeded,
            };
            info!(
                "tokenizer epoch {epoch}: loss {:.4} recon {:.4} usage {:?} reseeded {reseeded}",
                entry.loss, entry.recon, entry.usage
            );
            log.push(entry);
        }
        debug!("tokenizer trained with {} parameters", model.store.num_scalars());
        Ok((model, log))
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
        let (technique, config) = read_meta::<TokenizerConfig>(c, KIND)?;
        let joints = c
            .get("meta/num_joints")
            .and_then(|r| r.data.first())
            .map(|&x| x as usize)
            .ok_or_else(|| ModelError::State("tokenizer checkpoint lacks meta/num_joints".into()))?;
        let get = |name: &str| {
            c.get(name)
                .map(|r| r.data.clone())
                .ok_or_else(|| ModelError::State(format!("tokenizer checkpoint lacks {name}")))
        };
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

/// Reads the kind, technique and JSON config records shared by every model checkpoint.
pub(crate) fn read_meta<C: for<'de> Deserialize<'de>>(c: &Checkpoint, kind: &str) -> Result<(String, C)> {
    let found = c.get_text("meta/kind").unwrap_or_default();
    if found != kind {
        return Err(ModelError::State(format!("expected a {kind} checkpoint, found {found:?}")));
    }
    let technique = c
        .get_text("meta/technique")
        .ok_or_else(|| ModelError::State("checkpoint lacks meta/technique".into()))?;
    let cfg = c
        .get_text("meta/config")
        .ok_or_else(|| ModelError::State("checkpoint lacks meta/config".into()))?;
    let config = serde_json::from_str(&cfg).map_err(|e| ModelError::State(format!("checkpoint config: {e}")))?;
    Ok((technique, config))
}

/// Reconstruction error of `pred` against `reference`, in position units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionError {
    /// MPJPE after aligning the root joints frame by frame.
    pub mpjpe: f64,
    /// MPJPE on global joint positions.
    pub global_mpjpe: f64,
    /// Mean distance joints of `reference` travel between consecutive frames.
    pub step: f64,
    /// The same, measured relative to the root joint.
    pub local_step: f64,
}

pub fn reconstruction_error<S: Real>(
    pred: &MotionClip<S>,
    reference: &MotionClip<S>,
    skeleton: &skilledit_core::Skeleton<S>,
) -> Result<ReconstructionError> {
    use skilledit_core::fk::forward_kinematics;
    use skilledit_core::rotation::{norm3, sub3, Vec3};
    if pred.len() != reference.len() || pred.num_joints != reference.num_joints {
        return Err(ModelError::InvalidArgument("clips differ in shape".into()));
    }
    let a = forward_kinematics(pred, skeleton)?;
    let b = forward_kinematics(reference, skeleton)?;
    let root = skeleton.root();
    let (t_len, j) = (b.num_frames, b.num_joints);
    let dist = |p: Vec3<S>, q: Vec3<S>| norm3(sub3(p, q)).to_f64_lossless();
    let local = |x: &skilledit_core::fk::JointPositions<S>, t: usize, k: usize| sub3(x.get(t, k), x.get(t, root));
    let (mut err, mut global, mut step, mut local_step) = (0.0, 0.0, 0.0, 0.0);
    for t in 0..t_len {
        for k in 0..j {
            err += dist(local(&a, t, k), local(&b, t, k));
            global += dist(a.get(t, k), b.get(t, k));
            if t > 0 {
                step += dist(b.get(t, k), b.get(t - 1, k));
                local_step += dist(local(&b, t, k), local(&b, t - 1, k));
            }
        }
    }
    let (n, m) = ((t_len * j) as f64, ((t_len - 1).max(1) * j) as f64);
    Ok(ReconstructionError { mpjpe: err / n, global_mpjpe: global / n, step: step / m, local_step: local_step / m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use skilledit_core::PoseFrame;

    fn tiny_config() -> TokenizerConfig {
        TokenizerConfig {
            codes_per_book: 8,
            latent_dim: 8,
            model_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            hidden_dim: 16,
            max_seq_len: 16,
            batch_size: 4,
            epochs: 2,
            ..TokenizerConfig::desk()
        }
    }

    fn clip(seed: u64, t: usize) -> MotionClip<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| {
                let mut f = PoseFrame::zeros(2);
                f.root_translation = [rng.random(), rng.random(), rng.random()];
                f.joint_rotations.iter_mut().for_each(|x| *x = rng.random::<f64>() - 0.5);
                f
            })
            .collect();
        MotionClip::new(30.0, 2, frames).unwrap()
    }

    fn model() -> Tokenizer {
        let corpus: Vec<_> = (0..4).map(|s| clip(s, 10)).collect();
        let stats = FeatureStats::fit_clips(&corpus).unwrap();
        Tokenizer::new(tiny_config(), 2, stats, "t", 5).unwrap()
    }

    #[test]
    fn vq_loss_examples() {
        assert_eq!(vq_loss(&[1.0], &[1.0], &[0.5], &[0.5], 0.25), 0.0);
        assert_eq!(vq_loss(&[0.0], &[1.0], &[0.3], &[0.3], 7.0), 1.0);
        assert_eq!(vq_loss(&[2.0], &[2.0], &[1.0], &[0.0], 0.25), 1.25);
    }

    #[test]
    fn nearest_code_examples() {
        let book = [0.0f32, 1.0];
        assert_eq!(nearest_code(&book, 1, &[0.4]), 0);
        assert_eq!(nearest_code(&book, 1, &[0.6]), 1);
        assert_eq!(nearest_code(&book, 1, &[0.5]), 0);
        assert_eq!(nearest_code(&book, 1, &[1.0]), 1);
    }

    #[test]
    fn exact_code_quantizes_to_itself() {
        let m = model();
        let cd = m.config.code_dim();
        let mut z = Vec::new();
        for b in 0..2 {
            z.extend_from_slice(&m.codebook(b).data()[3 * cd..4 * cd]);
        }
        let zt = Tensor::matrix(1, 8, z.clone()).unwrap();
        let (tok, q) = m.quantize(&zt).unwrap();
        assert_eq!(tok, vec![vec![3, 3]]);
        assert_eq!(q.data(), z.as_slice());
        let (tok2, _) = m.quantize(&q).unwrap();
        assert_eq!(tok2, tok);
    }

    #[test]
    fn encoder_is_causal_bitwise() {
        let m = model();
        let a = clip(9, 10);
        let mut b = a.clone();
        b.frames[9].joint_rotations[2] += 0.3;
        b.frames[9].root_translation[0] -= 1.0;
        let (za, zb) = (m.encode(&a).unwrap(), m.encode(&b).unwrap());
        for r in 0..9 {
            assert_eq!(za.row(r), zb.row(r));
        }
        assert_ne!(za.row(9), zb.row(9));
    }

    #[test]
    fn decoder_is_causal_bitwise() {
        let m = model();
        let tokens: Vec<Vec<usize>> = (0..10).map(|t| vec![t % 8, (3 * t) % 8]).collect();
        let mut changed = tokens.clone();
        changed[6] = vec![0, 0];
        let (a, b) = (m.decode(&tokens).unwrap(), m.decode(&changed).unwrap());
        assert_eq!(a[..6], b[..6]);
        assert_ne!(a[6], b[6]);
        assert!(a.iter().flatten().all(|x| x.is_finite()));
        assert_eq!((a.len(), a[0].len()), (10, 12));
    }

    #[test]
    fn reconstruction_error_separates_root_drift() {
        let sk = skilledit_core::Skeleton::new(
            vec![None, Some(0)],
            vec![[0.0; 3], [0.0, 0.5, 0.0]],
            vec![],
            skilledit_core::Axis::Y,
        )
        .unwrap();
        let a = clip(4, 10);
        let same = reconstruction_error(&a, &a, &sk).unwrap();
        assert_eq!((same.mpjpe, same.global_mpjpe), (0.0, 0.0));
        assert!(same.step > 0.0 && same.local_step > 0.0);
        let mut b = a.clone();
        for f in &mut b.frames {
            f.root_translation[0] += 0.5;
        }
        let e = reconstruction_error(&b, &a, &sk).unwrap();
        assert!(e.mpjpe < 1e-12);
        assert!((e.global_mpjpe - 0.5).abs() < 1e-12);
        assert!(reconstruction_error(&a, &clip(4, 9), &sk).is_err());
    }

    #[test]
    fn bad_inputs() {
        let m = model();
        assert!(m.decode(&[vec![8, 0]]).is_err());
        assert!(m.encode(&clip(1, 17)).is_err());
        assert!(Tokenizer::train(&[], &tiny_config(), "t", 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_determinism() {
        let corpus: Vec<_> = (0..6).map(|s| clip(s, 10)).collect();
        let (a, log) = Tokenizer::train(&corpus, &tiny_config(), "jump", 3).unwrap();
        let (b, _) = Tokenizer::train(&corpus, &tiny_config(), "jump", 3).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());
        let back = Tokenizer::from_checkpoint(&a.to_checkpoint()).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes(), a.to_checkpoint().to_bytes());
        assert_eq!(back.tokenize(&corpus[0]).unwrap(), a.tokenize(&corpus[0]).unwrap());
        assert_eq!(back.technique, "jump");
    }
}
