//! Linear, layer norm and pre-norm transformer stacks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::graph::{AttnMask, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for weight matrices.
pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Element>(store: &mut ParamStore<S>, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = store.add_normal(format!("{name}.w"), &[in_dim, out_dim], INIT_STD, rng);
        let b = store.add_filled(format!("{name}.b"), &[1, out_dim], 0.0);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<S: Element>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Element>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add_filled(format!("{name}.gamma"), &[1, dim], 1.0);
        let beta = store.add_filled(format!("{name}.beta"), &[1, dim], 0.0);
        Self { gamma, beta }
    }

    pub fn forward<S: Element>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub causal: bool,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(NnError::InvalidArgument(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 || self.hidden_dim == 0 || self.max_seq_len == 0 {
            return Err(NnError::InvalidArgument("layers, hidden_dim and max_seq_len must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Learned absolute positions followed by pre-norm residual blocks and a
/// final layer norm.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
}

/// Dropout randomness for a training step; `None` means inference.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

impl Transformer {
    pub fn new<S: Element>(store: &mut ParamStore<S>, name: &str, config: TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let pos = store.add_normal(format!("{name}.pos"), &[config.max_seq_len, d], INIT_STD, rng);
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.block{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d),
                    q: Linear::new(store, &format!("{p}.q"), d, d, rng),
                    k: Linear::new(store, &format!("{p}.k"), d, d, rng),
                    v: Linear::new(store, &format!("{p}.v"), d, d, rng),
                    o: Linear::new(store, &format!("{p}.o"), d, d, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d),
                    ff1: Linear::new(store, &format!("{p}.ff1"), d, config.hidden_dim, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), config.hidden_dim, d, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d);
        Ok(Self { config, pos, blocks, ln_f })
    }

    fn dropout<S: Element>(&self, g: &mut Graph<'_, S>, x: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        let p = self.config.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let shape = g.value(x).shape().to_vec();
                let keep = S::of(1.0 / (1.0 - p));
                let m = Tensor::from_fn(&shape, |_| if r.random::<f64>() < p { S::zero() } else { keep });
                let m = g.constant(m);
                g.mul(x, m)
            }
            _ => Ok(x),
        }
    }

    /// Adds the learned position embedding of `row % seq_len` to every row.
    pub fn add_positions<S: Element>(&self, g: &mut Graph<'_, S>, x: Var, seq_len: usize) -> Result<Var> {
        let rows = g.value(x).rows();
        let positions: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
        let table = g.param(self.pos);
        let pos = g.gather(table, &positions)?;
        g.add(x, pos)
    }

    /// Runs the blocks on input that already carries position embeddings.
    pub fn forward_positioned<S: Element>(
        &self,
        g: &mut Graph<'_, S>,
        h: Var,
        seq_len: usize,
        mask: &AttnMask,
        rng: DropoutRng<'_>,
    ) -> Result<Var> {
        self.check_input(g, h, seq_len)?;
        self.blocks_forward(g, h, seq_len, mask, rng)
    }

    /// `x` is `[batch * seq_len, model_dim]`; the mask defaults to the
    /// configured causal or full attention.
    pub fn forward<S: Element>(&self, g: &mut Graph<'_, S>, x: Var, seq_len: usize, rng: DropoutRng<'_>) -> Result<Var> {
        let mask = if self.config.causal { AttnMask::Causal } else { AttnMask::Full };
        self.forward_masked(g, x, seq_len, &mask, rng)
    }

    pub fn forward_masked<S: Element>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        seq_len: usize,
        mask: &AttnMask,
        rng: DropoutRng<'_>,
    ) -> Result<Var> {
        self.check_input(g, x, seq_len)?;
        let h = self.add_positions(g, x, seq_len)?;
        self.blocks_forward(g, h, seq_len, mask, rng)
    }

    fn check_input<S: Element>(&self, g: &Graph<'_, S>, x: Var, seq_len: usize) -> Result<()> {
        let c = &self.config;
        if seq_len > c.max_seq_len {
            return Err(NnError::InvalidArgument(format!(
                "sequence length {seq_len} exceeds max_seq_len {}",
                c.max_seq_len
            )));
        }
        let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
        if cols != c.model_dim || seq_len == 0 || rows % seq_len != 0 {
            return Err(NnError::Shape(format!(
                "input {rows}x{cols} is not [batch * {seq_len}, {}]",
                c.model_dim
            )));
        }
        Ok(())
    }

    fn blocks_forward<S: Element>(
        &self,
        g: &mut Graph<'_, S>,
        mut h: Var,
        seq_len: usize,
        mask: &AttnMask,
        mut rng: DropoutRng<'_>,
    ) -> Result<Var> {
        let c = &self.config;
        for b in &self.blocks {
            let a = b.ln1.forward(g, h)?;
            let q = b.q.forward(g, a)?;
            let k = b.k.forward(g, a)?;
            let v = b.v.forward(g, a)?;
            let att = g.attention(q, k, v, c.heads, seq_len, mask)?;
            let o = b.o.forward(g, att)?;
            let o = self.dropout(g, o, &mut rng)?;
            h = g.add(h, o)?;
            let f = b.ln2.forward(g, h)?;
            let f = b.ff1.forward(g, f)?;
            let f = g.gelu(f);
            let f = b.ff2.forward(g, f)?;
            let f = self.dropout(g, f, &mut rng)?;
            h = g.add(h, f)?;
        }
        self.ln_f.forward(g, h)
    }
}
