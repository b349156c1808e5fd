//! Central finite-difference checks of analytic gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradient norms below this are compared absolutely.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, floor)` per checked tensor.
    pub rel_errors: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nn).max(FLOOR)
}

/// Reduces a non-scalar output with fixed pseudo-random weights so that
/// every output element contributes to the checked scalar.
fn reduce(g: &mut Graph<'_, f64>, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.random::<f64>() * 2.0 - 1.0));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Checks the gradient of `build(inputs)` with respect to every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone().with_grad(grad))).collect();
        let out = build(&mut g, &vars)?;
        let loss = reduce(&mut g, out)?;
        let value = g.value(loss).item();
        let mut grads = Vec::new();
        if grad {
            g.backward(loss)?;
            for (v, t) in vars.iter().zip(xs) {
                grads.push(g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut rel_errors = Vec::new();
    for (i, an) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + STEP;
            let (fp, _) = eval(&xs, false)?;
            xs[i].data_mut()[j] = x0 - STEP;
            let (fm, _) = eval(&xs, false)?;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        rel_errors.push(rel_error(an, &numeric));
    }
    Ok(GradCheckReport { rel_errors })
}

/// Checks the gradient of `build` with respect to every parameter in `store`.
pub fn check_params<F>(store: &ParamStore<f64>, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = build(&mut g)?;
        let loss = reduce(&mut g, out)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::with_params(store);
    let out = build(&mut g)?;
    let loss = reduce(&mut g, out)?;
    g.backward(loss)?;
    let grads = g.param_grads();
    let mut rel_errors = Vec::new();
    let mut work = store.clone();
    for i in 0..store.len() {
        let id = ParamId(i);
        let n = store.get(id).len();
        let an = grads.get(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = x0 + STEP;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0 - STEP;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        rel_errors.push(rel_error(&an, &numeric));
    }
    Ok(GradCheckReport { rel_errors })
}

/// Result of checking one op on one random shape.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub shape: String,
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(&[rows, cols], |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Gradient-checks every differentiable graph op on `trials` random small
/// shapes each.
pub fn check_all_ops(trials: usize, seed: u64) -> Result<Vec<OpCheck>> {
    use crate::graph::{AttnMask, Reduction};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |op: &'static str, shape: String, rep: GradCheckReport| {
        out.push(OpCheck { op, shape, max_rel_err: rep.max_rel_err() });
    };
    for _ in 0..trials {
        let (m, k, n) = (rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..7));
        let a = rand_tensor(&mut rng, m, k);
        let b = rand_tensor(&mut rng, k, n);
        record("matmul", format!("{m}x{k} * {k}x{n}"), check_inputs(&[a.clone(), b], |g, v| g.matmul(v[0], v[1]))?);

        let b2 = rand_tensor(&mut rng, m, k);
        let pair = [a.clone(), b2];
        let shape = format!("{m}x{k}");
        record("add", shape.clone(), check_inputs(&pair, |g, v| g.add(v[0], v[1]))?);
        record("sub", shape.clone(), check_inputs(&pair, |g, v| g.sub(v[0], v[1]))?);
        record("mul", shape.clone(), check_inputs(&pair, |g, v| g.mul(v[0], v[1]))?);
        record("scale", shape.clone(), check_inputs(&pair[..1], |g, v| Ok(g.scale(v[0], -1.7)))?);
        record("gelu", shape.clone(), check_inputs(&pair[..1], |g, v| Ok(g.gelu(v[0])))?);
        record("sum", shape.clone(), check_inputs(&pair[..1], |g, v| Ok(g.sum(v[0])))?);
        record("sum_squares", shape.clone(), check_inputs(&pair[..1], |g, v| Ok(g.sum_squares(v[0])))?);

        let bias = rand_tensor(&mut rng, 1, k);
        record("add_bias", shape.clone(), check_inputs(&[a.clone(), bias], |g, v| g.add_bias(v[0], v[1]))?);

        let d = rng.random_range(2..8);
        let x = rand_tensor(&mut rng, m, d);
        let gamma = Tensor::from_fn(&[1, d], |_| 0.5 + rng.random::<f64>());
        let beta = rand_tensor(&mut rng, 1, d);
        record(
            "layer_norm",
            format!("{m}x{d}"),
            check_inputs(&[x.clone(), gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))?,
        );

        let heads = rng.random_range(1..3);
        let dm = heads * rng.random_range(1..3);
        let (batch, t_len) = (rng.random_range(1..3), rng.random_range(1..4));
        let qkv: Vec<Tensor<f64>> = (0..3).map(|_| rand_tensor(&mut rng, batch * t_len, dm)).collect();
        let custom: Vec<bool> = (0..t_len * t_len).map(|i| i % t_len == 0 || rng.random::<bool>()).collect();
        for (name, mask) in [
            ("attention_full", AttnMask::Full),
            ("attention_causal", AttnMask::Causal),
            ("attention_custom", AttnMask::Custom(custom)),
        ] {
            record(
                name,
                format!("batch {batch}, T {t_len}, D {dm}, heads {heads}"),
                check_inputs(&qkv, |g, v| g.attention(v[0], v[1], v[2], heads, t_len, &mask))?,
            );
        }

        let idx: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..m)).collect();
        record("gather", format!("{m}x{k} rows {idx:?}"), check_inputs(std::slice::from_ref(&a), |g, v| g.gather(v[0], &idx))?);

        let start = rng.random_range(0..k);
        let len = rng.random_range(1..=k - start);
        record(
            "slice_cols",
            format!("{m}x{k} cols {start}+{len}"),
            check_inputs(std::slice::from_ref(&a), |g, v| g.slice_cols(v[0], start, len))?,
        );
        let c = rand_tensor(&mut rng, m, n);
        record("concat_cols", format!("{m}x{k} | {m}x{n}"), check_inputs(&[a.clone(), c], |g, v| g.concat_cols(v))?);

        let classes = rng.random_range(2..7);
        let logits = rand_tensor(&mut rng, m + 1, classes).cast::<f64>();
        let targets: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..classes)).collect();
        let mut mask: Vec<bool> = (0..m + 1).map(|_| rng.random::<bool>()).collect();
        mask[0] = true;
        for (name, red) in [("cross_entropy_mean", Reduction::Mean), ("cross_entropy_sum", Reduction::Sum)] {
            record(
                name,
                format!("{}x{classes}", m + 1),
                check_inputs(std::slice::from_ref(&logits), |g, v| g.cross_entropy(v[0], &targets, &mask, red))?,
            );
        }

        let n_logits = rng.random_range(1..=40);
        let bl = rand_tensor(&mut rng, n_logits, 1);
        let labels: Vec<f64> = (0..n_logits).map(|_| f64::from(rng.random::<bool>() as u8)).collect();
        record("bce_with_logits", format!("{n_logits}x1"), check_inputs(&[bl], |g, v| g.bce_with_logits(v[0], &labels))?);

        let rows = m + 3;
        let xs = rand_tensor(&mut rng, rows, k);
        let s0 = rng.random_range(0..rows);
        let segs = vec![(s0, rows), (0, rng.random_range(1..=rows))];
        record(
            "mean_segments",
            format!("{rows}x{k} {segs:?}"),
            check_inputs(std::slice::from_ref(&xs), |g, v| g.mean_segments(v[0], &segs))?,
        );
        let fill = rand_tensor(&mut rng, 1, k);
        let masked: Vec<bool> = (0..rows).map(|_| rng.random::<bool>()).collect();
        record("mask_rows", format!("{rows}x{k}"), check_inputs(&[xs, fill], |g, v| g.mask_rows(v[0], v[1], &masked))?);
    }
    Ok(out)
}
