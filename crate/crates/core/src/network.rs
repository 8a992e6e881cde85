//! Deep ReLU regression network with a fixed output layer.
//!
//! `f(W, V, x) = V σ(W_L σ(… σ(W_1 x)))` with squared loss. Only the hidden
//! layers `W_1..W_L` are trained; `V` is drawn once at initialization and
//! shared (behind an `Arc`) by every copy of the parameters.
//!
//! Batches are stored column-per-example: inputs are `d×n`, hidden
//! activations `m×n`, outputs `o×n`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, Matrix, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Hidden-layer count `L`.
    pub layers: usize,
    /// Neurons per hidden layer `m`.
    pub width: usize,
    /// Input dimension `d`.
    pub input_dim: usize,
    /// Output dimension `o`.
    pub output_dim: usize,
    /// Defaults to `sqrt(2/m)`.
    #[serde(default)]
    pub init_hidden_std: Option<f64>,
    /// Defaults to `sqrt(1/o)`.
    #[serde(default)]
    pub init_output_std: Option<f64>,
}

impl NetConfig {
    pub fn new(layers: usize, width: usize, input_dim: usize, output_dim: usize) -> Self {
        Self {
            layers,
            width,
            input_dim,
            output_dim,
            init_hidden_std: None,
            init_output_std: None,
        }
    }

    pub fn hidden_std(&self) -> f64 {
        self.init_hidden_std
            .unwrap_or_else(|| (2.0 / self.width as f64).sqrt())
    }

    pub fn output_std(&self) -> f64 {
        self.init_output_std
            .unwrap_or_else(|| (1.0 / self.output_dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("width", self.width),
            ("input_dim", self.input_dim),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("net.{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("init_hidden_std", self.init_hidden_std),
            ("init_output_std", self.init_output_std),
        ] {
            if let Some(s) = v {
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "net.{name} must be finite and >= 0"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Expected shape of hidden layer `l` (0-based).
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        if l == 0 {
            (self.width, self.input_dim)
        } else {
            (self.width, self.width)
        }
    }
}

/// Hidden weights `(W_1, …, W_L)` plus the frozen output layer `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    hidden: Vec<Matrix>,
    output: Arc<Matrix>,
}

impl Params {
    /// Checks that the layers chain: `W_1` is `m×d`, later layers `m×m`,
    /// and `V` is `o×m`.
    pub fn new(hidden: Vec<Matrix>, output: Matrix) -> Result<Self> {
        Self::with_shared_output(hidden, Arc::new(output))
    }

    pub fn with_shared_output(hidden: Vec<Matrix>, output: Arc<Matrix>) -> Result<Self> {
        let first = hidden
            .first()
            .ok_or_else(|| Error::ShapeMismatch("at least one hidden layer required".into()))?;
        let m = first.rows();
        for (l, w) in hidden.iter().enumerate().skip(1) {
            if w.shape() != (m, m) {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} is {}x{}, expected {m}x{m}",
                    l + 1,
                    w.rows(),
                    w.cols()
                )));
            }
        }
        if output.cols() != m {
            return Err(Error::ShapeMismatch(format!(
                "output layer has {} columns, expected {m}",
                output.cols()
            )));
        }
        Ok(Self { hidden, output })
    }

    pub fn hidden(&self) -> &[Matrix] {
        &self.hidden
    }

    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn shared_output(&self) -> &Arc<Matrix> {
        &self.output
    }

    pub fn layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn width(&self) -> usize {
        self.hidden[0].rows()
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.output.rows()
    }

    /// Same `V`, new hidden weights.
    pub fn replace_hidden(&self, hidden: Vec<Matrix>) -> Result<Self> {
        let p = Self::with_shared_output(hidden, Arc::clone(&self.output))?;
        for (l, (a, b)) in p.hidden.iter().zip(&self.hidden).enumerate() {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} changed shape",
                    l + 1
                )));
            }
        }
        Ok(p)
    }

    /// `W_l ← W_l − eta · g_l` for every layer.
    pub fn descend(&mut self, eta: f64, grad: &ParamGrad) -> Result<()> {
        self.check_grad(grad)?;
        for (w, g) in self.hidden.iter_mut().zip(&grad.layers) {
            w.axpy(-eta, g)?;
        }
        Ok(())
    }

    fn check_grad(&self, grad: &ParamGrad) -> Result<()> {
        if grad.layers.len() != self.hidden.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient has {} layers, params have {}",
                grad.layers.len(),
                self.hidden.len()
            )));
        }
        Ok(())
    }

    /// Hidden layers of `self − other` as a gradient-shaped tuple.
    pub fn difference(&self, other: &Params) -> Result<ParamGrad> {
        if self.hidden.len() != other.hidden.len() {
            return Err(Error::ShapeMismatch("layer count differs".into()));
        }
        let layers = self
            .hidden
            .iter()
            .zip(&other.hidden)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_>>()?;
        Ok(ParamGrad { layers })
    }

    /// `self + delta` on the hidden layers.
    pub fn offset(&self, delta: &ParamGrad) -> Result<Params> {
        let mut p = self.clone();
        p.check_grad(delta)?;
        for (w, d) in p.hidden.iter_mut().zip(&delta.layers) {
            w.axpy(1.0, d)?;
        }
        Ok(p)
    }
}

/// Per-example record of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `z_l = W_l f_{l-1}` for `l = 1..=L`.
    pub preactivations: Vec<Vec<f64>>,
    /// `f_0 = x, f_1, …, f_L`.
    pub activations: Vec<Vec<f64>>,
    /// `D_l[r] = (z_l[r] >= 0)`.
    pub patterns: Vec<Vec<bool>>,
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// Recomputes the output as `V D_L W_L ⋯ D_1 W_1 x` from the stored masks.
    pub fn reconstruct(&self, p: &Params) -> Vec<f64> {
        let mut h = self.activations[0].clone();
        for (w, mask) in p.hidden().iter().zip(&self.patterns) {
            h = w
                .matvec(&h)
                .expect("trace built from these params")
                .into_iter()
                .zip(mask)
                .map(|(z, &on)| if on { z } else { 0.0 })
                .collect();
        }
        p.output()
            .matvec(&h)
            .expect("trace built from these params")
    }
}

/// Gradient tuple, one matrix per hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub layers: Vec<Matrix>,
}

impl ParamGrad {
    pub fn zeros_like(p: &Params) -> Self {
        Self {
            layers: p
                .hidden()
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
        }
    }

    /// `Σ_l ‖g_l‖²_F`.
    pub fn frobenius_sq(&self) -> f64 {
        self.layers.iter().map(Matrix::frobenius_sq).sum()
    }

    /// `Σ_l ⟨a_l, b_l⟩`.
    pub fn inner(&self, other: &ParamGrad) -> Result<f64> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("layer count differs".into()));
        }
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.inner(b))
            .sum()
    }

    pub fn sub(&self, other: &ParamGrad) -> Result<ParamGrad> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("layer count differs".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_>>()?;
        Ok(ParamGrad { layers })
    }

    pub fn add_assign(&mut self, other: &ParamGrad) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch("layer count differs".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.axpy(1.0, b)?;
        }
        Ok(())
    }

    #[must_use]
    pub fn scale(&self, c: f64) -> ParamGrad {
        ParamGrad {
            layers: self.layers.iter().map(|g| g.scale(c)).collect(),
        }
    }

    /// Largest per-layer spectral norm.
    pub fn max_spectral_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| {
                g.spectral_norm(
                    crate::numerics::SPECTRAL_ITERS,
                    crate::numerics::SPECTRAL_TOL,
                )
            })
            .fold(0.0, f64::max)
    }
}

/// Hidden ~ `N(0, hidden_std²)`, then `V ~ N(0, output_std²)`, both drawn
/// from `rng` in that order.
pub fn init_params(cfg: &NetConfig, rng: &mut RngStream) -> Result<Params> {
    cfg.validate()?;
    let hidden_std = cfg.hidden_std();
    let hidden = (0..cfg.layers)
        .map(|l| {
            let (r, c) = cfg.layer_shape(l);
            gaussian_matrix(r, c, hidden_std, rng)
        })
        .collect();
    let output = gaussian_matrix(cfg.output_dim, cfg.width, cfg.output_std(), rng);
    Params::new(hidden, output)
}

/// Forward pass over a batch held column-per-example.
struct BatchTrace {
    /// `z_l`, each `m×n`.
    pre: Vec<Matrix>,
    /// `f_0..f_L`; `f_0` is the input batch.
    acts: Vec<Matrix>,
    /// `o×n`.
    out: Matrix,
}

fn forward_batch(p: &Params, inputs: &Matrix) -> Result<BatchTrace> {
    if inputs.rows() != p.input_dim() {
        return Err(Error::DimensionMismatch {
            op: "forward",
            left_rows: p.width(),
            left_cols: p.input_dim(),
            right_rows: inputs.rows(),
            right_cols: inputs.cols(),
        });
    }
    let mut pre = Vec::with_capacity(p.layers());
    let mut acts = Vec::with_capacity(p.layers() + 1);
    acts.push(inputs.clone());
    for w in p.hidden() {
        let z = w.matmul(acts.last().expect("nonempty"))?;
        let mut f = z.clone();
        for v in f.as_mut_slice() {
            // σ'(0) = 1 only matters for the mask; the value is 0 either way
            if !(*v >= 0.0) {
                *v = 0.0;
            }
        }
        pre.push(z);
        acts.push(f);
    }
    let out = p.output().matmul(acts.last().expect("nonempty"))?;
    Ok(BatchTrace { pre, acts, out })
}

fn check_targets(p: &Params, inputs: &Matrix, targets: &Matrix) -> Result<()> {
    if targets.rows() != p.output_dim() || targets.cols() != inputs.cols() {
        return Err(Error::DimensionMismatch {
            op: "targets",
            left_rows: p.output_dim(),
            left_cols: inputs.cols(),
            right_rows: targets.rows(),
            right_cols: targets.cols(),
        });
    }
    if inputs.cols() == 0 {
        return Err(Error::EmptyShard);
    }
    Ok(())
}

/// `(1/n) Σ_j ½‖f_j − y_j‖²`, per-example terms summed in column order.
fn batch_loss(out: &Matrix, targets: &Matrix) -> f64 {
    let n = out.cols();
    let mut per_example = vec![0.0; n];
    for k in 0..out.rows() {
        for (j, (f, y)) in out.row(k).iter().zip(targets.row(k)).enumerate() {
            per_example[j] += (f - y) * (f - y);
        }
    }
    per_example.iter().map(|s| 0.5 * s).sum::<f64>() / n as f64
}

/// Loss and gradient for a batch, via `g_L = D_L ⊙ Vᵀr`,
/// `g_l = D_l ⊙ W_{l+1}ᵀ g_{l+1}`, `∇W_l = (1/n) g_l f_{l-1}ᵀ`.
fn batch_loss_and_gradient(
    p: &Params,
    inputs: &Matrix,
    targets: &Matrix,
) -> Result<(f64, ParamGrad)> {
    check_targets(p, inputs, targets)?;
    let trace = forward_batch(p, inputs)?;
    let loss = batch_loss(&trace.out, targets);
    let n = inputs.cols() as f64;

    let residual = trace.out.sub(targets)?;
    let mut layers = vec![Matrix::zeros(0, 0); p.layers()];
    let mut upstream = p.output().matmul_tn(&residual)?;
    for l in (0..p.layers()).rev() {
        apply_mask(&mut upstream, &trace.pre[l]);
        let mut g = upstream.matmul_nt(&trace.acts[l])?;
        for v in g.as_mut_slice() {
            *v /= n;
        }
        if l > 0 {
            upstream = p.hidden()[l].matmul_tn(&upstream)?;
        }
        layers[l] = g;
    }
    Ok((loss, ParamGrad { layers }))
}

fn apply_mask(g: &mut Matrix, pre: &Matrix) {
    for (v, z) in g.as_mut_slice().iter_mut().zip(pre.as_slice()) {
        if !(*z >= 0.0) {
            *v = 0.0;
        }
    }
}

/// Single-example forward pass with full trace.
pub fn forward(p: &Params, x: &[f64]) -> Result<ForwardTrace> {
    let trace = forward_batch(p, &Matrix::column(x))?;
    let col = |m: &Matrix| m.col_to_vec(0);
    Ok(ForwardTrace {
        patterns: trace
            .pre
            .iter()
            .map(|z| z.as_slice().iter().map(|&v| v >= 0.0).collect())
            .collect(),
        preactivations: trace.pre.iter().map(col).collect(),
        activations: trace.acts.iter().map(col).collect(),
        output: col(&trace.out),
    })
}

/// Network outputs for every column of `inputs`.
pub fn predict(p: &Params, inputs: &Matrix) -> Result<Matrix> {
    Ok(forward_batch(p, inputs)?.out)
}

pub fn loss(p: &Params, shard: &Shard) -> Result<f64> {
    check_targets(p, shard.inputs(), shard.targets())?;
    let trace = forward_batch(p, shard.inputs())?;
    Ok(batch_loss(&trace.out, shard.targets()))
}

pub fn gradient(p: &Params, shard: &Shard) -> Result<ParamGrad> {
    Ok(loss_and_gradient(p, shard)?.1)
}

/// Loss and gradient from one forward pass.
pub fn loss_and_gradient(p: &Params, shard: &Shard) -> Result<(f64, ParamGrad)> {
    batch_loss_and_gradient(p, shard.inputs(), shard.targets())
}

/// Gradient over `batch` (indices into the shard) with weight `1/|batch|`.
/// Indices are processed in ascending order, so the full index set
/// reproduces [`gradient`] exactly.
pub fn stochastic_gradient(p: &Params, shard: &Shard, batch: &[usize]) -> Result<ParamGrad> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = shard.len();
    if let Some(&index) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index, len: n });
    }
    let mut sorted = batch.to_vec();
    sorted.sort_unstable();
    let inputs = select_columns(shard.inputs(), &sorted);
    let targets = select_columns(shard.targets(), &sorted);
    Ok(batch_loss_and_gradient(p, &inputs, &targets)?.1)
}

pub(crate) fn select_columns(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), cols.len());
    for r in 0..m.rows() {
        let src = m.row(r);
        for (dst, &c) in out.row_mut(r).iter_mut().zip(cols) {
            *dst = src[c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;

    fn tiny_params() -> Params {
        Params::new(
            vec![Matrix::from_rows(&[[1.0, 0.0], [0.0, -1.0]])],
            Matrix::from_rows(&[[1.0, 1.0]]),
        )
        .unwrap()
    }

    fn shard_from(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Shard {
        let ds = Dataset::unnormalized(xs.to_vec(), ys.to_vec(), None).unwrap();
        Shard::new(&ds, (0..xs.len()).collect(), 0).unwrap()
    }

    #[test]
    fn hand_evaluated_forward() {
        let t = forward(&tiny_params(), &[1.0, 0.0]).unwrap();
        assert_eq!(t.activations[1], vec![1.0, 0.0]);
        assert_eq!(t.output, vec![1.0]);
        // z_2 = 0 counts as active
        assert_eq!(t.patterns[0], vec![true, true]);
    }

    #[test]
    fn zero_hidden_weights_give_zero_output_and_active_patterns() {
        let cfg = NetConfig {
            init_hidden_std: Some(0.0),
            ..NetConfig::new(3, 5, 4, 2)
        };
        let p = init_params(&cfg, &mut RngStream::new(1, 1)).unwrap();
        assert!(p
            .hidden()
            .iter()
            .all(|w| w.as_slice().iter().all(|&v| v == 0.0)));
        let t = forward(&p, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(t.output, vec![0.0, 0.0]);
        assert!(t.patterns.iter().flatten().all(|&on| on));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = NetConfig::new(2, 8, 3, 2);
        let a = init_params(&cfg, &mut RngStream::new(5, 1)).unwrap();
        let b = init_params(&cfg, &mut RngStream::new(5, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_row_norm_bookkeeping() {
        let cfg = NetConfig::new(1, 10_000, 10, 1);
        let p = init_params(&cfg, &mut RngStream::new(11, 1)).unwrap();
        let w = &p.hidden()[0];
        let mean_sq = (0..w.rows())
            .map(|r| w.row(r).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            / w.rows() as f64;
        let expected = 2.0 * 10.0 / 10_000.0;
        assert!(
            (mean_sq / expected - 1.0).abs() < 0.1,
            "{mean_sq} vs {expected}"
        );
    }

    #[test]
    fn positive_homogeneity_in_input() {
        let p = init_params(&NetConfig::new(3, 16, 4, 3), &mut RngStream::new(2, 1)).unwrap();
        let x = [0.1, -0.7, 0.4, 0.2];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = forward(&p, &x).unwrap().output;
        let b = forward(&p, &x2).unwrap().output;
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(2.0 * u, *v);
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        assert!(forward(&tiny_params(), &[1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn loss_definition_plug_in() {
        let p = Params::new(vec![Matrix::identity(2)], Matrix::identity(2)).unwrap();
        let s = shard_from(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]);
        assert_eq!(loss(&p, &s).unwrap(), 0.5);
        let exact = shard_from(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]]);
        assert_eq!(loss(&p, &exact).unwrap(), 0.0);
        let g = gradient(&p, &exact).unwrap();
        assert_eq!(g.frobenius_sq(), 0.0);
    }

    #[test]
    fn one_neuron_gradient_matches_hand_derivative() {
        // ∂/∂w ½(v σ(w·x) − y)² = (v σ(w·x) − y) v 1[w·x ≥ 0] xᵀ
        let w = [0.3, -0.2];
        let v = 1.7;
        let x = [0.6, 0.8];
        let y = 0.25;
        let p = Params::new(vec![Matrix::from_rows(&[w])], Matrix::from_rows(&[[v]])).unwrap();
        let s = shard_from(&[x.to_vec()], &[vec![y]]);
        let z: f64 = w[0] * x[0] + w[1] * x[1];
        let r = v * z.max(0.0) - y;
        let g = gradient(&p, &s).unwrap();
        for c in 0..2 {
            let expected = r * v * if z >= 0.0 { 1.0 } else { 0.0 } * x[c];
            assert!((g.layers[0].get(0, c) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn stochastic_full_batch_equals_gradient() {
        let p = init_params(&NetConfig::new(2, 8, 3, 2), &mut RngStream::new(4, 1)).unwrap();
        let xs: Vec<Vec<f64>> = (0..5).map(|i| vec![1.0, i as f64 * 0.1, -0.3]).collect();
        let ys: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0]).collect();
        let s = shard_from(&xs, &ys);
        let full = gradient(&p, &s).unwrap();
        let st = stochastic_gradient(&p, &s, &[4, 2, 0, 1, 3]).unwrap();
        assert_eq!(full, st);
        assert!(matches!(
            stochastic_gradient(&p, &s, &[]),
            Err(Error::EmptyBatch)
        ));
        assert!(matches!(
            stochastic_gradient(&p, &s, &[5]),
            Err(Error::IndexOutOfRange { index: 5, len: 5 })
        ));
    }
}
