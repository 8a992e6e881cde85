//! Instrumentation for the quantities that drive Local (S)GD convergence on
//! ReLU networks.
//!
//! Every probe is a pure function of parameter snapshots and shards; none of
//! them mutate training state. Ball and drift quantities use the largest
//! per-layer spectral norm, deviation and gradient quantities use the
//! Frobenius norm of the whole tuple. Drift is also logged in Frobenius form.

use serde::{Deserialize, Serialize};

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::federated::{average, global_loss, mean, Algo, FedState};
use crate::network::{self, NetConfig, ParamGrad, Params};
use crate::numerics::{tuple_ball_distance, tuple_frobenius_sq};

/// Losses at or below this are treated as an exact global minimum.
pub const LOSS_FLOOR: f64 = 1e-30;

/// One instrumentation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub t: usize,
    pub c: usize,
    /// `L(W(t))` at the virtual average.
    pub global_loss: f64,
    /// Statistics of `L_i(W⁽ⁱ⁾(t))` over clients.
    pub client_loss_min: f64,
    pub client_loss_mean: f64,
    pub client_loss_max: f64,
    /// `max_l ‖W_l(t) − W_l(0)‖₂`.
    pub drift_virtual: f64,
    /// `max_i max_l ‖W⁽ⁱ⁾_l(t) − W_l(0)‖₂`.
    pub drift_client_max: f64,
    /// `‖W(t) − W(0)‖_F` over the whole tuple.
    pub drift_virtual_fro: f64,
    pub drift_client_max_fro: f64,
    /// `(1/K) Σ_i ‖W⁽ⁱ⁾(t) − W(t_c)‖²_F`.
    pub deviation_mean_sq: f64,
    /// `(η²τ² + η²τ)·(m·n/d)·L(W(t_c))`, hidden constant excluded.
    pub deviation_bound_rhs: f64,
    pub grad_upper_ratio: f64,
    pub grad_lower_ratio: f64,
    /// Worst local-loss increase over the current window, across clients.
    pub shrinkage_violation: f64,
}

/// Least-squares fit of `ln(loss)` against round index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    /// `exp(slope)`, the per-round contraction factor.
    pub implied_rate: f64,
    /// Number of leading entries used.
    pub points: usize,
}

/// Raw material for the semi-gradient-Lipschitz inequality
/// `lhs ≤ A·sq_dist + B·loss_tilde`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzSample {
    /// `(1/K) Σ_i ‖∇L_i(W) − ∇L_i(W̃)‖²_F`.
    pub lhs: f64,
    /// `(max_l ‖W_l − W̃_l‖₂)²`.
    pub sq_dist: f64,
    /// `L(W̃)`.
    pub loss_tilde: f64,
}

impl LipschitzSample {
    /// `(m·L⁴/d · sq_dist, ω^{2/3}·L⁵·m ln m/d · loss_tilde)`: the two bound
    /// terms with the constants `Ĉ₁, Ĉ₂` factored out.
    pub fn bound_terms(&self, m: usize, d: usize, layers: usize, omega: f64) -> (f64, f64) {
        let (m, d, l) = (m as f64, d as f64, layers as f64);
        (
            m * l.powi(4) / d * self.sq_dist,
            omega.powf(2.0 / 3.0) * l.powi(5) * m * m.ln() / d * self.loss_tilde,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRatios {
    /// `d·‖∇L‖²_F / (m·L)`.
    pub upper: f64,
    /// `d·n²·‖∇L‖²_F / (m·φ·L)`.
    pub lower: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationCheck {
    pub measured: f64,
    pub bound_rhs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub virtual_spectral: f64,
    pub client_max_spectral: f64,
    pub virtual_frobenius: f64,
    pub client_max_frobenius: f64,
}

/// Which shrinkage statement a loss history is checked against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShrinkageRule {
    /// Local loss never increases within a window.
    Monotone,
    /// Local loss stays below `bound_factor · L_i(W(t_c))`.
    Bounded { bound_factor: f64 },
}

/// When to probe, plus data facts the probes need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSchedule {
    /// Probe every this many steps (plus `t = 0` and `t = T`); `None`
    /// disables probing.
    pub every: Option<usize>,
    /// Certified separation of the training inputs.
    pub phi: f64,
}

impl ProbeSchedule {
    pub fn every(steps: usize, phi: f64) -> Self {
        Self {
            every: Some(steps),
            phi,
        }
    }

    pub fn disabled() -> Self {
        Self {
            every: None,
            phi: 0.0,
        }
    }

    pub fn enabled(&self) -> bool {
        self.every.is_some()
    }
}

/// Constants shared by every probe of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeContext {
    pub width: usize,
    pub input_dim: usize,
    pub layers: usize,
    /// Per-client sample count `n`.
    pub n: usize,
    pub phi: f64,
    pub eta: f64,
    pub tau: usize,
    pub algo: Algo,
}

impl ProbeContext {
    pub fn new(
        net: &NetConfig,
        n: usize,
        eta: f64,
        tau: usize,
        algo: Algo,
        schedule: &ProbeSchedule,
    ) -> Self {
        Self {
            width: net.width,
            input_dim: net.input_dim,
            layers: net.layers,
            n,
            phi: schedule.phi,
            eta,
            tau,
            algo,
        }
    }

    pub fn shrinkage_rule(&self) -> ShrinkageRule {
        match self.algo {
            Algo::LocalGd => ShrinkageRule::Monotone,
            Algo::LocalSgd => ShrinkageRule::Bounded {
                bound_factor: sgd_shrinkage_factor(self.phi, self.width, self.n),
            },
        }
    }
}

/// `exp(φ / (m·n^2.5·(ln m)²))`.
pub fn sgd_shrinkage_factor(phi: f64, m: usize, n: usize) -> f64 {
    let log_m = (m as f64).ln();
    (phi / (m as f64 * (n as f64).powf(2.5) * log_m * log_m)).exp()
}

/// Ball radius `c_omega · φ^{3/2} n^{-6} L^{-6} (ln m)^{-3/2}`.
pub fn omega_default(phi: f64, n: usize, layers: usize, m: usize, c_omega: f64) -> f64 {
    c_omega
        * phi.powf(1.5)
        * (n as f64).powi(-6)
        * (layers as f64).powi(-6)
        * (m as f64).ln().powf(-1.5)
}

/// Global loss and gradient, `(1/K) Σ_i` of the client terms.
pub fn global_loss_and_gradient(p: &Params, shards: &[&Shard]) -> Result<(f64, ParamGrad)> {
    let mut losses = Vec::with_capacity(shards.len());
    let mut total = ParamGrad::zeros_like(p);
    for s in shards {
        let (l, g) = network::loss_and_gradient(p, s)?;
        losses.push(l);
        total.add_assign(&g)?;
    }
    let k = shards.len() as f64;
    for g in &mut total.layers {
        for v in g.as_mut_slice() {
            *v /= k;
        }
    }
    Ok((mean(&losses), total))
}

fn ratios_from(loss: f64, grad_sq: f64, m: usize, d: usize, n: usize, phi: f64) -> GradRatios {
    if loss <= LOSS_FLOOR {
        return GradRatios {
            upper: 0.0,
            lower: 0.0,
        };
    }
    let upper = d as f64 * grad_sq / (m as f64 * loss);
    let lower = if phi > 0.0 {
        upper * (n * n) as f64 / phi
    } else {
        0.0
    };
    GradRatios { upper, lower }
}

/// Gradient-norm ratios at `p`. Both are 0 at a zero-loss point, and
/// `lower` is 0 when `phi` is 0 (no certified margin).
pub fn grad_ratios(p: &Params, shards: &[&Shard], n: usize, phi: f64) -> Result<GradRatios> {
    let (loss, grad) = global_loss_and_gradient(p, shards)?;
    Ok(ratios_from(
        loss,
        grad.frobenius_sq(),
        p.width(),
        p.input_dim(),
        n,
        phi,
    ))
}

pub fn lipschitz_sample(
    w: &Params,
    w_tilde: &Params,
    shards: &[&Shard],
) -> Result<LipschitzSample> {
    let dist = tuple_ball_distance(w.hidden(), w_tilde.hidden())?;
    let mut lhs = Vec::with_capacity(shards.len());
    let mut losses = Vec::with_capacity(shards.len());
    for s in shards {
        let g = network::gradient(w, s)?;
        let (l, gt) = network::loss_and_gradient(w_tilde, s)?;
        lhs.push(g.sub(&gt)?.frobenius_sq());
        losses.push(l);
    }
    Ok(LipschitzSample {
        lhs: mean(&lhs),
        sq_dist: dist.max * dist.max,
        loss_tilde: mean(&losses),
    })
}

/// Decomposition of the semi-smoothness inequality for a pair `(Ŵ, W̃)`:
/// the inequality holds with constants `C′, C″` iff
/// `gap ≤ C′·first_order + C″·second_order`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSmoothnessTerms {
    /// `L(W̃) − L(Ŵ) − ⟨∇L(Ŵ), W̃ − Ŵ⟩`.
    pub gap: f64,
    /// `√L(Ŵ) · ω^{1/3} √(m ln m) / √d · ‖W̃ − Ŵ‖`.
    pub first_order: f64,
    /// `(m/d) · ‖W̃ − Ŵ‖²`.
    pub second_order: f64,
}

impl SemiSmoothnessTerms {
    pub fn residual(&self, c1: f64, c2: f64) -> f64 {
        c1 * self.first_order + c2 * self.second_order - self.gap
    }
}

/// `‖W̃ − Ŵ‖` is the largest per-layer spectral norm; the inner product is
/// the entrywise sum over all layers.
pub fn semi_smoothness_terms(
    w_hat: &Params,
    w_tilde: &Params,
    shards: &[&Shard],
    omega: f64,
) -> Result<SemiSmoothnessTerms> {
    let (loss_hat, grad_hat) = global_loss_and_gradient(w_hat, shards)?;
    let loss_tilde = global_loss(w_tilde, shards.iter().copied())?;
    let delta = w_tilde.difference(w_hat)?;
    let dist = tuple_ball_distance(w_tilde.hidden(), w_hat.hidden())?.max;
    let m = w_hat.width() as f64;
    let d = w_hat.input_dim() as f64;
    Ok(SemiSmoothnessTerms {
        gap: loss_tilde - loss_hat - grad_hat.inner(&delta)?,
        first_order: loss_hat.sqrt() * omega.cbrt() * (m * m.ln()).sqrt() / d.sqrt() * dist,
        second_order: m / d * dist * dist,
    })
}

/// RHS − LHS of the semi-smoothness inequality with constants `c1` (`C′`)
/// and `c2` (`C″`); nonnegative when the inequality holds.
pub fn semi_smoothness_residual(
    w_hat: &Params,
    w_tilde: &Params,
    shards: &[&Shard],
    omega: f64,
    c1: f64,
    c2: f64,
) -> Result<f64> {
    Ok(semi_smoothness_terms(w_hat, w_tilde, shards, omega)?.residual(c1, c2))
}

/// Calibrates two nonnegative constants so that
/// `c1·a + c2·b ≥ safety·gap` on every sample `(gap, a, b)`: each term is
/// sized to cover half of the worst scaled gap on its own.
pub fn calibrate_two_term(samples: &[(f64, f64, f64)], safety: f64) -> (f64, f64) {
    let mut c1: f64 = 0.0;
    let mut c2: f64 = 0.0;
    for &(gap, a, b) in samples {
        if gap <= 0.0 {
            continue;
        }
        let target = safety * gap / 2.0;
        match (a > 0.0, b > 0.0) {
            (true, true) => {
                c1 = c1.max(target / a);
                c2 = c2.max(target / b);
            }
            (true, false) => c1 = c1.max(2.0 * target / a),
            (false, true) => c2 = c2.max(2.0 * target / b),
            (false, false) => {}
        }
    }
    (c1, c2)
}

/// Client deviation from the last synchronized model and its bound.
pub fn deviation_check(state: &FedState) -> Result<DeviationCheck> {
    let cfg = state.config();
    let n = state.max_shard_len();
    let w_sync = state.w_sync();
    let deviations = state
        .clients()
        .iter()
        .map(|c| tuple_frobenius_sq(c.params.hidden(), w_sync.hidden()))
        .collect::<Result<Vec<_>>>()?;
    let eta = cfg.eta;
    let tau = cfg.tau as f64;
    let m = w_sync.width() as f64;
    let d = w_sync.input_dim() as f64;
    let bound_rhs =
        (eta * eta * tau * tau + eta * eta * tau) * (m * n as f64 / d) * state.sync_loss()?;
    Ok(DeviationCheck {
        measured: mean(&deviations),
        bound_rhs,
    })
}

/// Worst violation of the shrinkage rule over a window history whose first
/// entry is the loss at the last synchronization.
///
/// * `Monotone`: `max_s (L(s) − L(s−1)) / max(L(s−1), 1e-30)`, 0 for a
///   single-entry history.
/// * `Bounded`: `max_s L(s)/L(0) − bound_factor`.
pub fn shrinkage_check(history: &[f64], rule: ShrinkageRule) -> Result<f64> {
    let first = *history.first().ok_or(Error::EmptyShard)?;
    Ok(match rule {
        ShrinkageRule::Monotone => history
            .windows(2)
            .map(|w| (w[1] - w[0]) / w[0].max(LOSS_FLOOR))
            .fold(
                if history.len() > 1 {
                    f64::NEG_INFINITY
                } else {
                    0.0
                },
                f64::max,
            ),
        ShrinkageRule::Bounded { bound_factor } => {
            let base = first.max(LOSS_FLOOR);
            history
                .iter()
                .map(|l| l / base - bound_factor)
                .fold(f64::NEG_INFINITY, f64::max)
        }
    })
}

/// Ordinary least squares of `ln(loss)` on index. The window ends at the
/// first entry `≤ 1e-30`. `r2` is reported as 0 when the log-losses are
/// constant.
pub fn linear_rate_fit(losses: &[f64]) -> Result<RateFit> {
    let usable = losses
        .iter()
        .position(|&l| !(l > LOSS_FLOOR))
        .unwrap_or(losses.len());
    if usable < 3 {
        return Err(Error::NotEnoughPoints {
            needed: 3,
            got: usable,
        });
    }
    let ys: Vec<f64> = losses[..usable].iter().map(|l| l.ln()).collect();
    let n = usable as f64;
    let x_mean = (n - 1.0) / 2.0;
    let y_mean = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - x_mean;
        let dy = y - y_mean;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let r2 = if syy == 0.0 {
        0.0
    } else {
        let ss_res: f64 = ys
            .iter()
            .enumerate()
            .map(|(i, y)| (y - intercept - slope * i as f64).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        implied_rate: slope.exp(),
        points: usable,
    })
}

/// Distances from `W(0)` of the virtual average and of each client.
pub fn drift_report(state: &FedState) -> Result<DriftReport> {
    drift_from(state, &state.virtual_average())
}

fn drift_from(state: &FedState, avg: &Params) -> Result<DriftReport> {
    let w0 = state.w0().hidden();
    let virtual_spectral = tuple_ball_distance(avg.hidden(), w0)?.max;
    let virtual_frobenius = tuple_frobenius_sq(avg.hidden(), w0)?.sqrt();
    let mut client_max_spectral: f64 = 0.0;
    let mut client_max_frobenius: f64 = 0.0;
    for c in state.clients() {
        client_max_spectral =
            client_max_spectral.max(tuple_ball_distance(c.params.hidden(), w0)?.max);
        client_max_frobenius =
            client_max_frobenius.max(tuple_frobenius_sq(c.params.hidden(), w0)?.sqrt());
    }
    Ok(DriftReport {
        virtual_spectral,
        client_max_spectral,
        virtual_frobenius,
        client_max_frobenius,
    })
}

/// Builds one [`ProbeRecord`] from the current state.
pub fn probe(state: &FedState, ctx: &ProbeContext) -> Result<ProbeRecord> {
    let avg = average(state.clients().iter().map(|c| &c.params));
    let shards: Vec<&Shard> = state.shards().collect();

    let (global, grad) = global_loss_and_gradient(&avg, &shards)?;
    let ratios = ratios_from(
        global,
        grad.frobenius_sq(),
        ctx.width,
        ctx.input_dim,
        ctx.n,
        ctx.phi,
    );

    let rule = ctx.shrinkage_rule();
    let sync_losses = state.sync_client_losses()?;
    let mut client_losses = Vec::with_capacity(shards.len());
    let mut shrinkage = f64::NEG_INFINITY;
    for (c, &at_sync) in state.clients().iter().zip(&sync_losses) {
        let now = network::loss(&c.params, c.shard())?;
        client_losses.push(now);
        let mut history = c.loss_history().to_vec();
        if history.is_empty() {
            history.push(at_sync);
        } else {
            history.push(now);
        }
        shrinkage = shrinkage.max(shrinkage_check(&history, rule)?);
    }

    let drift = drift_from(state, &avg)?;
    let deviation = deviation_check(state)?;
    Ok(ProbeRecord {
        t: state.step(),
        c: state.round(),
        global_loss: global,
        client_loss_min: client_losses.iter().copied().fold(f64::INFINITY, f64::min),
        client_loss_mean: mean(&client_losses),
        client_loss_max: client_losses
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
        drift_virtual: drift.virtual_spectral,
        drift_client_max: drift.client_max_spectral,
        drift_virtual_fro: drift.virtual_frobenius,
        drift_client_max_fro: drift.client_max_frobenius,
        deviation_mean_sq: deviation.measured,
        deviation_bound_rhs: deviation.bound_rhs,
        grad_upper_ratio: ratios.upper,
        grad_lower_ratio: ratios.lower,
        shrinkage_violation: shrinkage,
    })
}
