//! Local GD / Local SGD with periodic averaging.
//!
//! Each of `K` clients takes `tau` local steps on its own shard, then the
//! server averages the client models and broadcasts one copy of the average
//! back. `W(0)` and the latest synchronized model `W(t_c)` are kept for the
//! probes.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Shard;
use crate::error::{Error, Result};
use crate::experiment::{MetricsLog, RunHeader};
use crate::network::{self, init_params, NetConfig, Params};
use crate::numerics::{streams, Matrix, RngStream};
use crate::probes::{self, ProbeContext, ProbeSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    LocalGd,
    LocalSgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub clients: usize,
    pub tau: usize,
    pub eta: f64,
    pub rounds: usize,
    pub algo: Algo,
    /// Minibatch size for Local SGD.
    pub batch: usize,
    pub seed: u64,
    pub c_eta: f64,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::InvalidArgument("fed.clients must be >= 1".into()));
        }
        if self.tau == 0 {
            return Err(Error::InvalidArgument("fed.tau must be >= 1".into()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("fed.rounds must be >= 1".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::InvalidArgument(
                "fed.eta must be finite and >= 0".into(),
            ));
        }
        if self.algo == Algo::LocalSgd && self.batch == 0 {
            return Err(Error::InvalidArgument("fed.batch must be >= 1".into()));
        }
        Ok(())
    }

    /// Total local iterations `T = R·τ`.
    pub fn total_steps(&self) -> usize {
        self.rounds * self.tau
    }
}

/// Step size of the convergence theorems with the hidden constant made
/// explicit:
///
/// * Local GD: `c_eta · d·n² / (m·φ·τ)`
/// * Local SGD: `c_eta · d·φ / (m·τ·n³·(ln m)²)`
pub fn default_lr(
    algo: Algo,
    net: &NetConfig,
    n: usize,
    phi: f64,
    tau: usize,
    c_eta: f64,
) -> Result<f64> {
    let m = net.width as f64;
    let d = net.input_dim as f64;
    let n = n as f64;
    let tau = tau as f64;
    if !(m > 0.0 && d > 0.0 && n > 0.0 && tau > 0.0 && phi > 0.0) {
        return Err(Error::InvalidArgument(
            "default_lr needs positive m, d, n, phi and tau".into(),
        ));
    }
    if !(c_eta >= 0.0) {
        return Err(Error::InvalidArgument("c_eta must be >= 0".into()));
    }
    Ok(match algo {
        Algo::LocalGd => c_eta * d * n * n / (m * phi * tau),
        Algo::LocalSgd => {
            let log_m = m.ln();
            if log_m <= 0.0 {
                return Err(Error::InvalidArgument(
                    "Local SGD step size needs m >= 2".into(),
                ));
            }
            c_eta * d * phi / (m * tau * n.powi(3) * log_m * log_m)
        }
    })
}

/// One simulated client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub params: Params,
    shard: Shard,
    rng: RngStream,
    /// `L_i(W⁽ⁱ⁾(s))` for each step `s` of the current window, starting at
    /// the last synchronization.
    loss_history: Vec<f64>,
}

impl ClientState {
    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    pub fn loss_history(&self) -> &[f64] {
        &self.loss_history
    }

    fn step(&mut self, algo: Algo, eta: f64, batch: usize) -> Result<()> {
        let (loss, grad) = match algo {
            Algo::LocalGd => network::loss_and_gradient(&self.params, &self.shard)?,
            Algo::LocalSgd => {
                let n = self.shard.len();
                let picks = index::sample(&mut self.rng, n, batch.min(n)).into_vec();
                let loss = network::loss(&self.params, &self.shard)?;
                (
                    loss,
                    network::stochastic_gradient(&self.params, &self.shard, &picks)?,
                )
            }
        };
        self.loss_history.push(loss);
        self.params.descend(eta, &grad)
    }
}

/// Full simulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct FedState {
    cfg: FedConfig,
    clients: Vec<ClientState>,
    w0: Params,
    w_sync: Params,
    round: usize,
    step: usize,
}

impl FedState {
    /// Initializes `W(0)` from the `INIT` stream of `cfg.seed` and hands a
    /// copy to every client. Client `i` samples minibatches from stream
    /// `CLIENT_BASE + i`.
    pub fn new(cfg: FedConfig, net: &NetConfig, shards: Vec<Shard>) -> Result<Self> {
        let w0 = init_params(net, &mut RngStream::new(cfg.seed, streams::INIT))?;
        Self::from_params(cfg, w0, shards)
    }

    pub fn from_params(cfg: FedConfig, w0: Params, shards: Vec<Shard>) -> Result<Self> {
        cfg.validate()?;
        if shards.len() != cfg.clients {
            return Err(Error::InvalidArgument(format!(
                "{} shards for {} clients",
                shards.len(),
                cfg.clients
            )));
        }
        if let Some(s) = shards.iter().find(|s| s.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "client {} has an empty shard",
                s.client_id()
            )));
        }
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(i, shard)| ClientState {
                params: w0.clone(),
                shard,
                rng: RngStream::new(cfg.seed, streams::CLIENT_BASE + i as u64),
                loss_history: Vec::new(),
            })
            .collect();
        Ok(Self {
            cfg,
            clients,
            w_sync: w0.clone(),
            w0,
            round: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &FedConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn client_params(&self, i: usize) -> &Params {
        &self.clients[i].params
    }

    /// `W(0)`.
    pub fn w0(&self) -> &Params {
        &self.w0
    }

    /// `W(t_c)`, the model broadcast at the latest synchronization.
    pub fn w_sync(&self) -> &Params {
        &self.w_sync
    }

    /// Completed synchronizations `c`.
    pub fn round(&self) -> usize {
        self.round
    }

    /// Local iterations taken so far `t`.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn shards(&self) -> impl Iterator<Item = &Shard> {
        self.clients.iter().map(|c| &c.shard)
    }

    /// Largest client shard, used as `n` in the step-size and bound formulas.
    pub fn max_shard_len(&self) -> usize {
        self.shards().map(Shard::len).max().unwrap_or(0)
    }

    /// One local update on client `client`.
    pub fn local_step(&mut self, client: usize) -> Result<()> {
        let (algo, eta, batch) = (self.cfg.algo, self.cfg.eta, self.cfg.batch);
        let c = self
            .clients
            .get_mut(client)
            .ok_or_else(|| Error::InvalidArgument(format!("no client {client}")))?;
        c.step(algo, eta, batch)
    }

    /// One local update on every client, then advances `t`. Clients run in
    /// parallel; results match sequential execution bit for bit.
    pub fn local_steps(&mut self) -> Result<()> {
        let (algo, eta, batch) = (self.cfg.algo, self.cfg.eta, self.cfg.batch);
        self.clients
            .par_iter_mut()
            .map(|c| c.step(algo, eta, batch))
            .collect::<Result<Vec<()>>>()?;
        self.step += 1;
        Ok(())
    }

    /// `W(t) = (1/K) Σ_i W⁽ⁱ⁾(t)`, summed in ascending client order.
    pub fn virtual_average(&self) -> Params {
        average(self.clients.iter().map(|c| &c.params))
    }

    /// Averages the clients and broadcasts the result. Valid only once the
    /// current window of `tau` local steps is complete.
    pub fn synchronize(&mut self) -> Result<()> {
        let due = (self.round + 1) * self.cfg.tau;
        if self.step != due {
            return Err(Error::Protocol(format!(
                "synchronize at step {} but the next sync is due at step {due}",
                self.step
            )));
        }
        let avg = self.virtual_average();
        for c in &mut self.clients {
            c.params = avg.clone();
            c.loss_history.clear();
        }
        self.w_sync = avg;
        self.round += 1;
        Ok(())
    }

    /// `L_i(W(t_c))` for every client, reusing the first loss recorded in
    /// the current window when available.
    pub fn sync_client_losses(&self) -> Result<Vec<f64>> {
        self.clients
            .iter()
            .map(|c| match c.loss_history.first() {
                Some(&l) => Ok(l),
                None => network::loss(&self.w_sync, &c.shard),
            })
            .collect()
    }

    /// `L(W(t_c)) = (1/K) Σ_i L_i(W(t_c))`.
    pub fn sync_loss(&self) -> Result<f64> {
        Ok(mean(&self.sync_client_losses()?))
    }
}

/// Entrywise mean of parameter tuples, summed in iteration order.
pub(crate) fn average<'a>(mut items: impl Iterator<Item = &'a Params>) -> Params {
    let first = items.next().expect("at least one client");
    let mut sum: Vec<Matrix> = first.hidden().to_vec();
    let mut count = 1usize;
    for p in items {
        for (s, w) in sum.iter_mut().zip(p.hidden()) {
            s.axpy(1.0, w).expect("clients share shapes");
        }
        count += 1;
    }
    let k = count as f64;
    for s in &mut sum {
        for v in s.as_mut_slice() {
            *v /= k;
        }
    }
    first.replace_hidden(sum).expect("shapes preserved")
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Global objective `L(W) = (1/K) Σ_i L_i(W)`.
pub fn global_loss<'a>(p: &Params, shards: impl IntoIterator<Item = &'a Shard>) -> Result<f64> {
    let losses = shards
        .into_iter()
        .map(|s| network::loss(p, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&losses))
}

/// Runs `R` rounds of `tau` local steps followed by synchronization.
///
/// Probe rows are taken at `t = 0`, at every multiple of
/// `schedule.every`, and at `t = T`. At a synchronization step the row is
/// taken just before averaging, so it reports the end-of-window deviation.
/// `round_losses[c]` holds `L(W(t_c))` for `c = 0..=R`.
pub fn run(
    cfg: &FedConfig,
    shards: Vec<Shard>,
    net: &NetConfig,
    schedule: &ProbeSchedule,
) -> Result<MetricsLog> {
    let mut state = FedState::new(cfg.clone(), net, shards)?;
    run_state(&mut state, net, schedule)
}

/// [`run`] on an already constructed state.
pub fn run_state(
    state: &mut FedState,
    net: &NetConfig,
    schedule: &ProbeSchedule,
) -> Result<MetricsLog> {
    let cfg = state.cfg.clone();
    let ctx = ProbeContext::new(
        net,
        state.max_shard_len(),
        cfg.eta,
        cfg.tau,
        cfg.algo,
        schedule,
    );
    let mut log = MetricsLog {
        header: RunHeader::new(serde_json::json!({ "net": net, "fed": cfg }), cfg.seed),
        records: Vec::new(),
        round_losses: Vec::with_capacity(cfg.rounds + 1),
    };
    let total = cfg.total_steps();
    let probe_due = |t: usize| {
        schedule.enabled() && (t == 0 || t == total || schedule.every.is_some_and(|e| t.is_multiple_of(e)))
    };

    if probe_due(0) {
        log.records.push(probes::probe(state, &ctx)?);
    }
    for _ in 0..cfg.rounds {
        for _ in 0..cfg.tau {
            state.local_steps()?;
            if probe_due(state.step) {
                log.records.push(probes::probe(state, &ctx)?);
            }
        }
        let loss = state.sync_loss()?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                round: state.round,
                loss,
            });
        }
        log.round_losses.push(loss);
        state.synchronize()?;
    }
    log.round_losses
        .push(global_loss(state.w_sync(), state.shards())?);
    Ok(log)
}
