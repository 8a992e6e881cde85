use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{validate_config, ConfigErrors, ExperimentConfig, SweepSpec};
use super::metrics::{MetricsLog, RunHeader};
use crate::data::{
    gen_separable, load_idx, min_pairwise_distance, partition_iid, partition_label_shards, Dataset,
    PartitionScheme, Shard,
};
use crate::error::Error;
use crate::federated::{default_lr, run_state, FedConfig, FedState};
use crate::network::{self, Params};
use crate::numerics::{streams, RngStream};
use crate::probes::{linear_rate_fit, omega_default, ProbeSchedule, RateFit};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_CELLS_FILE: &str = "cells.csv";

/// Failure of an experiment, split by who has to fix it.
#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigErrors),
    #[error(transparent)]
    Run(#[from] Error),
}

pub type ExperimentResult<T> = std::result::Result<T, ExperimentError>;

/// Reads and validates a JSON config file. Unreadable or malformed files
/// are configuration errors.
pub fn load_config(path: impl AsRef<Path>) -> ExperimentResult<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| ConfigErrors(vec![format!("{}: {e}", path.display())]))?;
    Ok(validate_config(&raw)?)
}

/// Data, shards and step size for a config, before any training.
#[derive(Clone, Debug)]
pub struct PreparedRun {
    pub dataset: Dataset,
    pub shards: Vec<Shard>,
    pub fed: FedConfig,
    /// Largest shard size, used as `n` in the step-size and probe formulas.
    pub n: usize,
    pub phi: f64,
    pub omega: f64,
    pub test: Option<Dataset>,
    pub dropped_zero: usize,
    pub dropped_duplicate: usize,
}

pub fn prepare(cfg: &ExperimentConfig) -> crate::Result<PreparedRun> {
    let data_seed = cfg.data_seed();
    let (mut dataset, dropped_zero, dropped_duplicate, test) =
        match (&cfg.data.synthetic, &cfg.data.idx) {
            (Some(s), None) => {
                let mut rng = RngStream::new(data_seed, streams::DATA);
                let ds = gen_separable(
                    s.n_total,
                    cfg.net.input_dim,
                    cfg.net.output_dim,
                    s.phi,
                    &mut rng,
                )?;
                (ds, 0, 0, None)
            }
            (None, Some(idx)) => {
                let load = load_idx(&idx.images, &idx.labels, idx.limit)?;
                let test = match (&idx.test_images, &idx.test_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l, None)?.dataset),
                    _ => None,
                };
                (
                    load.dataset,
                    load.dropped_zero,
                    load.dropped_duplicate,
                    test,
                )
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "exactly one data source must be given".into(),
                ))
            }
        };
    if dataset.input_dim() != cfg.net.input_dim || dataset.output_dim() != cfg.net.output_dim {
        return Err(Error::ShapeMismatch(format!(
            "data has input_dim {} and output_dim {}, net expects {} and {}",
            dataset.input_dim(),
            dataset.output_dim(),
            cfg.net.input_dim,
            cfg.net.output_dim
        )));
    }
    if cfg.data.idx.is_some() && dataset.len() >= 2 {
        let phi = min_pairwise_distance(&dataset)?;
        dataset = dataset.certify_phi(phi)?;
    }
    let phi = dataset.phi();

    let mut rng = RngStream::new(data_seed, streams::PARTITION);
    let partition = match cfg.partition {
        PartitionScheme::Iid => partition_iid(&dataset, cfg.fed.clients, &mut rng)?,
        PartitionScheme::LabelShards { classes_per_client } => {
            partition_label_shards(&dataset, cfg.fed.clients, classes_per_client, &mut rng)?
        }
    };
    let shards = partition.shards(&dataset)?;
    let n = shards.iter().map(Shard::len).max().unwrap_or(0);

    let eta = match cfg.fed.eta {
        Some(eta) => eta,
        None => default_lr(cfg.fed.algo, &cfg.net, n, phi, cfg.fed.tau, cfg.fed.c_eta)?,
    };
    let fed = FedConfig {
        clients: cfg.fed.clients,
        tau: cfg.fed.tau,
        eta,
        rounds: cfg.fed.rounds,
        algo: cfg.fed.algo,
        batch: cfg.fed.batch,
        seed: cfg.fed.seed,
        c_eta: cfg.fed.c_eta,
    };
    fed.validate()?;
    let omega = omega_default(phi, n, cfg.net.layers, cfg.net.width, cfg.c_omega);
    Ok(PreparedRun {
        dataset,
        shards,
        fed,
        n,
        phi,
        omega,
        test,
        dropped_zero,
        dropped_duplicate,
    })
}

/// Scalar results of one run, written as `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub eta: f64,
    pub n: usize,
    pub n_total: usize,
    pub phi: f64,
    pub omega: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Log-linear fit over all synchronization losses.
    pub rate_fit: Option<RateFit>,
    pub round_losses: Vec<f64>,
    pub dropped_zero: usize,
    pub dropped_duplicate: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub summary: RunSummary,
    pub params: Params,
    pub dir: PathBuf,
}

/// Trains without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> crate::Result<(MetricsLog, RunSummary, Params)> {
    let prep = prepare(cfg)?;
    let schedule = if cfg.probe_every == 0 {
        ProbeSchedule::disabled()
    } else {
        ProbeSchedule::every(cfg.probe_every, prep.phi)
    };
    let n_total = prep.dataset.len();
    let mut state = FedState::new(prep.fed.clone(), &cfg.net, prep.shards)?;
    let mut log = run_state(&mut state, &cfg.net, &schedule)?;
    log.header = RunHeader::new(
        serde_json::to_value(cfg).map_err(Error::from)?,
        cfg.fed.seed,
    );
    let params = state.w_sync().clone();
    let test_accuracy = prep
        .test
        .as_ref()
        .map(|test| accuracy(&params, test))
        .transpose()?;
    let summary = RunSummary {
        seed: cfg.fed.seed,
        eta: prep.fed.eta,
        n: prep.n,
        n_total,
        phi: prep.phi,
        omega: prep.omega,
        initial_loss: log.initial_loss(),
        final_loss: log.final_loss(),
        rate_fit: linear_rate_fit(&log.round_losses).ok(),
        round_losses: log.round_losses.clone(),
        dropped_zero: prep.dropped_zero,
        dropped_duplicate: prep.dropped_duplicate,
        test_accuracy,
    };
    Ok((log, summary, params))
}

/// Fraction of examples whose largest output coordinate matches the label.
pub fn accuracy(p: &Params, ds: &Dataset) -> crate::Result<f64> {
    let labels = ds.labels().ok_or(Error::LabelsAbsent)?;
    if ds.is_empty() {
        return Err(Error::TooFewExamples { needed: 1, got: 0 });
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let out = network::predict(p, &ds.input_matrix(&all))?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(j, &label)| {
            let col = out.col_to_vec(j);
            crate::data::argmax(&col) == label
        })
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Runs one experiment and writes `metrics.csv`, `config.json` and
/// `summary.json` into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> crate::Result<RunOutput> {
    let (log, summary, params) = execute(cfg)?;
    let dir = cfg.out_dir.clone();
    write_run(&dir, cfg, &log, &summary)?;
    Ok(RunOutput {
        log,
        summary,
        params,
        dir,
    })
}

fn write_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    log: &MetricsLog,
    summary: &RunSummary,
) -> crate::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(METRICS_FILE), log.to_csv())?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_json())?;
    fs::write(
        dir.join(SUMMARY_FILE),
        serde_json::to_string_pretty(summary)? + "\n",
    )?;
    Ok(())
}

/// Renders a sweep value for filenames and tables: integers without a
/// fractional part, everything else in shortest round-trip form.
pub fn format_value(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Directory name of one sweep cell, e.g. `net.width-64_seed-0`.
pub fn cell_name(param: &str, value: f64, seed: u64) -> String {
    format!("{param}-{}_seed-{seed}", format_value(value))
}

fn as_count(param: &str, v: f64) -> Result<usize, String> {
    if v.fract() == 0.0 && (0.0..1e15).contains(&v) {
        Ok(v as usize)
    } else {
        Err(format!(
            "sweep.values: {param} needs nonnegative integers, got {v}"
        ))
    }
}

/// The base config with one sweep value and seed applied, revalidated.
pub fn sweep_cell(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    value: f64,
    seed: u64,
) -> Result<ExperimentConfig, ConfigErrors> {
    let mut cell = base.clone();
    cell.sweep = None;
    cell.fed.seed = seed;
    let err = |e: String| ConfigErrors(vec![e]);
    match spec.param.as_str() {
        "net.width" => cell.net.width = as_count(&spec.param, value).map_err(err)?,
        "net.layers" => cell.net.layers = as_count(&spec.param, value).map_err(err)?,
        "fed.tau" => {
            let tau = as_count(&spec.param, value).map_err(err)?;
            if spec.hold_total_steps {
                let total = base.fed.rounds * base.fed.tau;
                if tau == 0 || !total.is_multiple_of(tau) {
                    return Err(err(format!(
                        "sweep.values: tau = {tau} does not divide R·τ = {total}"
                    )));
                }
                cell.fed.rounds = total / tau;
            }
            cell.fed.tau = tau;
        }
        "fed.clients" => cell.fed.clients = as_count(&spec.param, value).map_err(err)?,
        "fed.rounds" => cell.fed.rounds = as_count(&spec.param, value).map_err(err)?,
        "fed.eta" => cell.fed.eta = Some(value),
        "fed.c_eta" => cell.fed.c_eta = value,
        "data.synthetic.phi" => match cell.data.synthetic.as_mut() {
            Some(s) => s.phi = value,
            None => {
                return Err(err(
                    "sweep.param: data.synthetic.phi needs synthetic data".into()
                ))
            }
        },
        other => return Err(err(format!("sweep.param: unknown parameter {other:?}"))),
    }
    cell.out_dir = base.out_dir.join(cell_name(&spec.param, value, seed));
    let raw = serde_json::to_value(&cell).expect("config serializes");
    validate_config(&raw)
}

/// One row of the per-value sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub seeds: usize,
    pub final_loss_mean: f64,
    pub final_loss_min: f64,
    pub final_loss_max: f64,
    /// Mean over seeds of the fitted per-round contraction factor.
    pub implied_rate_mean: f64,
    pub slope_mean: f64,
    pub r2_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: f64,
    pub seed: u64,
    pub dir: PathBuf,
    pub summary: RunSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub param: String,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<SweepCell>,
}

impl SweepOutput {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "param,value,seeds,final_loss_mean,final_loss_min,final_loss_max,implied_rate_mean,slope_mean,r2_mean\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                self.param,
                format_value(r.value),
                r.seeds,
                r.final_loss_mean,
                r.final_loss_min,
                r.final_loss_max,
                r.implied_rate_mean,
                r.slope_mean,
                r.r2_mean
            ));
        }
        out
    }

    pub fn cells_csv(&self) -> String {
        let mut out = String::from("param,value,seed,dir,final_loss,implied_rate,slope,r2\n");
        for c in &self.cells {
            let fit = c.summary.rate_fit.as_ref();
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e},{:e},{:e}\n",
                self.param,
                format_value(c.value),
                c.seed,
                c.dir
                    .file_name()
                    .map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
                c.summary.final_loss,
                fit.map_or(f64::NAN, |f| f.implied_rate),
                fit.map_or(f64::NAN, |f| f.slope),
                fit.map_or(f64::NAN, |f| f.r2),
            ));
        }
        out
    }
}

/// Runs every (value, seed) cell of the sweep block in parallel, each in
/// its own subdirectory of `out_dir`, then writes `summary.csv` (one row
/// per value) and `cells.csv` (one row per cell).
pub fn sweep(cfg: &ExperimentConfig) -> ExperimentResult<SweepOutput> {
    let spec = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| ConfigErrors(vec!["sweep: block missing".into()]))?;
    let mut jobs = Vec::new();
    let mut errors = Vec::new();
    for &value in &spec.values {
        for &seed in &spec.seeds {
            match sweep_cell(cfg, spec, value, seed) {
                Ok(cell) => jobs.push((value, seed, cell)),
                Err(e) => errors.extend(e.0),
            }
        }
    }
    if !errors.is_empty() {
        errors.dedup();
        return Err(ConfigErrors(errors).into());
    }
    let cells = jobs
        .par_iter()
        .map(|(value, seed, cell)| {
            let out = run_experiment(cell)?;
            Ok(SweepCell {
                value: *value,
                seed: *seed,
                dir: out.dir,
                summary: out.summary,
            })
        })
        .collect::<crate::Result<Vec<_>>>()?;

    let rows = spec
        .values
        .iter()
        .map(|&value| {
            let group: Vec<&SweepCell> = cells.iter().filter(|c| c.value == value).collect();
            let k = group.len() as f64;
            let losses = group.iter().map(|c| c.summary.final_loss);
            let fits: Vec<&RateFit> = group
                .iter()
                .filter_map(|c| c.summary.rate_fit.as_ref())
                .collect();
            let fit_mean = |f: fn(&RateFit) -> f64| {
                if fits.is_empty() {
                    f64::NAN
                } else {
                    fits.iter().map(|r| f(r)).sum::<f64>() / fits.len() as f64
                }
            };
            SweepRow {
                value,
                seeds: group.len(),
                final_loss_mean: losses.clone().sum::<f64>() / k,
                final_loss_min: losses.clone().fold(f64::INFINITY, f64::min),
                final_loss_max: losses.fold(f64::NEG_INFINITY, f64::max),
                implied_rate_mean: fit_mean(|f| f.implied_rate),
                slope_mean: fit_mean(|f| f.slope),
                r2_mean: fit_mean(|f| f.r2),
            }
        })
        .collect();
    let out = SweepOutput {
        param: spec.param.clone(),
        rows,
        cells,
    };
    fs::create_dir_all(&cfg.out_dir).map_err(Error::from)?;
    fs::write(cfg.out_dir.join(SWEEP_SUMMARY_FILE), out.summary_csv()).map_err(Error::from)?;
    fs::write(cfg.out_dir.join(SWEEP_CELLS_FILE), out.cells_csv()).map_err(Error::from)?;
    Ok(out)
}
