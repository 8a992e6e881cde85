use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::probes::ProbeRecord;

pub const CSV_HEADER: &str = "t,c,global_loss,client_loss_min,client_loss_mean,client_loss_max,drift_virtual,drift_client_max,deviation_mean_sq,deviation_bound_rhs,grad_upper_ratio,grad_lower_ratio,shrinkage_violation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config: serde_json::Value,
    pub version: String,
    pub seed: u64,
}

impl RunHeader {
    pub fn new(config: serde_json::Value, seed: u64) -> Self {
        Self {
            config,
            version: concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION")).to_string(),
            seed,
        }
    }
}

/// Everything a run produces: header, probe rows in step order, and the
/// global loss at each synchronization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub header: RunHeader,
    pub records: Vec<ProbeRecord>,
    /// `L(W(t_c))` for `c = 0..=R`.
    pub round_losses: Vec<f64>,
}

impl MetricsLog {
    pub fn final_loss(&self) -> f64 {
        *self
            .round_losses
            .last()
            .expect("a run has at least one round")
    }

    pub fn initial_loss(&self) -> f64 {
        self.round_losses[0]
    }

    /// Metrics as CSV with the fixed [`CSV_HEADER`]. Floats use Rust's
    /// shortest round-trip scientific notation.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = write!(out, "{},{}", r.t, r.c);
            for v in [
                r.global_loss,
                r.client_loss_min,
                r.client_loss_mean,
                r.client_loss_max,
                r.drift_virtual,
                r.drift_client_max,
                r.deviation_mean_sq,
                r.deviation_bound_rhs,
                r.grad_upper_ratio,
                r.grad_lower_ratio,
                r.shrinkage_violation,
            ] {
                let _ = write!(out, ",{v:e}");
            }
            out.push('\n');
        }
        out
    }
}
