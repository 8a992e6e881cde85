use std::fmt;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::PartitionScheme;
use crate::federated::Algo;
use crate::network::NetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedSection {
    pub clients: usize,
    pub tau: usize,
    pub rounds: usize,
    #[serde(default = "default_algo")]
    pub algo: Algo,
    /// Step size; derived from the theorem formula with `c_eta` when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "one")]
    pub c_eta: f64,
    #[serde(default = "one_usize")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_algo() -> Algo {
    Algo::LocalGd
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub n_total: usize,
    pub phi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep only the first `limit` examples.
    #[serde(default)]
    pub limit: Option<usize>,
    /// Optional held-out pair for reporting test accuracy.
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSource>,
    /// Seed for data generation and partitioning; `fed.seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Dotted parameter path, see [`SWEEP_PARAMS`].
    pub param: String,
    pub values: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// When sweeping `fed.tau`, rescale `fed.rounds` so that `R·τ` stays at
    /// the base configuration's value.
    #[serde(default)]
    pub hold_total_steps: bool,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

pub const SWEEP_PARAMS: &[&str] = &[
    "net.width",
    "net.layers",
    "fed.tau",
    "fed.eta",
    "fed.c_eta",
    "fed.clients",
    "fed.rounds",
    "data.synthetic.phi",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub net: NetConfig,
    pub fed: FedSection,
    pub data: DataSection,
    #[serde(default = "default_partition")]
    pub partition: PartitionScheme,
    /// Probe every this many local steps; 0 disables probing.
    #[serde(default = "one_usize")]
    pub probe_every: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Scale of the reported ball radius ω.
    #[serde(default = "one")]
    pub c_omega: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

fn default_partition() -> PartitionScheme {
    PartitionScheme::Iid
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.fed.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Every problem found in a raw configuration.
#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for e in &self.0 {
            write!(f, "\n  - {e}")?;
        }
        Ok(())
    }
}

fn section<T: DeserializeOwned>(raw: &Value, key: &str, errors: &mut Vec<String>) -> Option<T> {
    match raw.get(key) {
        None => {
            errors.push(format!("{key}: missing"));
            None
        }
        Some(v) => match serde_json::from_value(v.clone()) {
            Ok(t) => Some(t),
            Err(e) => {
                errors.push(format!("{key}: {e}"));
                None
            }
        },
    }
}

fn optional_section<T: DeserializeOwned>(
    raw: &Value,
    key: &str,
    default: T,
    errors: &mut Vec<String>,
) -> Option<T> {
    match raw.get(key) {
        None | Some(Value::Null) => Some(default),
        Some(_) => section(raw, key, errors),
    }
}

/// Structural and range validation, collecting every error before failing.
pub fn validate_config(raw: &Value) -> Result<ExperimentConfig, ConfigErrors> {
    let mut errors = Vec::new();
    let Some(obj) = raw.as_object() else {
        return Err(ConfigErrors(vec!["config: expected a JSON object".into()]));
    };
    const KNOWN: &[&str] = &[
        "net",
        "fed",
        "data",
        "partition",
        "probe_every",
        "out_dir",
        "c_omega",
        "sweep",
    ];
    for key in obj.keys() {
        if !KNOWN.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown field"));
        }
    }

    let net: Option<NetConfig> = section(raw, "net", &mut errors);
    let fed: Option<FedSection> = section(raw, "fed", &mut errors);
    let data: Option<DataSection> = section(raw, "data", &mut errors);
    let partition = optional_section(raw, "partition", default_partition(), &mut errors);
    let probe_every = optional_section(raw, "probe_every", 1usize, &mut errors);
    let out_dir = optional_section(raw, "out_dir", default_out_dir(), &mut errors);
    let c_omega = optional_section(raw, "c_omega", 1.0f64, &mut errors);
    let sweep: Option<Option<SweepSpec>> = optional_section(raw, "sweep", None, &mut errors);

    if let Some(net) = &net {
        for (name, v) in [
            ("layers", net.layers),
            ("width", net.width),
            ("input_dim", net.input_dim),
            ("output_dim", net.output_dim),
        ] {
            if v < 1 {
                errors.push(format!("net.{name} must be ≥ 1"));
            }
        }
        for (name, v) in [
            ("init_hidden_std", net.init_hidden_std),
            ("init_output_std", net.init_output_std),
        ] {
            if v.is_some_and(|s| !(s.is_finite() && s >= 0.0)) {
                errors.push(format!("net.{name} must be finite and ≥ 0"));
            }
        }
    }
    if let Some(fed) = &fed {
        if fed.clients < 1 {
            errors.push("fed.clients must be ≥ 1".into());
        }
        if fed.tau < 1 {
            errors.push("fed.tau must be ≥ 1".into());
        }
        if fed.rounds < 1 {
            errors.push("fed.rounds must be ≥ 1".into());
        }
        if fed.batch < 1 {
            errors.push("fed.batch must be ≥ 1".into());
        }
        if let Some(eta) = fed.eta {
            if !(eta.is_finite() && eta > 0.0) {
                errors.push("fed.eta must be > 0".into());
            }
        }
        if !(fed.c_eta.is_finite() && fed.c_eta > 0.0) {
            errors.push("fed.c_eta must be > 0".into());
        }
    }
    if let Some(data) = &data {
        match (&data.synthetic, &data.idx) {
            (Some(_), Some(_)) | (None, None) => {
                errors.push("data: exactly one data source (synthetic or idx) must be given".into())
            }
            _ => {}
        }
        if let Some(s) = &data.synthetic {
            if s.n_total < 1 {
                errors.push("data.synthetic.n_total must be ≥ 1".into());
            }
            if !(0.0..2.0).contains(&s.phi) {
                errors.push("data.synthetic.phi must lie in [0, 2)".into());
            }
            if let (Some(net), Some(fed)) = (&net, &fed) {
                if net.input_dim < 2 {
                    errors.push("net.input_dim must be ≥ 2 for synthetic data".into());
                }
                if s.n_total < fed.clients {
                    errors.push("data.synthetic.n_total must be ≥ fed.clients".into());
                }
            }
        }
        if let Some(idx) = &data.idx {
            if idx.test_images.is_some() != idx.test_labels.is_some() {
                errors.push("data.idx: test_images and test_labels go together".into());
            }
            if idx.limit == Some(0) {
                errors.push("data.idx.limit must be ≥ 1".into());
            }
        }
    }
    if let Some(PartitionScheme::LabelShards { classes_per_client }) = partition {
        if classes_per_client < 1 {
            errors.push("partition.label_shards.classes_per_client must be ≥ 1".into());
        }
    }
    if let Some(c) = c_omega {
        if !(c.is_finite() && c > 0.0) {
            errors.push("c_omega must be > 0".into());
        }
    }
    if let Some(Some(sweep)) = &sweep {
        if !SWEEP_PARAMS.contains(&sweep.param.as_str()) {
            errors.push(format!(
                "sweep.param: unknown parameter {:?} (expected one of {})",
                sweep.param,
                SWEEP_PARAMS.join(", ")
            ));
        }
        if sweep.values.is_empty() {
            errors.push("sweep.values must be nonempty".into());
        }
        if sweep.seeds.is_empty() {
            errors.push("sweep.seeds must be nonempty".into());
        }
        if sweep.hold_total_steps && sweep.param != "fed.tau" {
            errors.push("sweep.hold_total_steps only applies to fed.tau".into());
        }
    }

    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }
    Ok(ExperimentConfig {
        net: net.expect("checked"),
        fed: fed.expect("checked"),
        data: data.expect("checked"),
        partition: partition.expect("checked"),
        probe_every: probe_every.expect("checked"),
        out_dir: out_dir.expect("checked"),
        c_omega: c_omega.expect("checked"),
        sweep: sweep.expect("checked"),
    })
}
