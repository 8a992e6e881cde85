//! Datasets on the unit sphere, client shards and partitions.

mod idx;
mod partition;
mod synthetic;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, IdxImages, IdxLoad};
pub use partition::{partition_iid, partition_label_shards, Partition, PartitionScheme};
pub(crate) use synthetic::argmax;
pub use synthetic::{gen_separable, MAX_ATTEMPTS_PER_POINT};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const UNIT_NORM_TOL: f64 = 1e-12;

/// Labeled examples. Inputs are unit vectors unless built with
/// [`Dataset::unnormalized`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
    input_dim: usize,
    output_dim: usize,
    phi: f64,
}

impl Dataset {
    /// Builds a dataset and checks `‖x‖ = 1` for every input.
    pub fn new(
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let ds = Self::unnormalized(inputs, targets, labels)?;
        if let Some((i, norm)) = ds
            .inputs
            .iter()
            .map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt())
            .enumerate()
            .find(|(_, norm)| (norm - 1.0).abs() > UNIT_NORM_TOL)
        {
            return Err(Error::InvalidArgument(format!(
                "example {i} has norm {norm}, expected 1"
            )));
        }
        Ok(ds)
    }

    /// Like [`Dataset::new`] without the unit-norm check.
    pub fn unnormalized(
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} inputs vs {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != inputs.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} inputs vs {} labels",
                    inputs.len(),
                    l.len()
                )));
            }
        }
        let input_dim = inputs.first().map_or(0, Vec::len);
        let output_dim = targets.first().map_or(0, Vec::len);
        if inputs.iter().any(|x| x.len() != input_dim)
            || targets.iter().any(|y| y.len() != output_dim)
        {
            return Err(Error::ShapeMismatch("ragged examples".into()));
        }
        Ok(Self {
            inputs,
            targets,
            labels,
            input_dim,
            output_dim,
            phi: 0.0,
        })
    }

    /// Records a separation margin after checking it against the data.
    pub fn certify_phi(mut self, phi: f64) -> Result<Self> {
        if phi > 0.0 {
            let min = min_pairwise_distance(&self)?;
            if min < phi {
                return Err(Error::InvalidArgument(format!(
                    "minimum pairwise distance {min} is below phi = {phi}"
                )));
            }
        }
        self.phi = phi;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Certified minimum pairwise distance, 0 when uncertified.
    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Inputs of the selected examples, one column each.
    pub fn input_matrix(&self, indices: &[usize]) -> Matrix {
        columns(&self.inputs, self.input_dim, indices)
    }

    pub fn target_matrix(&self, indices: &[usize]) -> Matrix {
        columns(&self.targets, self.output_dim, indices)
    }
}

fn columns(rows: &[Vec<f64>], dim: usize, indices: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(dim, indices.len());
    for (j, &i) in indices.iter().enumerate() {
        for (k, v) in rows[i].iter().enumerate() {
            m.set(k, j, *v);
        }
    }
    m
}

/// Exact minimum over all pairs.
pub fn min_pairwise_distance(ds: &Dataset) -> Result<f64> {
    let n = ds.len();
    if n < 2 {
        return Err(Error::TooFewExamples { needed: 2, got: n });
    }
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = ds.inputs[i]
                .iter()
                .zip(&ds.inputs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(d2);
        }
    }
    Ok(best.sqrt())
}

/// One client's data: a copy of the selected examples laid out as
/// column-per-example matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Shard {
    client_id: usize,
    indices: Vec<usize>,
    inputs: Matrix,
    targets: Matrix,
    labels: Option<Vec<usize>>,
}

impl Shard {
    pub fn new(ds: &Dataset, indices: Vec<usize>, client_id: usize) -> Result<Self> {
        if let Some(&index) = indices.iter().find(|&&i| i >= ds.len()) {
            return Err(Error::IndexOutOfRange {
                index,
                len: ds.len(),
            });
        }
        Ok(Self {
            client_id,
            inputs: ds.input_matrix(&indices),
            targets: ds.target_matrix(&indices),
            labels: ds
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            indices,
        })
    }

    pub fn client_id(&self) -> usize {
        self.client_id
    }

    /// Dataset indices of the shard's examples.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `d×n`.
    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// `o×n`.
    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone().unwrap_or_default();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}
