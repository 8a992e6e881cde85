use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

use super::{Dataset, Shard};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Iid,
    LabelShards { classes_per_client: usize },
}

/// Disjoint index sets, one per client, covering the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
    scheme: PartitionScheme,
}

impl Partition {
    /// Checks that `assignments` is an exact set partition of `0..n`.
    pub fn new(assignments: Vec<Vec<usize>>, scheme: PartitionScheme, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for idx in assignments.iter().flatten() {
            match seen.get_mut(*idx) {
                None => {
                    return Err(Error::IndexOutOfRange {
                        index: *idx,
                        len: n,
                    })
                }
                Some(true) => {
                    return Err(Error::InvalidArgument(format!(
                        "index {idx} assigned to two clients"
                    )))
                }
                Some(s) => *s = true,
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!(
                "index {missing} assigned to no client"
            )));
        }
        Ok(Self {
            assignments,
            scheme,
        })
    }

    pub fn clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn scheme(&self) -> PartitionScheme {
        self.scheme
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Materializes every client's shard.
    pub fn shards(&self, ds: &Dataset) -> Result<Vec<Shard>> {
        self.assignments
            .iter()
            .enumerate()
            .map(|(i, idx)| Shard::new(ds, idx.clone(), i))
            .collect()
    }
}

/// Random permutation cut into `k` shards whose sizes differ by at most one
/// (the first `n mod k` shards get the extra example).
pub fn partition_iid(ds: &Dataset, k: usize, rng: &mut RngStream) -> Result<Partition> {
    let n = ds.len();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} examples across {k} clients"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let sizes = balanced_sizes(n, k);
    let mut assignments = Vec::with_capacity(k);
    let mut start = 0;
    for size in sizes {
        let mut shard = perm[start..start + size].to_vec();
        shard.sort_unstable();
        assignments.push(shard);
        start += size;
    }
    Partition::new(assignments, PartitionScheme::Iid, n)
}

fn balanced_sizes(n: usize, k: usize) -> Vec<usize> {
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

/// Label-sorted chunks dealt to clients, `classes_per_client` chunks each.
///
/// The `K·classes_per_client` chunks are apportioned to classes in
/// proportion to class size (largest remainder, at least one per class) and
/// never straddle a class boundary, so every shard sees at most
/// `classes_per_client` distinct labels. Chunks are dealt in a random order.
pub fn partition_label_shards(
    ds: &Dataset,
    k: usize,
    classes_per_client: usize,
    rng: &mut RngStream,
) -> Result<Partition> {
    let labels = ds.labels().ok_or(Error::LabelsAbsent)?;
    if k == 0 || classes_per_client == 0 {
        return Err(Error::InvalidArgument(
            "K and classes_per_client must be >= 1".into(),
        ));
    }
    let n = ds.len();
    let chunks = k * classes_per_client;
    if chunks > n {
        return Err(Error::Unchunkable { n, chunks });
    }

    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if by_class.len() <= l {
            by_class.resize(l + 1, Vec::new());
        }
        by_class[l].push(i);
    }
    by_class.retain(|c| !c.is_empty());
    if by_class.len() > chunks {
        return Err(Error::InvalidArgument(format!(
            "{} classes do not fit in {chunks} single-class chunks",
            by_class.len()
        )));
    }

    let counts = apportion(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), chunks);
    let mut pieces: Vec<Vec<usize>> = Vec::with_capacity(chunks);
    for (class, &c) in by_class.iter().zip(&counts) {
        let mut start = 0;
        for size in balanced_sizes(class.len(), c) {
            pieces.push(class[start..start + size].to_vec());
            start += size;
        }
    }
    debug_assert_eq!(pieces.len(), chunks);

    let mut order: Vec<usize> = (0..chunks).collect();
    order.shuffle(rng);
    let assignments = order
        .chunks(classes_per_client)
        .map(|group| {
            let mut shard: Vec<usize> = group
                .iter()
                .flat_map(|&c| pieces[c].iter().copied())
                .collect();
            shard.sort_unstable();
            shard
        })
        .collect();
    Partition::new(
        assignments,
        PartitionScheme::LabelShards { classes_per_client },
        n,
    )
}

/// Splits `total` slots over groups proportionally to `sizes`, each group
/// getting at least one slot and no more slots than members.
fn apportion(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let spare = total - sizes.len();
    let mut counts: Vec<usize> = vec![1; sizes.len()];
    // remaining slots by largest remainder over the extra capacity
    let exact: Vec<f64> = sizes
        .iter()
        .map(|&s| spare as f64 * s as f64 / n as f64)
        .collect();
    let mut assigned = 0;
    for (c, e) in counts.iter_mut().zip(&exact) {
        let base = e.floor() as usize;
        *c += base;
        assigned += base;
    }
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = spare - assigned;
    while left > 0 {
        let mut progressed = false;
        for &g in &order {
            if left == 0 {
                break;
            }
            if counts[g] < sizes[g] {
                counts[g] += 1;
                left -= 1;
                progressed = true;
            }
        }
        assert!(progressed, "total <= n guarantees room");
    }
    // a class cannot be cut into more pieces than it has members
    let mut overflow = 0;
    for (c, &s) in counts.iter_mut().zip(sizes) {
        if *c > s {
            overflow += *c - s;
            *c = s;
        }
    }
    while overflow > 0 {
        for (c, &s) in counts.iter_mut().zip(sizes) {
            if overflow > 0 && *c < s {
                *c += 1;
                overflow -= 1;
            }
        }
    }
    counts
}
