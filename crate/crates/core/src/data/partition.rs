use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Sample};
use crate::error::{Error, Result};
use crate::seed::rng_from;

/// How samples are spread across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionScheme {
    /// Uniform random split; client sizes differ by at most one.
    Iid,
    /// Samples sorted by label, cut into `shards_per_client * n_clients`
    /// contiguous shards, and each client receives `shards_per_client` of them.
    LabelShard { shards_per_client: usize },
    /// Per-class client proportions drawn from a symmetric Dirichlet.
    Dirichlet { alpha: f64 },
}

/// Disjoint, exhaustive split of `samples` into `n_clients` non-empty
/// datasets, deterministic in `seed`.
pub fn partition_clients(
    samples: Vec<Sample>,
    n_clients: usize,
    scheme: PartitionScheme,
    seed: u64,
) -> Result<Vec<ClientDataset>> {
    if n_clients == 0 {
        return Err(Error::InvalidArgument("n_clients must be at least 1".into()));
    }
    if samples.len() < n_clients {
        return Err(Error::TooFewSamples {
            samples: samples.len(),
            clients: n_clients,
        });
    }
    let mut rng = rng_from(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);

    let buckets: Vec<Vec<usize>> = match scheme {
        PartitionScheme::Iid => even_chunks(&order, n_clients),
        PartitionScheme::LabelShard { shards_per_client } => {
            let n_shards = shards_per_client * n_clients;
            if shards_per_client == 0 {
                return Err(Error::InvalidArgument("shards_per_client must be >= 1".into()));
            }
            if samples.len() < n_shards {
                return Err(Error::TooFewSamples {
                    samples: samples.len(),
                    clients: n_shards,
                });
            }
            // stable sort keeps the shuffled order within a label
            order.sort_by_key(|&i| samples[i].label);
            let shards = even_chunks(&order, n_shards);
            let mut shard_ids: Vec<usize> = (0..n_shards).collect();
            shard_ids.shuffle(&mut rng);
            shard_ids
                .chunks(shards_per_client)
                .map(|ids| ids.iter().flat_map(|&s| shards[s].iter().copied()).collect())
                .collect()
        }
        PartitionScheme::Dirichlet { alpha } => {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::InvalidArgument(format!("dirichlet alpha {alpha}")));
            }
            let gamma = Gamma::new(alpha, 1.0)
                .map_err(|e| Error::InvalidArgument(format!("dirichlet alpha {alpha}: {e}")))?;
            let n_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
            let mut buckets = vec![Vec::new(); n_clients];
            for class in 0..n_classes {
                let members: Vec<usize> = order
                    .iter()
                    .copied()
                    .filter(|&i| samples[i].label == class)
                    .collect();
                let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = draws.iter().sum();
                let mut start = 0usize;
                let mut acc = 0.0;
                for (client, d) in draws.iter().enumerate() {
                    acc += d / total;
                    let end = if client + 1 == n_clients {
                        members.len()
                    } else {
                        ((acc * members.len() as f64).round() as usize).clamp(start, members.len())
                    };
                    buckets[client].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            fill_empty(&mut buckets);
            buckets
        }
    };

    let mut slots: Vec<Option<Sample>> = samples.into_iter().map(Some).collect();
    buckets
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| {
            let s = idx
                .into_iter()
                .map(|i| slots[i].take().expect("index assigned twice"))
                .collect();
            ClientDataset::new(client_id, s)
        })
        .collect()
}

fn even_chunks(items: &[usize], n: usize) -> Vec<Vec<usize>> {
    let base = items.len() / n;
    let extra = items.len() % n;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Moves samples from the largest buckets into empty ones.
fn fill_empty(buckets: &mut [Vec<usize>]) {
    while let Some(empty) = buckets.iter().position(|b| b.is_empty()) {
        let donor = (0..buckets.len())
            .max_by_key(|&i| (buckets[i].len(), std::cmp::Reverse(i)))
            .expect("at least one bucket");
        let moved = buckets[donor].pop().expect("donor has samples");
        buckets[empty].push(moved);
    }
}
