use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{DsamError, Result};
use crate::init::{derive_seed, param_rng};

/// Per-domain train and validation index lists, positions matching the
/// source order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

/// Number of held-out samples for a domain of size `n`.
pub fn val_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Stratified per-domain split. Each domain is shuffled with its own stream of
/// `seed`; both halves are returned sorted.
pub fn split_train_val(per_domain: &[Vec<usize>], fraction: f64, seed: u64) -> Result<DomainSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DsamError::config("val_fraction", format!("{fraction} is not in (0, 1)")));
    }
    let mut train = Vec::with_capacity(per_domain.len());
    let mut val = Vec::with_capacity(per_domain.len());
    for (d, indices) in per_domain.iter().enumerate() {
        if indices.len() < 2 {
            return Err(DsamError::EmptyDataset(format!(
                "source {d} has {} samples; a train/val split needs at least 2",
                indices.len()
            )));
        }
        let mut order = indices.clone();
        order.sort_unstable();
        order.shuffle(&mut param_rng(derive_seed(seed, d as u64)));
        let k = val_count(order.len(), fraction);
        let mut v = order[..k].to_vec();
        let mut t = order[k..].to_vec();
        v.sort_unstable();
        t.sort_unstable();
        val.push(v);
        train.push(t);
    }
    Ok(DomainSplit { train, val })
}
