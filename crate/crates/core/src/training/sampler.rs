use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{DsamError, Result};

/// One step's samples: group `i` holds dataset indices of source `i` only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiDomainBatch {
    pub groups: Vec<Vec<usize>>,
}

impl MultiDomainBatch {
    pub fn per_domain(&self) -> usize {
        self.groups[0].len()
    }

    pub fn total(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Group-major concatenation; group `i` occupies rows
    /// `i * per_domain..(i + 1) * per_domain`.
    pub fn flat(&self) -> Vec<usize> {
        self.groups.concat()
    }
}

#[derive(Clone, Debug)]
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn draw(&mut self, group: &mut Vec<usize>, count: usize, rng: &mut ChaCha8Rng) {
        let target = group.len() + count;
        let start = group.len();
        while group.len() < target {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                // keep this group duplicate-free across the reshuffle
                let drawn = &group[start..];
                let (mut fresh, used): (Vec<usize>, Vec<usize>) =
                    self.order.iter().partition(|i| !drawn.contains(i));
                fresh.extend(used);
                self.order = fresh;
                self.pos = 0;
            }
            group.push(self.order[self.pos]);
            self.pos += 1;
        }
    }
}

/// Endless stream of balanced multi-domain batches. Each domain is traversed
/// in a shuffled order and reshuffled when exhausted, so smaller domains cycle
/// while the largest is visited once per epoch.
#[derive(Clone, Debug)]
pub struct DomainBatchSampler {
    cursors: Vec<Cursor>,
    per_domain: usize,
    epoch_length: usize,
    rng: ChaCha8Rng,
}

impl DomainBatchSampler {
    pub fn new(domains: &[Vec<usize>], per_domain: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        if per_domain == 0 {
            return Err(DsamError::config("per_domain_batch", "must be at least 1"));
        }
        if domains.is_empty() {
            return Err(DsamError::EmptyDataset("no source domains to sample".into()));
        }
        let mut cursors = Vec::with_capacity(domains.len());
        for (d, indices) in domains.iter().enumerate() {
            if indices.is_empty() {
                return Err(DsamError::EmptyDataset(format!("source {d} has no training samples")));
            }
            let mut order = indices.clone();
            order.shuffle(&mut rng);
            cursors.push(Cursor { order, pos: 0 });
        }
        let largest = domains.iter().map(Vec::len).max().unwrap_or(0);
        Ok(DomainBatchSampler {
            cursors,
            per_domain,
            epoch_length: epoch_length(largest, per_domain),
            rng,
        })
    }

    pub fn epoch_length(&self) -> usize {
        self.epoch_length
    }

    pub fn num_domains(&self) -> usize {
        self.cursors.len()
    }

    /// The next batch. When `per_domain` exceeds a domain's size, every sample
    /// of that domain appears either `floor(b / n)` or `ceil(b / n)` times in
    /// its group.
    pub fn next_batch(&mut self) -> MultiDomainBatch {
        let b = self.per_domain;
        let groups = self
            .cursors
            .iter_mut()
            .map(|cursor| {
                let n = cursor.order.len();
                let mut group = Vec::with_capacity(b);
                if b > n {
                    for _ in 0..b / n {
                        let mut all = cursor.order.clone();
                        all.shuffle(&mut self.rng);
                        group.extend(all);
                    }
                }
                let whole = group.len();
                let mut rest = Vec::with_capacity(b - whole);
                cursor.draw(&mut rest, b - whole, &mut self.rng);
                group.extend(rest);
                group
            })
            .collect();
        MultiDomainBatch { groups }
    }
}

/// Steps needed to traverse the largest source domain once.
pub fn epoch_length(largest_domain: usize, per_domain: usize) -> usize {
    largest_domain.div_ceil(per_domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::param_rng;
    use std::collections::{BTreeMap, BTreeSet};

    fn domains(sizes: &[usize]) -> Vec<Vec<usize>> {
        let mut next = 0;
        sizes
            .iter()
            .map(|&n| {
                let v = (next..next + n).collect();
                next += n;
                v
            })
            .collect()
    }

    #[test]
    fn three_sources_give_96() {
        let mut s = DomainBatchSampler::new(&domains(&[100, 80, 60]), 32, param_rng(0)).unwrap();
        let b = s.next_batch();
        assert_eq!(b.groups.len(), 3);
        assert_eq!(b.total(), 96);
    }

    #[test]
    fn epoch_length_follows_largest_domain() {
        let s = DomainBatchSampler::new(&domains(&[1000, 500, 100]), 32, param_rng(0)).unwrap();
        assert_eq!(s.epoch_length(), 32);
        assert_eq!(epoch_length(64, 32), 2);
        assert_eq!(epoch_length(65, 32), 3);
    }

    #[test]
    fn largest_domain_visited_once_per_epoch() {
        let input = domains(&[96, 40, 10]);
        let mut s = DomainBatchSampler::new(&input, 32, param_rng(1)).unwrap();
        let mut seen = BTreeSet::new();
        for _ in 0..s.epoch_length() {
            let b = s.next_batch();
            for (d, g) in b.groups.iter().enumerate() {
                assert!(g.iter().all(|i| input[d].contains(i)), "group {d} mixes domains");
                let distinct: BTreeSet<_> = g.iter().collect();
                if g.len() <= input[d].len() {
                    assert_eq!(distinct.len(), g.len());
                }
            }
            seen.extend(b.groups[0].iter().copied());
        }
        assert_eq!(seen.len(), 96);
    }

    #[test]
    fn oversized_batch_repeats_evenly() {
        let mut s = DomainBatchSampler::new(&domains(&[5, 40]), 12, param_rng(2)).unwrap();
        for _ in 0..4 {
            let b = s.next_batch();
            let mut counts = BTreeMap::new();
            for &i in &b.groups[0] {
                *counts.entry(i).or_insert(0) += 1;
            }
            assert_eq!(b.groups[0].len(), 12);
            assert_eq!(counts.len(), 5);
            assert!(counts.values().all(|&c| c == 2 || c == 3));
        }
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(DomainBatchSampler::new(&domains(&[4, 4]), 0, param_rng(0)).is_err());
        assert!(DomainBatchSampler::new(&[vec![1], vec![]], 2, param_rng(0)).is_err());
    }
}
