//! Linear maximum-margin probe: one-vs-rest L2-regularized squared-hinge SVM
//! solved by dual coordinate descent (the liblinear formulation), with a
//! bias feature of 1 appended to every sample.

use rand::seq::SliceRandom;

use crate::error::{DsamError, Result};
use crate::init::param_rng;

/// Row-major feature matrix with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub vectors: Vec<f32>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn new(dim: usize, vectors: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * labels.len() {
            return Err(DsamError::ShapeMismatch {
                context: "feature set".into(),
                dim: "values",
                expected: dim * labels.len(),
                actual: vectors.len(),
            });
        }
        Ok(FeatureSet { dim, vectors, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Per-row concatenation of several sets over the same samples.
    pub fn concat(parts: &[&FeatureSet]) -> Result<FeatureSet> {
        let first = parts
            .first()
            .ok_or_else(|| DsamError::InvalidSpec("nothing to concatenate".into()))?;
        for p in parts {
            if p.labels != first.labels {
                return Err(DsamError::InvalidSpec(
                    "concatenated feature sets must describe the same samples".into(),
                ));
            }
        }
        let dim = parts.iter().map(|p| p.dim).sum();
        let mut vectors = Vec::with_capacity(dim * first.len());
        for i in 0..first.len() {
            for p in parts {
                vectors.extend_from_slice(p.row(i));
            }
        }
        FeatureSet::new(dim, vectors, first.labels.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            tol: 1e-4,
            max_iter: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearSvm {
    classes: Vec<usize>,
    /// One `dim + 1` weight vector per class; the last entry multiplies the bias feature.
    weights: Vec<Vec<f64>>,
}

fn dot(w: &[f64], x: &[f32]) -> f64 {
    let d = x.len();
    w[..d].iter().zip(x).map(|(a, &b)| a * b as f64).sum::<f64>() + w[d]
}

fn train_binary(data: &FeatureSet, positive: usize, cfg: &SvmConfig) -> Vec<f64> {
    let n = data.len();
    let d = data.dim;
    let diag = 0.5 / cfg.c;
    let y: Vec<f64> = data.labels.iter().map(|&l| if l == positive { 1.0 } else { -1.0 }).collect();
    let q: Vec<f64> = (0..n)
        .map(|i| data.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + 1.0 + diag)
        .collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; d + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = param_rng(cfg.seed ^ positive as u64);
    for _ in 0..cfg.max_iter {
        order.shuffle(&mut rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let x = data.row(i);
            let g = y[i] * dot(&w, x) - 1.0 + diag * alpha[i];
            let pg = if alpha[i] == 0.0 { g.min(0.0) } else { g };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg.abs() > 1e-12 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).max(0.0);
                let delta = (alpha[i] - old) * y[i];
                for (wj, &xj) in w[..d].iter_mut().zip(x) {
                    *wj += delta * xj as f64;
                }
                w[d] += delta;
            }
        }
        if pg_max - pg_min < cfg.tol {
            break;
        }
    }
    w
}

impl LinearSvm {
    pub fn fit(data: &FeatureSet, cfg: &SvmConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(DsamError::EmptyDataset("linear probe training set".into()));
        }
        if cfg.c <= 0.0 {
            return Err(DsamError::config("c_param", "must be positive"));
        }
        let mut classes = data.labels.clone();
        classes.sort_unstable();
        classes.dedup();
        let weights = classes.iter().map(|&c| train_binary(data, c, cfg)).collect();
        Ok(LinearSvm { classes, weights })
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len() - 1
    }

    pub fn predict(&self, data: &FeatureSet) -> Result<Vec<usize>> {
        if data.dim != self.dim() {
            return Err(DsamError::ShapeMismatch {
                context: "linear probe".into(),
                dim: "feature dimension",
                expected: self.dim(),
                actual: data.dim,
            });
        }
        Ok((0..data.len())
            .map(|i| {
                let scores: Vec<f64> = self.weights.iter().map(|w| dot(w, data.row(i))).collect();
                self.classes[super::argmax(&scores)]
            })
            .collect())
    }
}

/// Trains on `train`, returns percent accuracy on `test`.
pub fn linear_probe(train: &FeatureSet, test: &FeatureSet, c_param: f64, seed: u64) -> Result<f64> {
    if train.dim != test.dim {
        return Err(DsamError::ShapeMismatch {
            context: "linear probe".into(),
            dim: "feature dimension",
            expected: train.dim,
            actual: test.dim,
        });
    }
    let svm = LinearSvm::fit(
        train,
        &SvmConfig {
            c: c_param,
            seed,
            ..SvmConfig::default()
        },
    )?;
    super::accuracy(&svm.predict(test)?, &test.labels)
}
