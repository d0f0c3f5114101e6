//! Leave-one-domain-out validation scoring, test-time ensembling, accuracy,
//! linear probing of extracted features, and report tables.

use candle_core::Tensor;

use crate::data::ImageDataset;
use crate::error::{DsamError, Result};
use crate::model::{DSamModel, DomainId, Network};
use crate::ops::{softmax_last, to_f64_vec};

pub mod probe;
pub mod report;

pub use probe::{linear_probe, FeatureSet, LinearSvm, SvmConfig};
pub use report::{build_report, EvalReport, FeatureSource, ReportMetadata, ReportMode, ReportRow};

/// Class probabilities of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.is_empty() || values.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
            return Err(DsamError::InvalidSpec(format!("not a probability vector: {values:?}")));
        }
        Ok(ProbabilityVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn argmax_rows(scores: &Tensor) -> Result<Vec<usize>> {
    let (n, c) = scores.dims2()?;
    let flat = to_f64_vec(scores)?;
    Ok((0..n).map(|i| argmax(&flat[i * c..(i + 1) * c])).collect())
}

pub fn probability_rows(probs: &Tensor) -> Result<Vec<ProbabilityVector>> {
    let (n, c) = probs.dims2()?;
    let flat = to_f64_vec(probs)?;
    (0..n).map(|i| ProbabilityVector::new(flat[i * c..(i + 1) * c].to_vec())).collect()
}

/// Softmax of the element-wise sum of logit tensors.
pub fn softmax_of_sum(logits: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = logits
        .split_first()
        .ok_or_else(|| DsamError::InvalidSpec("no logits to combine".into()))?;
    let mut sum = first.clone();
    for l in rest {
        sum = (sum + l)?;
    }
    softmax_last(&sum)
}

/// Probabilities for samples of source domain `v`: softmax over the summed
/// logits of every module except the one trained on `v`.
pub fn validation_probs(model: &DSamModel, images: &Tensor, v: usize) -> Result<Tensor> {
    let s = model.num_sources();
    if s < 2 {
        return Err(DsamError::TooFewSources(s));
    }
    if v >= s {
        return Err(DsamError::UnknownDomain(format!("source index {v}")));
    }
    let out = model.run_backbone(images, None)?;
    let logits = (0..s)
        .filter(|&i| i != v)
        .map(|i| Ok(model.run_module(i, &out, None)?.1))
        .collect::<Result<Vec<_>>>()?;
    softmax_of_sum(&logits)
}

/// Probabilities from the summed logits of all modules.
pub fn test_probs(model: &DSamModel, images: &Tensor) -> Result<Tensor> {
    softmax_of_sum(&model.forward_all(images, None)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalRule {
    /// Each source sample is scored without its own domain's module.
    LeaveOneDomainOut,
    /// All modules participate.
    Ensemble,
}

/// Class scores for a batch under `rule`. Samples are assumed to share `domain`.
pub fn predict_probs(net: &Network, images: &Tensor, domain: DomainId, rule: EvalRule) -> Result<Tensor> {
    match net {
        Network::DSam(m) => match (rule, domain) {
            (EvalRule::LeaveOneDomainOut, DomainId::Source(v)) => validation_probs(m, images, v),
            (EvalRule::LeaveOneDomainOut, DomainId::Target(_)) => Err(DsamError::UnknownDomain(
                "leave-one-domain-out scoring needs source samples".into(),
            )),
            (EvalRule::Ensemble, _) => test_probs(m, images),
        },
        Network::DeepAll(m) => softmax_last(&m.forward(images, None)?),
    }
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(DsamError::EmptyDataset("no predictions to score".into()));
    }
    if predictions.len() != labels.len() {
        return Err(DsamError::ShapeMismatch {
            context: "accuracy".into(),
            dim: "samples",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

pub const EVAL_BATCH: usize = 128;

/// Percent of argmax-correct predictions over `groups`, each a domain and the
/// dataset indices of its samples.
pub fn evaluate_accuracy(
    net: &Network,
    dataset: &ImageDataset,
    groups: &[(DomainId, Vec<usize>)],
    rule: EvalRule,
) -> Result<f64> {
    let input_size = net.backbone().input_size();
    let (dtype, device) = (net.dtype(), net.device());
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for (domain, indices) in groups {
        for chunk in indices.chunks(EVAL_BATCH) {
            let (images, _) = dataset.load_batch(chunk, input_size, None, dtype, &device)?;
            let probs = predict_probs(net, &images, *domain, rule)?;
            predictions.extend(argmax_rows(&probs)?);
            labels.extend(chunk.iter().map(|&i| dataset.samples[i].label));
        }
    }
    accuracy(&predictions, &labels)
}
