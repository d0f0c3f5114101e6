use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::sgd::Sgd;
use crate::error::{DsamError, Result};
use crate::model::Network;
use crate::ops::cross_entropy;

/// Loss graph of one batch. For D-SAM `total` is the sum of the per-domain
/// mean cross-entropies; for the baseline it is the mean over the pooled batch.
#[derive(Debug)]
pub struct StepLosses {
    pub total: Tensor,
    pub per_domain: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub domain_losses: Vec<f64>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// `images` and `labels` are laid out group-major: rows
/// `i * per_domain..(i + 1) * per_domain` belong to source `i`. The backbone
/// runs once on the whole batch; each module then sees only its own rows.
pub fn compute_losses(
    net: &Network,
    images: &Tensor,
    labels: &Tensor,
    per_domain: usize,
    mut train: Option<&mut ChaCha8Rng>,
) -> Result<StepLosses> {
    let n = images.dim(0)?;
    if per_domain == 0 || n % per_domain != 0 || labels.dim(0)? != n {
        return Err(DsamError::ShapeMismatch {
            context: "multi-domain batch".into(),
            dim: "batch",
            expected: per_domain * (n / per_domain.max(1)),
            actual: n,
        });
    }
    let groups = n / per_domain;
    match net {
        Network::DSam(model) => {
            if groups != model.num_sources() {
                return Err(DsamError::ShapeMismatch {
                    context: "multi-domain batch".into(),
                    dim: "domain groups",
                    expected: model.num_sources(),
                    actual: groups,
                });
            }
            let out = model.run_backbone(images, train.as_deref_mut())?;
            let mut per = Vec::with_capacity(groups);
            for i in 0..groups {
                let start = i * per_domain;
                let sub = out.narrow_batch(start, per_domain)?;
                let (_, logits) = model.run_module(i, &sub, train.as_deref_mut())?;
                per.push(cross_entropy(&logits, &labels.narrow(0, start, per_domain)?)?);
            }
            let total = Tensor::stack(&per, 0)?.sum_all()?;
            Ok(StepLosses { total, per_domain: per })
        }
        Network::DeepAll(model) => {
            let logits = model.forward(images, train)?;
            let total = cross_entropy(&logits, labels)?;
            let per = (0..groups)
                .map(|i| {
                    let start = i * per_domain;
                    cross_entropy(
                        &logits.narrow(0, start, per_domain)?.detach(),
                        &labels.narrow(0, start, per_domain)?,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StepLosses { total, per_domain: per })
        }
    }
}

/// Forward, backward and one optimizer update. A non-finite loss aborts
/// before any parameter is touched.
#[allow(clippy::too_many_arguments)]
pub fn training_step(
    net: &Network,
    opt: &mut Sgd,
    images: &Tensor,
    labels: &Tensor,
    per_domain: usize,
    lr: f64,
    step: usize,
    train: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let losses = compute_losses(net, images, labels, per_domain, Some(train))?;
    let loss = scalar(&losses.total)?;
    let domain_losses = losses.per_domain.iter().map(scalar).collect::<Result<Vec<_>>>()?;
    if !loss.is_finite() {
        return Err(DsamError::NonFiniteLoss { step, lr, domain_losses });
    }
    let grads = losses.total.backward()?;
    opt.step(&grads, lr)?;
    Ok(StepOutcome { loss, domain_losses })
}
