//! Multi-domain batch composition, the summed per-domain loss, SGD with a
//! step schedule, and the epoch loop with best-on-validation selection.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{capture_state, restore_state};
use crate::data::{AugmentConfig, ImageDataset};
use crate::error::{DsamError, Result};
use crate::evaluation::{evaluate_accuracy, EvalRule};
use crate::init::{derive_seed, param_rng};
use crate::model::{DomainId, Network, NetworkKind};

pub mod sampler;
pub mod sgd;
pub mod split;
pub mod step;

pub use sampler::{epoch_length, DomainBatchSampler, MultiDomainBatch};
pub use sgd::Sgd;
pub use split::{split_train_val, val_count, DomainSplit};
pub use step::{compute_losses, training_step, StepLosses, StepOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay_factor: f64,
    /// Epochs per learning-rate plateau.
    pub lr_decay_period: usize,
    pub per_domain_batch: usize,
    pub val_fraction: f64,
    pub repetitions: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            epochs: 30,
            lr_decay_factor: 0.2,
            lr_decay_period: 10,
            per_domain_batch: 32,
            val_fraction: 0.1,
            repetitions: 5,
            seed: 0,
            weight_decay: 0.0,
            augment: true,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn resnet() -> Self {
        Self::default()
    }

    pub fn alexnet() -> Self {
        TrainConfig {
            base_lr: 0.007,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_lr", self.base_lr),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DsamError::config(field, format!("must be positive, got {v}")));
            }
        }
        let counts = [
            ("epochs", self.epochs),
            ("lr_decay_period", self.lr_decay_period),
            ("per_domain_batch", self.per_domain_batch),
            ("repetitions", self.repetitions),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(DsamError::config(field, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DsamError::config("momentum", format!("{} is not in [0, 1)", self.momentum)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(DsamError::config(
                "val_fraction",
                format!("{} is not in (0, 1)", self.val_fraction),
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DsamError::config("weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// `base_lr * factor^floor(epoch / period)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_period) as i32)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        network: NetworkKind,
        sources: Vec<String>,
        seed: u64,
        epochs: usize,
        epoch_length: usize,
        config_hash: Option<String>,
    },
    Step {
        epoch: usize,
        step: usize,
        lr: f64,
        loss: f64,
        domain_losses: Vec<f64>,
        /// Digest of the sample indices in the batch, group-major.
        batch_digest: String,
    },
    Epoch {
        epoch: usize,
        lr: f64,
        mean_loss: f64,
        val_accuracy: f64,
        best_val_accuracy: f64,
        best_epoch: usize,
    },
}

/// Source samples for one run. `split.train[i]` and `split.val[i]` are
/// dataset indices of source `i`, named `sources[i]`.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub dataset: &'a ImageDataset,
    pub sources: &'a [String],
    pub split: &'a DomainSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub steps: usize,
    pub records: Vec<LogRecord>,
}

/// Accuracy on the held-out source samples. D-SAM scores each sample without
/// its own domain's module.
pub fn validation_accuracy(net: &Network, data: &TrainData) -> Result<f64> {
    let groups: Vec<(DomainId, Vec<usize>)> = data
        .split
        .val
        .iter()
        .enumerate()
        .map(|(i, v)| (DomainId::Source(i), v.clone()))
        .collect();
    let rule = match net.kind() {
        NetworkKind::Dsam => EvalRule::LeaveOneDomainOut,
        NetworkKind::DeepAll => EvalRule::Ensemble,
    };
    evaluate_accuracy(net, data.dataset, &groups, rule)
}

fn emit(records: &mut Vec<LogRecord>, sink: &mut Option<&mut dyn Write>, record: LogRecord) -> Result<()> {
    if let Some(w) = sink.as_deref_mut() {
        let line = serde_json::to_string(&record)?;
        writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| DsamError::io("training log", e))?;
    }
    records.push(record);
    Ok(())
}

fn batch_digest(indices: &[usize]) -> String {
    let mut h = Sha256::new();
    for i in indices {
        h.update((*i as u64).to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Runs `epochs * epoch_length` steps, validating after every epoch, and
/// leaves `net` holding the parameters of the best-validating epoch (the
/// earliest on ties).
pub fn train(
    net: &Network,
    data: &TrainData,
    cfg: &TrainConfig,
    config_hash: Option<String>,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let num_sources = data.split.train.len();
    if num_sources != data.sources.len() || num_sources != data.split.val.len() {
        return Err(DsamError::InvalidSpec(format!(
            "split has {} train and {} val groups for {} sources",
            num_sources,
            data.split.val.len(),
            data.sources.len()
        )));
    }
    if let Network::DSam(m) = net {
        if m.num_sources() != num_sources {
            return Err(DsamError::InvalidSpec(format!(
                "model has {} modules but the data has {num_sources} sources",
                m.num_sources()
            )));
        }
    }
    let b = cfg.per_domain_batch;
    let mut sampler = DomainBatchSampler::new(&data.split.train, b, param_rng(derive_seed(cfg.seed, 21)))?;
    let mut augment_rng = param_rng(derive_seed(cfg.seed, 22));
    let mut dropout_rng = param_rng(derive_seed(cfg.seed, 23));
    let params = net.named_params().into_iter().map(|(_, v)| v).collect();
    let mut opt = Sgd::new(params, cfg.momentum, cfg.weight_decay);
    let input_size = net.backbone().input_size();
    let (dtype, device) = (net.dtype(), net.device());

    let mut records = Vec::new();
    emit(
        &mut records,
        &mut sink,
        LogRecord::Header {
            network: net.kind(),
            sources: data.sources.to_vec(),
            seed: cfg.seed,
            epochs: cfg.epochs,
            epoch_length: sampler.epoch_length(),
            config_hash,
        },
    )?;

    let mut best: Option<(usize, f64, Vec<(String, candle_core::Tensor)>)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut loss_sum = 0.0;
        for _ in 0..sampler.epoch_length() {
            let batch = sampler.next_batch();
            let augment = cfg.augment.then_some((&cfg.augmentation, &mut augment_rng));
            let flat = batch.flat();
            let (images, labels) = data.dataset.load_batch(&flat, input_size, augment, dtype, &device)?;
            let out = training_step(net, &mut opt, &images, &labels, b, lr, step, &mut dropout_rng)?;
            loss_sum += out.loss;
            emit(
                &mut records,
                &mut sink,
                LogRecord::Step {
                    epoch,
                    step,
                    lr,
                    loss: out.loss,
                    domain_losses: out.domain_losses,
                    batch_digest: batch_digest(&flat),
                },
            )?;
            step += 1;
        }
        let val = validation_accuracy(net, data)?;
        if best.as_ref().is_none_or(|(_, acc, _)| val > *acc) {
            best = Some((epoch, val, capture_state(net)?));
        }
        let (best_epoch, best_val) = best.as_ref().map(|(e, a, _)| (*e, *a)).unwrap_or((epoch, val));
        log::info!(
            "epoch {}/{} lr {lr:.2e} loss {:.4} val {val:.2} best {best_val:.2}@{best_epoch}",
            epoch + 1,
            cfg.epochs,
            loss_sum / sampler.epoch_length() as f64
        );
        emit(
            &mut records,
            &mut sink,
            LogRecord::Epoch {
                epoch,
                lr,
                mean_loss: loss_sum / sampler.epoch_length() as f64,
                val_accuracy: val,
                best_val_accuracy: best_val,
                best_epoch,
            },
        )?;
    }
    let (best_epoch, best_val_accuracy, state) = best.expect("at least one epoch");
    restore_state(net, &state)?;
    Ok(TrainOutcome {
        best_epoch,
        best_val_accuracy,
        steps: step,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_plateaus() {
        let cfg = TrainConfig::resnet();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert_eq!(lr_at(9, &cfg), 0.01);
        assert!((lr_at(10, &cfg) - 0.002).abs() < 1e-15);
        assert!((lr_at(20, &cfg) - 0.0004).abs() < 1e-15);
        assert_eq!(lr_at(0, &TrainConfig::alexnet()), 0.007);
        let distinct: std::collections::BTreeSet<u64> = (0..30).map(|e| lr_at(e, &cfg).to_bits()).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { val_fraction: 0.0, ..Default::default() },
            TrainConfig { val_fraction: 1.0, ..Default::default() },
            TrainConfig { base_lr: -1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
        ];
        for cfg in bad {
            match cfg.validate() {
                Err(DsamError::Config { .. }) => {}
                other => panic!("expected a config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let cfg: TrainConfig = toml::from_str("epochs = 2\nbase_lr = 0.007\n").unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.per_domain_batch, 32);
        let back: TrainConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
