use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d};
use super::{check_input, Backbone, BackboneConfig, BackboneOutput, TapPoint};
use crate::error::{DsamError, Result};
use crate::feature_map::FeatureMap;
use crate::init::ParamRng;
use crate::ops::{Downsample, LayerOp, Nonlinearity};

/// Stack of stride-2 3x3 convolutions, each optionally batch-normalized,
/// with ReLU; every stage exit is a tap.
#[derive(Debug)]
pub struct ToyBackbone {
    config: BackboneConfig,
    stages: Vec<(Conv2d, Option<BatchNorm2d>)>,
    taps: Vec<TapPoint>,
}

impl ToyBackbone {
    pub fn new(config: BackboneConfig, rng: &mut ParamRng, dtype: DType, device: &Device) -> Result<Self> {
        let BackboneConfig::Toy {
            channels,
            input_size,
            batch_norm,
            ..
        } = &config
        else {
            return Err(DsamError::InvalidSpec("toy backbone needs a toy config".into()));
        };
        if channels.len() < 2 || channels.contains(&0) {
            return Err(DsamError::InvalidSpec(format!(
                "toy backbone needs at least 2 non-empty stages, got {channels:?}"
            )));
        }
        let mut stages = Vec::new();
        let mut taps = Vec::new();
        let mut in_c = 3;
        let mut size = *input_size;
        let mut stride = 1;
        for (k, &c) in channels.iter().enumerate() {
            let conv = Conv2d::new(rng, in_c, c, 3, 2, 1, !batch_norm, dtype, device)?;
            let bn = batch_norm.then(|| BatchNorm2d::new(c, dtype, device)).transpose()?;
            size = conv.out_size(size);
            stride *= 2;
            if size == 0 {
                return Err(DsamError::InvalidSpec(format!(
                    "input size {input_size} too small for {} stages",
                    channels.len()
                )));
            }
            taps.push(TapPoint {
                name: format!("stage{}", k + 1),
                channels: c,
                stride,
                spatial: (size, size),
                collapsed: false,
            });
            stages.push((conv, bn));
            in_c = c;
        }
        Ok(ToyBackbone { config, stages, taps })
    }
}

impl Backbone for ToyBackbone {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    fn bridges(&self) -> Vec<Downsample> {
        vec![Downsample::Subsample { stride: 2 }; self.stages.len() - 1]
    }

    fn forward(&self, images: &Tensor, train: Option<&mut ChaCha8Rng>) -> Result<BackboneOutput> {
        check_input(images, self.config.input_size())?;
        let mut x = images.clone();
        let mut taps = Vec::with_capacity(self.stages.len());
        for (conv, bn) in &self.stages {
            x = conv.forward(&x)?;
            if let Some(bn) = bn {
                x = bn.forward(&x, train.is_some())?;
            }
            x = x.relu()?;
            taps.push(FeatureMap::new(x.clone())?);
        }
        let pooled = taps.last().expect("at least two stages").global_avg_pool()?;
        Ok(BackboneOutput { taps, pooled })
    }

    fn feature_dim(&self) -> usize {
        self.taps.last().map(|t| t.channels).unwrap_or(0)
    }

    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (k, (conv, bn)) in self.stages.iter().enumerate() {
            conv.push_params(&format!("stages.{k}.conv"), &mut out);
            if let Some(bn) = bn {
                bn.push_params(&format!("stages.{k}.bn"), &mut out);
            }
        }
        out
    }

    fn named_buffers(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (k, (_, bn)) in self.stages.iter().enumerate() {
            if let Some(bn) = bn {
                bn.push_buffers(&format!("stages.{k}.bn"), &mut out);
            }
        }
        out
    }

    fn layer_ops(&self) -> Vec<LayerOp> {
        let mut ops = Vec::new();
        for (conv, bn) in &self.stages {
            ops.push(conv.op());
            if let Some(bn) = bn {
                ops.push(bn.op());
            }
            ops.push(LayerOp::Activation(Nonlinearity::Relu));
        }
        ops.push(LayerOp::GlobalAvgPool);
        ops
    }

    fn is_pretrained(&self) -> bool {
        self.config.weights().is_some()
    }
}
