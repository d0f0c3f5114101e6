//! Backbone adapters: the shared network whose intermediate outputs (taps)
//! feed the aggregation modules.

use std::collections::HashMap;
use std::fmt::Debug;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsamError, Result};
use crate::feature_map::FeatureMap;
use crate::init::param_rng;
use crate::ops::{Downsample, LayerOp};

mod alexnet;
mod layers;
mod resnet;
mod toy;

pub use alexnet::AlexNet;
pub use layers::{BatchNorm2d, Conv2d, Linear};
pub use resnet::ResNet18;
pub use toy::ToyBackbone;

/// A named intermediate output of the backbone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub name: String,
    pub channels: usize,
    /// Total spatial reduction relative to the input image.
    pub stride: usize,
    /// Spatial size at the backbone's configured input size.
    pub spatial: (usize, usize),
    /// Fully connected output viewed as a `(N, C, 1, 1)` map.
    pub collapsed: bool,
}

#[derive(Debug)]
pub struct BackboneOutput {
    /// One map per tap point, shallowest first.
    pub taps: Vec<FeatureMap>,
    /// Final pooled activation, flattened to `(N, feature_dim)`.
    pub pooled: Tensor,
}

impl BackboneOutput {
    /// Rows `start..start + len` of every tap and of the pooled features.
    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Ok(BackboneOutput {
            taps: self
                .taps
                .iter()
                .map(|t| t.narrow_batch(start, len))
                .collect::<Result<_>>()?,
            pooled: self.pooled.narrow(0, start, len)?,
        })
    }
}

pub trait Backbone: Debug + Send + Sync {
    fn config(&self) -> &BackboneConfig;

    fn taps(&self) -> &[TapPoint];

    /// The backbone's own spatial reduction between tap k and tap k+1.
    fn bridges(&self) -> Vec<Downsample>;

    /// Runs the network. `train` carries the dropout generator and switches
    /// normalization layers to batch statistics.
    fn forward(&self, images: &Tensor, train: Option<&mut ChaCha8Rng>) -> Result<BackboneOutput>;

    fn feature_dim(&self) -> usize;

    fn named_params(&self) -> Vec<(String, Var)>;

    /// Non-trainable state such as normalization running statistics.
    fn named_buffers(&self) -> Vec<(String, Var)> {
        Vec::new()
    }

    fn layer_ops(&self) -> Vec<LayerOp>;

    fn is_pretrained(&self) -> bool;

    fn input_size(&self) -> usize {
        self.config().input_size()
    }

    fn id(&self) -> &'static str {
        self.config().id()
    }

    /// Default dropout on aggregation inputs for modules built over this backbone.
    fn default_aggregation_dropout(&self) -> f64 {
        0.0
    }
}

fn default_toy_channels() -> Vec<usize> {
    vec![16, 32, 64, 128]
}

fn default_toy_input() -> usize {
    32
}

fn default_resnet_input() -> usize {
    224
}

fn default_alexnet_input() -> usize {
    227
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Small strided convnet, one tap per stage.
    Toy {
        #[serde(default = "default_toy_channels")]
        channels: Vec<usize>,
        #[serde(default = "default_toy_input")]
        input_size: usize,
        #[serde(default = "yes")]
        batch_norm: bool,
        #[serde(default)]
        weights: Option<PathBuf>,
    },
    /// ResNet-18 with taps at the exit of each residual stage.
    Resnet18 {
        #[serde(default)]
        weights: Option<PathBuf>,
        #[serde(default)]
        include_stem: bool,
        #[serde(default = "default_resnet_input")]
        input_size: usize,
    },
    /// AlexNet with taps at each convolution and optionally fc6/fc7.
    Alexnet {
        #[serde(default)]
        weights: Option<PathBuf>,
        #[serde(default = "yes")]
        fc_taps: bool,
        /// Which activation serves as the pooled feature vector.
        #[serde(default)]
        pooled_layer: AlexnetPooled,
        #[serde(default = "default_alexnet_input")]
        input_size: usize,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlexnetPooled {
    /// Final spatial max pool, flattened.
    #[default]
    Pool5,
    /// Output of the second fully connected layer; needs `fc_taps`.
    Fc7,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::toy(default_toy_channels(), default_toy_input())
    }
}

impl BackboneConfig {
    /// Toy backbone with batch normalization and random weights.
    pub fn toy(channels: Vec<usize>, input_size: usize) -> Self {
        BackboneConfig::Toy {
            channels,
            input_size,
            batch_norm: true,
            weights: None,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            BackboneConfig::Toy { .. } => "toy",
            BackboneConfig::Resnet18 { .. } => "resnet18",
            BackboneConfig::Alexnet { .. } => "alexnet",
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            BackboneConfig::Toy { input_size, .. }
            | BackboneConfig::Resnet18 { input_size, .. }
            | BackboneConfig::Alexnet { input_size, .. } => *input_size,
        }
    }

    pub fn weights(&self) -> Option<&Path> {
        match self {
            BackboneConfig::Toy { weights, .. }
            | BackboneConfig::Resnet18 { weights, .. }
            | BackboneConfig::Alexnet { weights, .. } => weights.as_deref(),
        }
    }

    /// Same architecture without the external weights reference.
    pub fn without_weights(&self) -> Self {
        let mut out = self.clone();
        match &mut out {
            BackboneConfig::Toy { weights, .. }
            | BackboneConfig::Resnet18 { weights, .. }
            | BackboneConfig::Alexnet { weights, .. } => *weights = None,
        }
        out
    }

    /// Builds the backbone with seeded random weights, then loads pretrained
    /// weights if a path is configured.
    pub fn build(&self, seed: u64, dtype: DType, device: &Device) -> Result<Box<dyn Backbone>> {
        let mut rng = param_rng(seed);
        let backbone: Box<dyn Backbone> = match self {
            BackboneConfig::Toy { .. } => Box::new(ToyBackbone::new(self.clone(), &mut rng, dtype, device)?),
            BackboneConfig::Resnet18 { .. } => Box::new(ResNet18::new(self.clone(), &mut rng, dtype, device)?),
            BackboneConfig::Alexnet { .. } => Box::new(AlexNet::new(self.clone(), &mut rng, dtype, device)?),
        };
        if let Some(path) = self.weights() {
            let tensors = candle_core::safetensors::load(path, device)?;
            load_state(backbone.as_ref(), &tensors, true)?;
        }
        Ok(backbone)
    }
}

/// Copies tensors into the backbone's parameters and buffers by name.
/// Extra tensors (e.g. an ImageNet classifier head) are ignored.
pub fn load_state(
    backbone: &dyn Backbone,
    tensors: &HashMap<String, Tensor>,
    require_all: bool,
) -> Result<()> {
    for (name, var) in backbone.named_params().into_iter().chain(backbone.named_buffers()) {
        match tensors.get(&name) {
            Some(t) => assign(&var, t, &name)?,
            None if require_all => {
                return Err(DsamError::Checkpoint(format!("missing backbone tensor `{name}`")))
            }
            None => {}
        }
    }
    Ok(())
}

pub(crate) fn assign(var: &Var, value: &Tensor, name: &str) -> Result<()> {
    if var.dims() != value.dims() {
        return Err(DsamError::Checkpoint(format!(
            "tensor `{name}` has shape {:?}, expected {:?}",
            value.dims(),
            var.dims()
        )));
    }
    var.set(&value.to_dtype(var.dtype())?)?;
    Ok(())
}

pub(crate) fn check_input(images: &Tensor, input_size: usize) -> Result<()> {
    let (_, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(DsamError::ShapeMismatch {
            context: "backbone input".into(),
            dim: "channels",
            expected: 3,
            actual: c,
        });
    }
    if h != input_size || w != input_size {
        return Err(DsamError::ShapeMismatch {
            context: "backbone input".into(),
            dim: "height",
            expected: input_size,
            actual: h.max(w),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_taps(b: &dyn Backbone, batch: usize) {
        let taps = b.taps();
        for pair in taps.windows(2) {
            assert!(pair[0].stride <= pair[1].stride, "{taps:?}");
        }
        let s = b.input_size();
        let x = Tensor::zeros((batch, 3, s, s), DType::F32, &Device::Cpu).unwrap();
        let out = b.forward(&x, None).unwrap();
        assert_eq!(out.taps.len(), taps.len());
        for (map, tap) in out.taps.iter().zip(taps) {
            assert_eq!(map.channels(), tap.channels, "{}", tap.name);
            assert_eq!(map.spatial(), tap.spatial, "{}", tap.name);
            assert_eq!(map.is_collapsed(), tap.collapsed || tap.spatial == (1, 1));
        }
        assert_eq!(out.pooled.dims(), &[batch, b.feature_dim()]);
        let bridges = b.bridges();
        assert_eq!(bridges.len(), taps.len() - 1);
        for (k, bridge) in bridges.iter().enumerate() {
            assert_eq!(bridge.output_spatial(taps[k].spatial), taps[k + 1].spatial);
        }
    }

    #[test]
    fn toy_taps() {
        let b = BackboneConfig::default().build(0, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(b.taps().len(), 4);
        check_taps(b.as_ref(), 2);
    }

    #[test]
    fn resnet_taps() {
        let cfg = BackboneConfig::Resnet18 {
            weights: None,
            include_stem: true,
            input_size: 64,
        };
        let b = cfg.build(0, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(b.taps().len(), 5);
        assert_eq!(b.feature_dim(), 512);
        check_taps(b.as_ref(), 1);
        assert!(b.layer_ops().iter().any(|op| op.is_normalization()));
    }

    #[test]
    fn alexnet_taps() {
        let cfg = BackboneConfig::Alexnet {
            weights: None,
            fc_taps: true,
            pooled_layer: AlexnetPooled::Pool5,
            input_size: 227,
        };
        let b = cfg.build(0, DType::F32, &Device::Cpu).unwrap();
        let names: Vec<_> = b.taps().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["conv1", "conv2", "conv3", "conv4", "conv5", "fc6", "fc7"]);
        assert_eq!(b.feature_dim(), 9216);
        check_taps(b.as_ref(), 1);
        let fc7 = BackboneConfig::Alexnet {
            weights: None,
            fc_taps: true,
            pooled_layer: AlexnetPooled::Fc7,
            input_size: 227,
        };
        assert_eq!(fc7.build(0, DType::F32, &Device::Cpu).unwrap().feature_dim(), 4096);
        let bad = BackboneConfig::Alexnet {
            weights: None,
            fc_taps: false,
            pooled_layer: AlexnetPooled::Fc7,
            input_size: 227,
        };
        assert!(bad.build(0, DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn weights_round_trip_through_safetensors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.safetensors");
        let cfg = BackboneConfig::default();
        let a = cfg.build(1, DType::F32, &Device::Cpu).unwrap();
        let map: HashMap<String, Tensor> = a
            .named_params()
            .into_iter()
            .chain(a.named_buffers())
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, &path).unwrap();
        let b = cfg.build(2, DType::F32, &Device::Cpu).unwrap();
        load_state(b.as_ref(), &map, true).unwrap();
        let ca = crate::init::checksum(&a.named_params()).unwrap();
        assert_eq!(ca, crate::init::checksum(&b.named_params()).unwrap());
        let BackboneConfig::Toy { channels, input_size, .. } = cfg else { unreachable!() };
        let pretrained = BackboneConfig::Toy {
            channels,
            input_size,
            batch_norm: true,
            weights: Some(path.clone()),
        };
        let c = pretrained.build(3, DType::F32, &Device::Cpu).unwrap();
        assert!(c.is_pretrained());
        assert_eq!(ca, crate::init::checksum(&c.named_params()).unwrap());
        let missing = HashMap::new();
        assert!(load_state(b.as_ref(), &missing, true).is_err());
    }
}
