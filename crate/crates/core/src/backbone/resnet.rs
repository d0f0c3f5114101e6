use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d};
use super::{check_input, Backbone, BackboneConfig, BackboneOutput, TapPoint};
use crate::error::{DsamError, Result};
use crate::feature_map::FeatureMap;
use crate::init::ParamRng;
use crate::ops::{Downsample, LayerOp, Nonlinearity};

#[derive(Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(rng: &mut ParamRng, in_c: usize, out_c: usize, stride: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let downsample = if stride != 1 || in_c != out_c {
            Some((
                Conv2d::new(rng, in_c, out_c, 1, stride, 0, false, dtype, dev)?,
                BatchNorm2d::new(out_c, dtype, dev)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock {
            conv1: Conv2d::new(rng, in_c, out_c, 3, stride, 1, false, dtype, dev)?,
            bn1: BatchNorm2d::new(out_c, dtype, dev)?,
            conv2: Conv2d::new(rng, out_c, out_c, 3, 1, 1, false, dtype, dev)?,
            bn2: BatchNorm2d::new(out_c, dtype, dev)?,
            downsample,
        })
    }

    fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(xs)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(xs)?, train)?,
            None => xs.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }

    fn push(&self, prefix: &str, params: &mut Vec<(String, Var)>, buffers: &mut Vec<(String, Var)>) {
        self.conv1.push_params(&format!("{prefix}.conv1"), params);
        self.bn1.push_params(&format!("{prefix}.bn1"), params);
        self.bn1.push_buffers(&format!("{prefix}.bn1"), buffers);
        self.conv2.push_params(&format!("{prefix}.conv2"), params);
        self.bn2.push_params(&format!("{prefix}.bn2"), params);
        self.bn2.push_buffers(&format!("{prefix}.bn2"), buffers);
        if let Some((conv, bn)) = &self.downsample {
            conv.push_params(&format!("{prefix}.downsample.0"), params);
            bn.push_params(&format!("{prefix}.downsample.1"), params);
            bn.push_buffers(&format!("{prefix}.downsample.1"), buffers);
        }
    }

    fn ops(&self, out: &mut Vec<LayerOp>) {
        out.extend([
            self.conv1.op(),
            self.bn1.op(),
            LayerOp::Activation(Nonlinearity::Relu),
            self.conv2.op(),
            self.bn2.op(),
        ]);
        if let Some((conv, bn)) = &self.downsample {
            out.extend([conv.op(), bn.op()]);
        }
        out.push(LayerOp::Activation(Nonlinearity::Relu));
    }
}

/// ResNet-18 with torchvision parameter names, so converted torchvision
/// weights load directly. Taps sit at the exits of `layer1`..`layer4`, plus
/// the stem output when `include_stem` is set.
#[derive(Debug)]
pub struct ResNet18 {
    config: BackboneConfig,
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<Vec<BasicBlock>>,
    include_stem: bool,
    taps: Vec<TapPoint>,
}

impl ResNet18 {
    pub fn new(config: BackboneConfig, rng: &mut ParamRng, dtype: DType, dev: &Device) -> Result<Self> {
        let BackboneConfig::Resnet18 {
            include_stem,
            input_size,
            ..
        } = &config
        else {
            return Err(DsamError::InvalidSpec("resnet18 backbone needs a resnet18 config".into()));
        };
        if *input_size < 32 {
            return Err(DsamError::InvalidSpec(format!(
                "resnet18 input size {input_size} is below the minimum of 32"
            )));
        }
        let conv1 = Conv2d::new(rng, 3, 64, 7, 2, 3, false, dtype, dev)?;
        let bn1 = BatchNorm2d::new(64, dtype, dev)?;
        let widths = [64, 128, 256, 512];
        let mut layers = Vec::new();
        let mut in_c = 64;
        for (k, &w) in widths.iter().enumerate() {
            let stride = if k == 0 { 1 } else { 2 };
            layers.push(vec![
                BasicBlock::new(rng, in_c, w, stride, dtype, dev)?,
                BasicBlock::new(rng, w, w, 1, dtype, dev)?,
            ]);
            in_c = w;
        }

        let mut size = conv1.out_size(*input_size);
        size = (size + 2 - 3) / 2 + 1;
        let mut stride = 4;
        let mut taps = Vec::new();
        if *include_stem {
            taps.push(TapPoint {
                name: "stem".into(),
                channels: 64,
                stride,
                spatial: (size, size),
                collapsed: false,
            });
        }
        for (k, &w) in widths.iter().enumerate() {
            if k > 0 {
                size = (size + 2 - 3) / 2 + 1;
                stride *= 2;
            }
            taps.push(TapPoint {
                name: format!("layer{}", k + 1),
                channels: w,
                stride,
                spatial: (size, size),
                collapsed: false,
            });
        }
        Ok(ResNet18 {
            include_stem: *include_stem,
            config,
            conv1,
            bn1,
            layers,
            taps,
        })
    }
}

impl Backbone for ResNet18 {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    fn bridges(&self) -> Vec<Downsample> {
        let mut out = Vec::new();
        if self.include_stem {
            out.push(Downsample::None);
        }
        out.extend([Downsample::Subsample { stride: 2 }; 3]);
        out
    }

    fn forward(&self, images: &Tensor, train: Option<&mut ChaCha8Rng>) -> Result<BackboneOutput> {
        check_input(images, self.config.input_size())?;
        let train = train.is_some();
        let x = self.bn1.forward(&self.conv1.forward(images)?, train)?.relu()?;
        // values are non-negative after ReLU, so zero padding is exact for max pooling
        let x = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
        let mut x = x.max_pool2d_with_stride(3, 2)?;
        let mut taps = Vec::with_capacity(self.taps.len());
        if self.include_stem {
            taps.push(FeatureMap::new(x.clone())?);
        }
        for layer in &self.layers {
            for block in layer {
                x = block.forward(&x, train)?;
            }
            taps.push(FeatureMap::new(x.clone())?);
        }
        let pooled = taps.last().expect("four residual stages").global_avg_pool()?;
        Ok(BackboneOutput { taps, pooled })
    }

    fn feature_dim(&self) -> usize {
        512
    }

    fn named_params(&self) -> Vec<(String, Var)> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.push_all(&mut params, &mut buffers);
        params
    }

    fn named_buffers(&self) -> Vec<(String, Var)> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        self.push_all(&mut params, &mut buffers);
        buffers
    }

    fn layer_ops(&self) -> Vec<LayerOp> {
        let mut ops = vec![
            self.conv1.op(),
            self.bn1.op(),
            LayerOp::Activation(Nonlinearity::Relu),
            LayerOp::MaxPool { kernel: 3, stride: 2 },
        ];
        for layer in &self.layers {
            for block in layer {
                block.ops(&mut ops);
            }
        }
        ops.push(LayerOp::GlobalAvgPool);
        ops
    }

    fn is_pretrained(&self) -> bool {
        self.config.weights().is_some()
    }

    fn default_aggregation_dropout(&self) -> f64 {
        0.5
    }
}

impl ResNet18 {
    fn push_all(&self, params: &mut Vec<(String, Var)>, buffers: &mut Vec<(String, Var)>) {
        self.conv1.push_params("conv1", params);
        self.bn1.push_params("bn1", params);
        self.bn1.push_buffers("bn1", buffers);
        for (k, layer) in self.layers.iter().enumerate() {
            for (b, block) in layer.iter().enumerate() {
                block.push(&format!("layer{}.{b}", k + 1), params, buffers);
            }
        }
    }
}
