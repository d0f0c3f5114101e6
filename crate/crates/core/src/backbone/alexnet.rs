use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv2d, Linear};
use super::{check_input, AlexnetPooled, Backbone, BackboneConfig, BackboneOutput, TapPoint};
use crate::error::{DsamError, Result};
use crate::feature_map::{collapse_fc_output, FeatureMap};
use crate::init::ParamRng;
use crate::ops::{self, Downsample, LayerOp, Nonlinearity};

const POOL: (usize, usize) = (3, 2);

fn pool_size(d: usize) -> usize {
    (d - POOL.0) / POOL.1 + 1
}

/// AlexNet with torchvision parameter names (`features.N`, `classifier.N`).
/// Taps: the five ReLU'd convolution outputs and, with `fc_taps`, fc6/fc7
/// as collapsed maps.
#[derive(Debug)]
pub struct AlexNet {
    config: BackboneConfig,
    convs: Vec<Conv2d>,
    fc: Option<(Linear, Linear)>,
    taps: Vec<TapPoint>,
    conv5_spatial: usize,
}

impl AlexNet {
    fn pooled_layer(&self) -> AlexnetPooled {
        match &self.config {
            BackboneConfig::Alexnet { pooled_layer, .. } => *pooled_layer,
            _ => AlexnetPooled::Pool5,
        }
    }
}

const CONV_INDICES: [usize; 5] = [0, 3, 6, 8, 10];

impl AlexNet {
    pub fn new(config: BackboneConfig, rng: &mut ParamRng, dtype: DType, dev: &Device) -> Result<Self> {
        let BackboneConfig::Alexnet {
            fc_taps,
            pooled_layer,
            input_size,
            ..
        } = &config
        else {
            return Err(DsamError::InvalidSpec("alexnet backbone needs an alexnet config".into()));
        };
        let convs = vec![
            Conv2d::new(rng, 3, 64, 11, 4, 2, true, dtype, dev)?,
            Conv2d::new(rng, 64, 192, 5, 1, 2, true, dtype, dev)?,
            Conv2d::new(rng, 192, 384, 3, 1, 1, true, dtype, dev)?,
            Conv2d::new(rng, 384, 256, 3, 1, 1, true, dtype, dev)?,
            Conv2d::new(rng, 256, 256, 3, 1, 1, true, dtype, dev)?,
        ];
        if *pooled_layer == AlexnetPooled::Fc7 && !fc_taps {
            return Err(DsamError::InvalidSpec("pooled_layer fc7 needs fc_taps".into()));
        }
        let mut sizes = Vec::new();
        let mut s = convs[0].out_size(*input_size);
        sizes.push(s);
        s = convs[1].out_size(pool_size(s));
        sizes.push(s);
        s = convs[2].out_size(pool_size(s));
        sizes.push(s);
        s = convs[3].out_size(s);
        sizes.push(s);
        s = convs[4].out_size(s);
        sizes.push(s);
        if pool_size(s) != 6 {
            return Err(DsamError::InvalidSpec(format!(
                "alexnet input size {input_size} gives a {}x{0} pool5, fc6 needs 6x6",
                pool_size(s)
            )));
        }
        let strides = [4, 8, 16, 16, 16];
        let mut taps: Vec<TapPoint> = sizes
            .iter()
            .zip(convs.iter())
            .zip(strides)
            .enumerate()
            .map(|(k, ((&size, conv), stride))| TapPoint {
                name: format!("conv{}", k + 1),
                channels: conv.weight.dims()[0],
                stride,
                spatial: (size, size),
                collapsed: false,
            })
            .collect();
        if *fc_taps {
            for name in ["fc6", "fc7"] {
                taps.push(TapPoint {
                    name: name.into(),
                    channels: 4096,
                    stride: *input_size,
                    spatial: (1, 1),
                    collapsed: true,
                });
            }
        }
        Ok(AlexNet {
            fc: if *fc_taps {
                Some((
                    Linear::new(rng, 256 * 36, 4096, dtype, dev)?,
                    Linear::new(rng, 4096, 4096, dtype, dev)?,
                ))
            } else {
                None
            },
            conv5_spatial: s,
            config,
            convs,
            taps,
        })
    }
}

impl Backbone for AlexNet {
    fn config(&self) -> &BackboneConfig {
        &self.config
    }

    fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    fn bridges(&self) -> Vec<Downsample> {
        let pool = Downsample::MaxPool {
            kernel: POOL.0,
            stride: POOL.1,
        };
        let mut out = vec![pool, pool, Downsample::None, Downsample::None];
        if self.fc.is_some() {
            out.push(Downsample::MaxPoolFlatten {
                kernel: POOL.0,
                stride: POOL.1,
                input: (self.conv5_spatial, self.conv5_spatial),
            });
            out.push(Downsample::None);
        }
        out
    }

    fn forward(&self, images: &Tensor, mut train: Option<&mut ChaCha8Rng>) -> Result<BackboneOutput> {
        check_input(images, self.config.input_size())?;
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut x = images.clone();
        for (k, conv) in self.convs.iter().enumerate() {
            if k == 1 || k == 2 {
                x = x.max_pool2d_with_stride(POOL.0, POOL.1)?;
            }
            x = conv.forward(&x)?.relu()?;
            taps.push(FeatureMap::new(x.clone())?);
        }
        let mut pooled = x.max_pool2d_with_stride(POOL.0, POOL.1)?.flatten_from(1)?;
        if let Some((fc6, fc7)) = &self.fc {
            let mut h = pooled.clone();
            for fc in [fc6, fc7] {
                if let Some(rng) = train.as_deref_mut() {
                    h = ops::dropout(&h, 0.5, rng)?;
                }
                h = fc.forward(&h)?.relu()?;
                taps.push(collapse_fc_output(&h)?);
            }
            if self.pooled_layer() == AlexnetPooled::Fc7 {
                pooled = h;
            }
        }
        Ok(BackboneOutput { taps, pooled })
    }

    fn feature_dim(&self) -> usize {
        match self.pooled_layer() {
            AlexnetPooled::Pool5 => 256 * 36,
            AlexnetPooled::Fc7 => 4096,
        }
    }

    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (conv, idx) in self.convs.iter().zip(CONV_INDICES) {
            conv.push_params(&format!("features.{idx}"), &mut out);
        }
        if let Some((fc6, fc7)) = &self.fc {
            fc6.push_params("classifier.1", &mut out);
            fc7.push_params("classifier.4", &mut out);
        }
        out
    }

    fn layer_ops(&self) -> Vec<LayerOp> {
        let relu = LayerOp::Activation(Nonlinearity::Relu);
        let pool = LayerOp::MaxPool {
            kernel: POOL.0,
            stride: POOL.1,
        };
        let mut ops = Vec::new();
        for (k, conv) in self.convs.iter().enumerate() {
            if k == 1 || k == 2 {
                ops.push(pool.clone());
            }
            ops.push(conv.op());
            ops.push(relu.clone());
        }
        ops.push(pool);
        ops.push(LayerOp::Flatten);
        if let Some((fc6, fc7)) = &self.fc {
            for fc in [fc6, fc7] {
                ops.extend([LayerOp::Dropout { rate: 0.5 }, fc.op(), relu.clone()]);
            }
        }
        ops
    }

    fn is_pretrained(&self) -> bool {
        self.config.weights().is_some()
    }
}
