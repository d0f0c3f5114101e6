//! Small building blocks shared by aggregation nodes and backbones.

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsamError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    LeakyRelu {
        slope: f64,
    },
    Tanh,
    Identity,
}

impl Nonlinearity {
    pub fn apply(&self, xs: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Nonlinearity::Relu => xs.relu()?,
            Nonlinearity::LeakyRelu { slope } => {
                let neg = xs.minimum(0.0)?.affine(*slope, 0.0)?;
                (xs.relu()? + neg)?
            }
            Nonlinearity::Tanh => xs.tanh()?,
            Nonlinearity::Identity => xs.clone(),
        })
    }
}

/// Spatial reduction applied to the previous node's output so that it lines
/// up with the next tap. Each variant mirrors a reduction found in a backbone.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Downsample {
    #[default]
    None,
    /// Keep every `stride`-th row and column. Identical to the spatial effect
    /// of a strided 1x1 convolution.
    Subsample { stride: usize },
    MaxPool { kernel: usize, stride: usize },
    /// Max pool followed by flattening into a collapsed map, the transition
    /// from a convolutional stage into a fully connected one.
    MaxPoolFlatten {
        kernel: usize,
        stride: usize,
        input: (usize, usize),
    },
}

impl Downsample {
    pub fn factor(&self) -> usize {
        match *self {
            Downsample::None => 1,
            Downsample::Subsample { stride }
            | Downsample::MaxPool { stride, .. }
            | Downsample::MaxPoolFlatten { stride, .. } => stride,
        }
    }

    fn pooled(kernel: usize, stride: usize, (h, w): (usize, usize)) -> (usize, usize) {
        let f = |d: usize| if d < kernel { 0 } else { (d - kernel) / stride + 1 };
        (f(h), f(w))
    }

    pub fn output_spatial(&self, input: (usize, usize)) -> (usize, usize) {
        match *self {
            Downsample::None => input,
            Downsample::Subsample { stride } => (input.0.div_ceil(stride), input.1.div_ceil(stride)),
            Downsample::MaxPool { kernel, stride } => Self::pooled(kernel, stride, input),
            Downsample::MaxPoolFlatten { .. } => (1, 1),
        }
    }

    pub fn output_channels(&self, channels: usize) -> usize {
        match *self {
            Downsample::MaxPoolFlatten {
                kernel,
                stride,
                input,
            } => {
                let (h, w) = Self::pooled(kernel, stride, input);
                channels * h * w
            }
            _ => channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Downsample::None => Ok(()),
            Downsample::Subsample { stride } if stride >= 1 => Ok(()),
            Downsample::MaxPool { kernel, stride } | Downsample::MaxPoolFlatten { kernel, stride, .. }
                if kernel >= 1 && stride >= 1 =>
            {
                Ok(())
            }
            other => Err(DsamError::InvalidSpec(format!(
                "downsample {other:?} needs positive kernel and stride"
            ))),
        }
    }

    pub fn apply(&self, xs: &Tensor) -> Result<Tensor> {
        match *self {
            Downsample::None => Ok(xs.clone()),
            Downsample::Subsample { stride: 1 } => Ok(xs.clone()),
            Downsample::Subsample { stride } => {
                let (_, _, h, w) = xs.dims4()?;
                let rows = index_stride(h, stride, xs)?;
                let cols = index_stride(w, stride, xs)?;
                Ok(xs.index_select(&rows, 2)?.index_select(&cols, 3)?)
            }
            Downsample::MaxPool { kernel, stride } => {
                Ok(xs.max_pool2d_with_stride((kernel, kernel), (stride, stride))?)
            }
            Downsample::MaxPoolFlatten { kernel, stride, .. } => {
                let pooled = xs.max_pool2d_with_stride((kernel, kernel), (stride, stride))?;
                let n = pooled.dim(0)?;
                let flat = pooled.flatten_from(1)?;
                let c = flat.dim(1)?;
                Ok(flat.reshape((n, c, 1, 1))?)
            }
        }
    }
}

fn index_stride(len: usize, stride: usize, like: &Tensor) -> Result<Tensor> {
    let idx: Vec<u32> = (0..len).step_by(stride).map(|i| i as u32).collect();
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, like.device())?)
}

/// Inverted dropout with an explicit generator. `rate >= 1` zeroes the input.
pub fn dropout(xs: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(xs.clone());
    }
    if rate >= 1.0 {
        return Ok(xs.zeros_like()?);
    }
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..xs.elem_count())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
        .collect();
    let mask = Tensor::from_vec(mask, xs.shape(), xs.device())?.to_dtype(xs.dtype())?;
    Ok(xs.mul(&mask)?)
}

/// `xs @ weight^T + bias` for `xs: (N, in)`, `weight: (out, in)`.
pub fn linear(xs: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(xs.matmul(&weight.t()?)?.broadcast_add(bias)?)
}

/// 2-d convolution plus per-channel bias.
pub fn conv2d_bias(
    xs: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
) -> Result<Tensor> {
    let out = xs.conv2d(weight, padding, stride, 1, 1)?;
    let c = bias.dim(0)?;
    Ok(out.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    let max = xs.max_keepdim(candle_core::D::Minus1)?;
    let exp = xs.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(candle_core::D::Minus1)?;
    Ok(exp.broadcast_div(&sum)?)
}

/// Mean cross entropy of `logits: (N, C)` against integer `targets: (N,)`.
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?;
    let shifted = logits.broadcast_sub(&max)?;
    let log_sum = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_probs = shifted.broadcast_sub(&log_sum)?;
    let picked = log_probs.gather(&targets.unsqueeze(1)?, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Structural description of one step in a layer's computation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum LayerOp {
    Conv {
        kernel: usize,
        stride: usize,
        in_channels: usize,
        out_channels: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Activation(Nonlinearity),
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Downsample(Downsample),
    Dropout {
        rate: f64,
    },
    Concat,
    GlobalAvgPool,
    Flatten,
}

impl LayerOp {
    pub fn is_normalization(&self) -> bool {
        matches!(self, LayerOp::BatchNorm { .. })
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn subsample_ceil() {
        let t = Tensor::arange(0f32, 25., &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 5, 5))
            .unwrap();
        let d = Downsample::Subsample { stride: 2 };
        let out = d.apply(&t).unwrap();
        assert_eq!(out.dims(), &[1, 1, 3, 3]);
        assert_eq!(d.output_spatial((5, 5)), (3, 3));
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![0., 2., 4., 10., 12., 14., 20., 22., 24.]);
    }

    #[test]
    fn maxpool_flatten_channels() {
        let d = Downsample::MaxPoolFlatten {
            kernel: 3,
            stride: 2,
            input: (13, 13),
        };
        assert_eq!(d.output_channels(256), 256 * 36);
        let t = Tensor::zeros((2, 256, 13, 13), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.apply(&t).unwrap().dims(), &[2, 9216, 1, 1]);
    }

    #[test]
    fn dropout_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::ones((1, 10_000), DType::F64, &Device::Cpu).unwrap();
        let out = dropout(&t, 0.5, &mut rng).unwrap();
        let v = to_f64_vec(&out).unwrap();
        assert!(v.iter().all(|&x| x == 0.0 || x == 2.0));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }

    #[test]
    fn cross_entropy_uniform() {
        let logits = Tensor::zeros((4, 7), DType::F64, &Device::Cpu).unwrap();
        let y = Tensor::new(&[0u32, 1, 2, 6], &Device::Cpu).unwrap();
        let l = cross_entropy(&logits, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu() {
        let t = Tensor::new(&[-2.0f64, 3.0], &Device::Cpu).unwrap();
        let v = Nonlinearity::LeakyRelu { slope: 0.1 }.apply(&t).unwrap();
        assert_eq!(v.to_vec1::<f64>().unwrap(), vec![-0.2, 3.0]);
    }
}
