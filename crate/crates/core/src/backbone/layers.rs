use candle_core::{DType, Device, Tensor, Var};

use crate::error::Result;
use crate::init::{kaiming_uniform, zeros_var, ParamRng};
use crate::ops::{self, LayerOp};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ParamRng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = kaiming_uniform(rng, (out_c, in_c, kernel, kernel), fan_in, dtype, device)?;
        let bias = if bias {
            Some(zeros_var(out_c, dtype, device)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        match &self.bias {
            Some(b) => ops::conv2d_bias(xs, self.weight.as_tensor(), b.as_tensor(), self.padding, self.stride),
            None => Ok(xs.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?),
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        let k = self.weight.dims()[2];
        (input + 2 * self.padding - k) / self.stride + 1
    }

    pub fn op(&self) -> LayerOp {
        let d = self.weight.dims();
        LayerOp::Conv {
            kernel: d[2],
            stride: self.stride,
            in_channels: d[1],
            out_channels: d[0],
        }
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((format!("{prefix}.bias"), b.clone()));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(rng: &mut ParamRng, in_f: usize, out_f: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Linear {
            weight: kaiming_uniform(rng, (out_f, in_f), in_f, dtype, device)?,
            bias: zeros_var(out_f, dtype, device)?,
        })
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        ops::linear(xs, self.weight.as_tensor(), self.bias.as_tensor())
    }

    pub fn op(&self) -> LayerOp {
        let d = self.weight.dims();
        LayerOp::Linear {
            in_features: d[1],
            out_features: d[0],
        }
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Batch normalization with PyTorch semantics (eps 1e-5, momentum 0.1,
/// unbiased running variance).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: Var::ones(channels, dtype, device)?,
            bias: zeros_var(channels, dtype, device)?,
            running_mean: zeros_var(channels, dtype, device)?,
            running_var: Var::ones(channels, dtype, device)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, xs: &Tensor, train: bool) -> Result<Tensor> {
        let c = self.weight.dims()[0];
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let (n, _, h, w) = xs.dims4()?;
            let count = (n * h * w) as f64;
            let mean = xs.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let centered = xs.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let m = self.momentum;
            let batch_mean = mean.flatten_all()?.detach();
            let unbiased = var.flatten_all()?.detach().affine(count / (count - 1.0).max(1.0), 0.0)?;
            self.running_mean.set(
                &((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?,
            )?;
            self.running_var.set(
                &((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?,
            )?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let normed = xs.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.weight.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.bias.as_tensor().reshape(shape)?)?)
    }

    pub fn op(&self) -> LayerOp {
        LayerOp::BatchNorm {
            channels: self.weight.dims()[0],
        }
    }

    pub fn push_params(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }

    pub fn push_buffers(&self, prefix: &str, out: &mut Vec<(String, Var)>) {
        out.push((format!("{prefix}.running_mean"), self.running_mean.clone()));
        out.push((format!("{prefix}.running_var"), self.running_var.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batchnorm_train_normalizes_and_tracks() {
        let dev = Device::Cpu;
        let bn = BatchNorm2d::new(2, DType::F64, &dev).unwrap();
        let x = Tensor::randn(0f64, 1., (4, 2, 3, 3), &dev).unwrap().affine(3.0, 5.0).unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean = y.mean_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(mean.abs() < 1e-9);
        let rm = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        assert!(rm.iter().all(|&m| m > 0.2 && m < 0.8), "{rm:?}");
        // eval mode uses running statistics and leaves them alone
        let before = bn.running_mean.as_tensor().to_vec1::<f64>().unwrap();
        bn.forward(&x, false).unwrap();
        assert_eq!(before, bn.running_mean.as_tensor().to_vec1::<f64>().unwrap());
    }
}
