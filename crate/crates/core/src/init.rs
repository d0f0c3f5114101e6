//! Seeded parameter initialization.
//!
//! Candle's built-in random initializers draw from an unseeded generator, so
//! all parameters here come from an explicit ChaCha stream instead.

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub type ParamRng = ChaCha8Rng;

pub fn param_rng(seed: u64) -> ParamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 step, used to derive independent child seeds from a master seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn uniform_tensor<S: Into<Shape>>(
    rng: &mut ParamRng,
    shape: S,
    bound: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let shape = shape.into();
    let values: Vec<f64> = (0..shape.elem_count())
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

/// Uniform in `±1/sqrt(fan_in)`.
pub fn fan_in_uniform<S: Into<Shape>>(
    rng: &mut ParamRng,
    shape: S,
    fan_in: usize,
    dtype: DType,
    device: &Device,
) -> Result<Var> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Ok(Var::from_tensor(&uniform_tensor(
        rng, shape, bound, dtype, device,
    )?)?)
}

/// Kaiming-uniform for layers followed by ReLU: `±sqrt(6/fan_in)`.
pub fn kaiming_uniform<S: Into<Shape>>(
    rng: &mut ParamRng,
    shape: S,
    fan_in: usize,
    dtype: DType,
    device: &Device,
) -> Result<Var> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Ok(Var::from_tensor(&uniform_tensor(
        rng, shape, bound, dtype, device,
    )?)?)
}

pub fn zeros_var<S: Into<Shape>>(shape: S, dtype: DType, device: &Device) -> Result<Var> {
    Ok(Var::zeros(shape, dtype, device)?)
}

/// Order-sensitive checksum over parameter values, for detecting mutation.
pub fn checksum(params: &[(String, Var)]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, var) in params {
        hasher.update(name.as_bytes());
        let values = var
            .as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}
