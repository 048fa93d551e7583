//! Seeded parameter initialization.
//!
//! candle's CPU RNG is not seedable per call, so every random tensor in the
//! toolkit is drawn from a ChaCha stream and uploaded with `from_vec`.

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

pub type SeededRng = ChaCha8Rng;

/// Derive an independent stream for a named parameter group.
pub fn stream(seed: u64, group: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group);
    rng
}

pub fn uniform_tensor(
    rng: &mut SeededRng,
    shape: impl Into<Shape>,
    lo: f64,
    hi: f64,
    dtype: DType,
) -> Result<Tensor> {
    let shape = shape.into();
    let data: Vec<f64> = (0..shape.elem_count()).map(|_| rng.gen_range(lo..hi)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn uniform_var(
    rng: &mut SeededRng,
    shape: impl Into<Shape>,
    lo: f64,
    hi: f64,
    dtype: DType,
) -> Result<Var> {
    Ok(Var::from_tensor(&uniform_tensor(rng, shape, lo, hi, dtype)?)?)
}

pub fn const_var(shape: impl Into<Shape>, value: f64, dtype: DType) -> Result<Var> {
    let t = (Tensor::ones(shape, DType::F64, &Device::Cpu)? * value)?.to_dtype(dtype)?;
    Ok(Var::from_tensor(&t)?)
}

pub fn zeros_var(shape: impl Into<Shape>, dtype: DType) -> Result<Var> {
    Ok(Var::zeros(shape, dtype, &Device::Cpu)?)
}
