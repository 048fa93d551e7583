//! Energy-based channel gating.
//!
//! A gate sits in front of a convolution and zeroes whole input channels whose
//! spatially pooled energy falls below a learned, input-dependent threshold.
//! The threshold is `importance * alpha`, where the importance vector comes
//! from a sigmoid over a short 1-D convolution across the pooled channel
//! energies.

use candle_core::{DType, Tensor, Var, D};

use crate::error::invalid;
use crate::init::{self, SeededRng};
use crate::{Error, Mode, Result};

pub const DEFAULT_EPSILON: f64 = 4.0;

/// Kernel size for the cross-channel convolution: the odd integer nearest to
/// `log2(channels)/2 + 1/2`, ties going to the smaller odd value.
pub fn adaptive_kernel_size(channels: i64) -> Result<usize> {
    if channels <= 0 {
        return Err(invalid(format!("channel count must be positive, got {channels}")));
    }
    let t = ((channels as f64).log2() / 2.0 + 0.5).abs();
    let mut lower = t.floor() as i64;
    if lower % 2 == 0 {
        lower -= 1;
    }
    if lower < 1 {
        return Ok(1);
    }
    let upper = lower + 2;
    let k = if (upper as f64 - t) < (t - lower as f64) { upper } else { lower };
    Ok(k as usize)
}

/// Learnable parameters of one gate.
#[derive(Debug, Clone)]
pub struct GateParams {
    /// Adjustment vector, one entry per input channel of the guarded layer.
    pub alpha: Var,
    /// Cross-channel kernel, shared by all channels.
    pub conv1d: Var,
    /// Slope of the sigmoid surrogate used in training.
    pub epsilon: f64,
}

impl GateParams {
    /// Fresh gate: `alpha = 0` (identity at eval) and a small random kernel.
    pub fn new(channels: usize, epsilon: f64, rng: &mut SeededRng, dtype: DType) -> Result<Self> {
        let k = adaptive_kernel_size(channels as i64)?;
        let bound = 1.0 / (k as f64).sqrt();
        let conv1d = init::uniform_var(rng, k, -bound, bound, dtype)?;
        let alpha = init::zeros_var(channels, dtype)?;
        Self::from_parts(alpha, conv1d, epsilon)
    }

    pub fn from_parts(alpha: Var, conv1d: Var, epsilon: f64) -> Result<Self> {
        if alpha.rank() != 1 || alpha.dim(0)? == 0 {
            return Err(invalid("alpha must be a non-empty vector"));
        }
        if conv1d.rank() != 1 || conv1d.dim(0)? % 2 == 0 {
            return Err(invalid("gate kernel size must be odd"));
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { alpha, conv1d, epsilon })
    }

    pub fn channels(&self) -> usize {
        self.alpha.dims()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.conv1d.dims()[0]
    }

    pub fn alpha_values(&self) -> Result<Vec<f64>> {
        Ok(self.alpha.to_dtype(DType::F64)?.to_vec1()?)
    }
}

/// Result of gating one feature map.
#[derive(Debug, Clone)]
pub struct GateOutput {
    pub masked_input: Tensor,
    /// Per (sample, channel) factor applied to the input: binary in eval
    /// mode, the sigmoid surrogate in train mode.
    pub mask: Tensor,
    /// Hard decision `energy >= threshold`, detached, in both modes.
    pub hard_mask: Tensor,
    pub importance: Tensor,
    pub mode: Mode,
    /// `1 - mean(hard_mask)`.
    pub sparsity: f64,
}

/// Spatial mean of the squared input, shape `(batch, channels)`.
pub fn pooled_energy(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(invalid(format!("expected a 4-D feature map, got shape {:?}", x.dims())));
    }
    Ok(x.sqr()?.mean(D::Minus1)?.mean(D::Minus1)?)
}

fn check_channels(x: &Tensor, p: &GateParams) -> Result<()> {
    let c = x.dims().get(1).copied().unwrap_or(0);
    if c != p.channels() {
        return Err(invalid(format!(
            "feature map has {c} channels, gate expects {}",
            p.channels()
        )));
    }
    Ok(())
}

/// Zero-padded cross-correlation along the channel axis of `(batch, C)`.
fn channel_conv(energy: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let k = kernel.dims()[0];
    let c = energy.dim(1)?;
    let pad = (k - 1) / 2;
    let padded = energy.pad_with_zeros(1, pad, pad)?;
    let mut acc: Option<Tensor> = None;
    for i in 0..k {
        let term = padded.narrow(1, i, c)?.broadcast_mul(&kernel.narrow(0, i, 1)?)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("kernel has at least one tap"))
}

pub fn importance_from_energy(energy: &Tensor, p: &GateParams) -> Result<Tensor> {
    let logits = channel_conv(energy, p.conv1d.as_tensor())?;
    Ok(candle_nn::ops::sigmoid(&logits)?)
}

/// Per-sample importance vector `sigmoid(conv1d(pool(x^2)))`, shape `(batch, C)`.
pub fn importance_vector(x: &Tensor, p: &GateParams) -> Result<Tensor> {
    check_channels(x, p)?;
    importance_from_energy(&pooled_energy(x)?, p)
}

/// 1 where `u >= 0`, else 0.
pub fn hard_gate(u: &Tensor) -> Result<Tensor> {
    Ok(u.ge(0.0)?.to_dtype(u.dtype())?)
}

/// Training surrogate `1 / (1 + exp(-epsilon * u))`.
pub fn soft_gate(u: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(candle_nn::ops::sigmoid(&(u * epsilon)?)?)
}

/// Gate `x` channel-wise against the threshold `importance * alpha`.
pub fn apply_gate(x: &Tensor, p: &GateParams, mode: Mode) -> Result<GateOutput> {
    check_channels(x, p)?;
    let (b, c) = (x.dim(0)?, x.dim(1)?);
    let energy = pooled_energy(x)?;
    let importance = importance_from_energy(&energy, p)?;
    let threshold = importance.broadcast_mul(p.alpha.as_tensor())?;
    let margin = (energy - threshold)?;
    let hard_mask = hard_gate(&margin.detach())?;
    let mask = match mode {
        Mode::Eval => hard_mask.clone(),
        Mode::Train => soft_gate(&margin, p.epsilon)?,
    };
    let masked_input = x.broadcast_mul(&mask.reshape((b, c, 1, 1))?)?;
    let active = hard_mask.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
    Ok(GateOutput { masked_input, mask, hard_mask, importance, mode, sparsity: 1.0 - active })
}

/// Fraction of (sample, channel) pairs switched off. Only defined for the
/// binary masks produced in eval mode.
pub fn measure_sparsity(g: &GateOutput) -> Result<f64> {
    if g.mode != Mode::Eval {
        return Err(Error::InvalidState("sparsity is measured on eval-mode (binary) masks".into()));
    }
    let active = g.mask.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
    Ok(1.0 - active)
}
