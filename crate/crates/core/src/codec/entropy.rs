//! Likelihood models for the two latents.
//!
//! The main latent uses a Gaussian convolved with the unit quantization bin,
//! parameterized per element by the hyper synthesis output. The hyper latent
//! uses a fully factorized, per-channel learned CDF built from monotone
//! layers (positive matrices, `x + tanh(a) tanh(x)` nonlinearities).

use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

use candle_core::{DType, Tensor, Var};

use crate::init::{self, SeededRng};
use crate::Result;

pub const SCALE_FLOOR: f64 = 0.11;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

/// Standard normal CDF on tensors.
fn std_normal_cdf(t: &Tensor) -> Result<Tensor> {
    Ok((((t * FRAC_1_SQRT_2)?.erf()? + 1.0)? * 0.5)?)
}

/// Bin probabilities with the scale and probability floors applied.
#[derive(Debug, Clone)]
pub struct MainLikelihood {
    pub probs: Tensor,
    /// Number of scales that were raised to the floor.
    pub scales_clamped: usize,
}

/// `P(y_hat) = Phi((y_hat - mu + 1/2) / sigma) - Phi((y_hat - mu - 1/2) / sigma)`,
/// evaluated on the tail-symmetric form for accuracy.
pub fn likelihood_main(
    y_hat: &Tensor,
    scales: &Tensor,
    means: Option<&Tensor>,
    scale_floor: f64,
    prob_floor: f64,
) -> Result<MainLikelihood> {
    let scales_clamped = scales.lt(scale_floor)?.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()? as usize;
    let sigma = scales.maximum(scale_floor)?;
    let centered = match means {
        Some(mu) => (y_hat - mu)?,
        None => y_hat.clone(),
    };
    let v = centered.abs()?;
    let upper = std_normal_cdf(&((v.neg()? + 0.5)? / &sigma)?)?;
    let lower = std_normal_cdf(&((v.neg()? - 0.5)? / &sigma)?)?;
    let probs = (upper - lower)?.maximum(prob_floor)?;
    Ok(MainLikelihood { probs, scales_clamped })
}

/// Scalar normal CDF with full tail accuracy.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * libm::erfc(-t / SQRT_2)
}

/// Probability of integer bin `symbol` under `N(mean, scale^2)` with unit bins,
/// unfloored. Scalar twin of [`likelihood_main`] used to build coding tables.
pub fn gaussian_bin_probability(symbol: f64, mean: f64, scale: f64) -> f64 {
    let v = (symbol - mean).abs();
    normal_cdf((0.5 - v) / scale) - normal_cdf((-0.5 - v) / scale)
}

const PRIOR_FILTERS: [usize; 3] = [3, 3, 3];
const PRIOR_INIT_SCALE: f64 = 2.0;

/// Fully factorized learned prior over the hyper latent.
#[derive(Debug, Clone)]
pub struct FactorizedPrior {
    pub matrices: Vec<Var>,
    pub biases: Vec<Var>,
    pub factors: Vec<Var>,
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // relu(x) + log(1 + exp(-|x|))
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

fn inverse_softplus(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl FactorizedPrior {
    pub fn new(channels: usize, rng: &mut SeededRng, dtype: DType) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(1)
            .chain(PRIOR_FILTERS.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let layers = dims.len() - 1;
        let scale = PRIOR_INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..layers {
            let fill = inverse_softplus(1.0 / scale / dims[i + 1] as f64);
            matrices.push(init::const_var((channels, dims[i + 1], dims[i]), fill, dtype)?);
            biases.push(init::uniform_var(rng, (channels, dims[i + 1], 1), -0.5, 0.5, dtype)?);
            if i + 1 < layers {
                factors.push(init::zeros_var((channels, dims[i + 1], 1), dtype)?);
            }
        }
        Ok(Self { matrices, biases, factors })
    }

    pub fn channels(&self) -> usize {
        self.matrices[0].dims()[0]
    }

    /// Logit of the cumulative distribution, `x` of shape `(C, 1, L)`.
    pub fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, (m, b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            h = softplus(m.as_tensor())?.matmul(&h)?.broadcast_add(b.as_tensor())?;
            if let Some(a) = self.factors.get(i) {
                h = (h.clone() + h.tanh()?.broadcast_mul(&a.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    fn to_channel_rows(z: &Tensor) -> Result<(Tensor, [usize; 4])> {
        let (b, c, h, w) = z.dims4()?;
        Ok((z.permute((1, 0, 2, 3))?.reshape((c, 1, b * h * w))?, [b, c, h, w]))
    }

    fn from_channel_rows(t: &Tensor, dims: [usize; 4]) -> Result<Tensor> {
        let [b, c, h, w] = dims;
        Ok(t.reshape((c, b, h, w))?.permute((1, 0, 2, 3))?.contiguous()?)
    }

    /// Unfloored bin probabilities for `z_hat` of shape `(B, C, H, W)`.
    pub fn bin_probabilities(&self, z_hat: &Tensor) -> Result<Tensor> {
        let (rows, dims) = Self::to_channel_rows(z_hat)?;
        let lower = self.logits_cumulative(&(&rows - 0.5)?)?;
        let upper = self.logits_cumulative(&(&rows + 0.5)?)?;
        // Evaluate on the side of the median where the sigmoid is not saturated.
        let sign = (&lower + &upper)?.sign()?.neg()?.detach();
        let sig = |t: &Tensor| candle_nn::ops::sigmoid(&(t * &sign)?);
        let p = (sig(&upper)? - sig(&lower)?)?.abs()?;
        Self::from_channel_rows(&p, dims)
    }

    pub fn likelihood(&self, z_hat: &Tensor, prob_floor: f64) -> Result<Tensor> {
        Ok(self.bin_probabilities(z_hat)?.maximum(prob_floor)?)
    }

    /// CDF of every channel at the points `t`, result `(C, len)` in f64.
    pub fn cdf_at(&self, t: &[f64]) -> Result<Vec<Vec<f64>>> {
        let c = self.channels();
        let dtype = self.matrices[0].dtype();
        let row = Tensor::new(t, &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let x = row.reshape((1, 1, t.len()))?.repeat((c, 1, 1))?;
        let cdf = candle_nn::ops::sigmoid(&self.logits_cumulative(&x)?)?;
        Ok(cdf.squeeze(1)?.to_dtype(DType::F64)?.to_vec2()?)
    }

    /// Unfloored pmf of every channel over the integers `lo..=hi`, `(C, n)`.
    pub fn pmf_table(&self, lo: i64, hi: i64) -> Result<Vec<Vec<f64>>> {
        let c = self.channels();
        let dtype = self.matrices[0].dtype();
        let syms: Vec<f64> = (lo..=hi).map(|s| s as f64).collect();
        let n = syms.len();
        let grid = Tensor::new(syms.as_slice(), &candle_core::Device::Cpu)?
            .to_dtype(dtype)?
            .reshape((1, 1, n, 1))?
            .repeat((1, c, 1, 1))?;
        let p = self.bin_probabilities(&grid)?;
        Ok(p.squeeze(0)?.squeeze(2)?.to_dtype(DType::F64)?.to_vec2()?)
    }

    pub fn vars(&self) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        for (i, m) in self.matrices.iter().enumerate() {
            out.push((format!("prior.matrix.{i}"), m));
        }
        for (i, b) in self.biases.iter().enumerate() {
            out.push((format!("prior.bias.{i}"), b));
        }
        for (i, f) in self.factors.iter().enumerate() {
            out.push((format!("prior.factor.{i}"), f));
        }
        out
    }
}
