//! Bit-rate modulator pair.
//!
//! The modulator maps the trade-off factor lambda to a strictly positive
//! channel-wise scale `exp(W2 relu(W1 t(lambda) + b1) + b2)`. The latent is
//! multiplied by it before quantization and by the inverse modulator's vector
//! before synthesis.

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::init::{self, SeededRng};
use crate::Result;

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaTransform {
    Raw,
    Log,
}

impl LambdaTransform {
    fn apply(self, lam: f64) -> f64 {
        match self {
            LambdaTransform::Raw => lam,
            LambdaTransform::Log => lam.ln(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModulatorParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub transform: LambdaTransform,
}

impl ModulatorParams {
    /// Output layer zeroed so the vector starts at all-ones. First layer
    /// weights are small and positive so every hidden unit is live over the
    /// whole lambda range.
    pub fn new(
        channels: usize,
        hidden: usize,
        transform: LambdaTransform,
        rng: &mut SeededRng,
        dtype: DType,
    ) -> Result<Self> {
        if hidden == 0 || channels == 0 {
            return Err(invalid("modulator needs hidden >= 1 and channels >= 1"));
        }
        // Both slope signs, so hidden units that fall with λ start alive too.
        let w1 = init::uniform_var(rng, (hidden, 1), -0.1, 0.1, dtype)?;
        let b1 = init::uniform_var(rng, hidden, 0.0, 1.0, dtype)?;
        let w2 = init::zeros_var((channels, hidden), dtype)?;
        let b2 = init::zeros_var(channels, dtype)?;
        Self::from_parts(w1, b1, w2, b2, transform)
    }

    pub fn from_parts(w1: Var, b1: Var, w2: Var, b2: Var, transform: LambdaTransform) -> Result<Self> {
        let (hidden, one) = w1.dims2()?;
        let (channels, hidden2) = w2.dims2()?;
        if one != 1 || hidden == 0 || hidden2 != hidden || b1.dims() != [hidden] || b2.dims() != [channels] {
            return Err(invalid("inconsistent modulator weight shapes"));
        }
        Ok(Self { w1, b1, w2, b2, transform })
    }

    pub fn hidden(&self) -> usize {
        self.w1.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.w2.dims()[0]
    }

    pub fn param_count(&self) -> usize {
        [&self.w1, &self.b1, &self.w2, &self.b2].iter().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<(&'static str, &Var)> {
        vec![("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }
}

/// `bm(lambda)`, shape `(C,)`, every entry strictly positive.
pub fn modulation_vector(params: &ModulatorParams, lam: f64) -> Result<Tensor> {
    if !(lam > 0.0 && lam.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {lam}")));
    }
    let dtype = params.w1.dtype();
    let t = Tensor::new(&[[params.transform.apply(lam)]], &Device::Cpu)?.to_dtype(dtype)?;
    let hidden = params.w1.matmul(&t)?.squeeze(1)?.add(params.b1.as_tensor())?.relu()?;
    let out = params.w2.matmul(&hidden.unsqueeze(1)?)?.squeeze(1)?.add(params.b2.as_tensor())?;
    Ok(out.exp()?)
}

#[derive(Debug, Clone)]
pub struct ModulatorPair {
    pub bm: ModulatorParams,
    /// Separate inverse module; `None` when the inverse is tied to `1 / bm`.
    pub ibm: Option<ModulatorParams>,
}

impl ModulatorPair {
    pub fn new(
        channels: usize,
        hidden: usize,
        transform: LambdaTransform,
        tied_reciprocal: bool,
        rng: &mut SeededRng,
        dtype: DType,
    ) -> Result<Self> {
        let bm = ModulatorParams::new(channels, hidden, transform, rng, dtype)?;
        let ibm = if tied_reciprocal {
            None
        } else {
            Some(ModulatorParams::new(channels, hidden, transform, rng, dtype)?)
        };
        Self::from_parts(bm, ibm)
    }

    pub fn from_parts(bm: ModulatorParams, ibm: Option<ModulatorParams>) -> Result<Self> {
        if let Some(ibm) = &ibm {
            if ibm.hidden() != bm.hidden() || ibm.channels() != bm.channels() {
                return Err(invalid("bm and ibm must share hidden size and output dimension"));
            }
        }
        Ok(Self { bm, ibm })
    }

    pub fn tied_reciprocal(&self) -> bool {
        self.ibm.is_none()
    }

    pub fn channels(&self) -> usize {
        self.bm.channels()
    }

    pub fn forward_vector(&self, lam: f64) -> Result<Tensor> {
        modulation_vector(&self.bm, lam)
    }

    pub fn inverse_vector(&self, lam: f64) -> Result<Tensor> {
        match &self.ibm {
            Some(ibm) => modulation_vector(ibm, lam),
            None => Ok(modulation_vector(&self.bm, lam)?.recip()?),
        }
    }

    pub fn param_count(&self) -> usize {
        self.bm.param_count() + self.ibm.as_ref().map_or(0, |m| m.param_count())
    }
}

fn scale_channels(y: &Tensor, v: &Tensor) -> Result<Tensor> {
    let c = v.dims()[0];
    if y.rank() != 4 || y.dim(1)? != c {
        return Err(invalid(format!("latent shape {:?} does not match {c} modulator channels", y.dims())));
    }
    Ok(y.broadcast_mul(&v.reshape((1, c, 1, 1))?)?)
}

pub fn modulate(y: &Tensor, pair: &ModulatorPair, lam: f64) -> Result<Tensor> {
    scale_channels(y, &pair.forward_vector(lam)?)
}

pub fn demodulate(y_mod: &Tensor, pair: &ModulatorPair, lam: f64) -> Result<Tensor> {
    scale_channels(y_mod, &pair.inverse_vector(lam)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::stream;

    fn var(t: Tensor) -> Var {
        Var::from_tensor(&t).unwrap()
    }

    #[test]
    fn zero_output_layer_gives_ones() {
        let mut rng = stream(7, 0);
        let p = ModulatorParams::new(5, 8, LambdaTransform::Log, &mut rng, DType::F32).unwrap();
        for lam in [1e-3, 0.5, 40.0, 1e4] {
            let v = modulation_vector(&p, lam).unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn hand_evaluated_vector() {
        let d = Device::Cpu;
        let p = ModulatorParams::from_parts(
            var(Tensor::new(&[[1.0f64]], &d).unwrap()),
            var(Tensor::new(&[0.0f64], &d).unwrap()),
            var(Tensor::ones((4, 1), DType::F64, &d).unwrap()),
            var(Tensor::zeros(4, DType::F64, &d).unwrap()),
            LambdaTransform::Raw,
        )
        .unwrap();
        let v = modulation_vector(&p, 0.5).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| (x - 1.6487).abs() < 1e-4));
    }

    #[test]
    fn non_positive_lambda_rejected() {
        let mut rng = stream(1, 0);
        let p = ModulatorParams::new(3, 2, LambdaTransform::Log, &mut rng, DType::F32).unwrap();
        assert!(modulation_vector(&p, 0.0).is_err());
        assert!(modulation_vector(&p, -1.0).is_err());
        assert!(modulation_vector(&p, f64::NAN).is_err());
    }

    #[test]
    fn broadcast_semantics_and_round_trip() {
        let d = Device::Cpu;
        let mut rng = stream(3, 0);
        let mut pair = ModulatorPair::new(3, 4, LambdaTransform::Log, true, &mut rng, DType::F64).unwrap();
        pair.bm.w2 = var(Tensor::new(&[[0.3f64, -0.2, 0.1, 0.0], [0.5, 0.5, 0.5, 0.5], [-1.0, 0.0, 0.2, 0.1]], &d).unwrap());
        pair.bm.b2 = var(Tensor::new(&[0.1f64, -0.4, 0.2], &d).unwrap());
        let y = Tensor::ones((2, 3, 2, 2), DType::F64, &d).unwrap().broadcast_mul(
            &Tensor::new(&[2.0f64, -1.0, 0.25], &d).unwrap().reshape((1, 3, 1, 1)).unwrap(),
        ).unwrap();
        let s = pair.forward_vector(10.0).unwrap().to_vec1::<f64>().unwrap();
        let ym = modulate(&y, &pair, 10.0).unwrap();
        let v = [2.0, -1.0, 0.25];
        for c in 0..3 {
            let ch = ym.narrow(1, c, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(ch.iter().all(|&x| x == v[c] * s[c]));
        }
        let back = demodulate(&ym, &pair, 10.0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let orig = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in back.iter().zip(&orig) {
            assert!(((a - b) / b).abs() < 1e-6);
        }
    }

    #[test]
    fn neutral_pair_is_identity() {
        let mut rng = stream(11, 0);
        let pair = ModulatorPair::new(4, 16, LambdaTransform::Log, false, &mut rng, DType::F32).unwrap();
        let y = Tensor::randn(0f32, 3.0, (2, 4, 3, 3), &Device::Cpu).unwrap();
        let a = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let m = modulate(&y, &pair, 0.01).unwrap();
        assert_eq!(m.flatten_all().unwrap().to_vec1::<f32>().unwrap(), a);
        let r = demodulate(&m, &pair, 0.01).unwrap();
        assert_eq!(r.flatten_all().unwrap().to_vec1::<f32>().unwrap(), a);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut rng = stream(2, 0);
        let pair = ModulatorPair::new(4, 2, LambdaTransform::Log, false, &mut rng, DType::F32).unwrap();
        let y = Tensor::zeros((1, 3, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(modulate(&y, &pair, 1.0).is_err());
        assert!(demodulate(&y, &pair, 1.0).is_err());
    }

    #[test]
    fn mismatched_pair_rejected() {
        let mut rng = stream(2, 0);
        let a = ModulatorParams::new(4, 2, LambdaTransform::Log, &mut rng, DType::F32).unwrap();
        let b = ModulatorParams::new(5, 2, LambdaTransform::Log, &mut rng, DType::F32).unwrap();
        assert!(ModulatorPair::from_parts(a, Some(b)).is_err());
    }

    #[test]
    fn pair_parameter_count() {
        let mut rng = stream(0, 0);
        let pair = ModulatorPair::new(48, 64, LambdaTransform::Log, false, &mut rng, DType::F32).unwrap();
        assert_eq!(pair.param_count(), 2 * (64 + 64 + 64 * 48 + 48));
    }
}
