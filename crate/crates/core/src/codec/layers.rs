use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::init::{self, SeededRng};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Deconv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubNet {
    /// Main analysis transform (encoder).
    GA,
    /// Hyper analysis transform.
    HA,
    /// Hyper synthesis transform.
    HS,
    /// Main synthesis transform (decoder).
    GS,
}

impl SubNet {
    pub fn prefix(self) -> &'static str {
        match self {
            SubNet::GA => "g_a",
            SubNet::HA => "h_a",
            SubNet::HS => "h_s",
            SubNet::GS => "g_s",
        }
    }
}

/// Static description of one convolution layer of the backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub subnet: SubNet,
    pub index: usize,
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Whether a gate guards this layer's input.
    pub gated: bool,
}

impl LayerSpec {
    pub fn name(&self) -> String {
        format!("{}.{}", self.subnet.prefix(), self.index)
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Spatial size of the output for an input of `(h, w)`.
    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv => (h.div_ceil(self.stride), w.div_ceil(self.stride)),
            LayerKind::Deconv => (h * self.stride, w * self.stride),
        }
    }

    /// Spatial grid over which every input channel meets the full kernel
    /// once per output channel: output pixels for a convolution, input pixels
    /// for a transposed convolution.
    pub fn mac_grid(&self, h_in: usize, w_in: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv => self.output_dims(h_in, w_in),
            LayerKind::Deconv => (h_in, w_in),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: LayerSpec,
    pub weight: Var,
    pub bias: Var,
}

impl ConvLayer {
    pub fn new(spec: LayerSpec, rng: &mut SeededRng, dtype: DType) -> Result<Self> {
        let k2 = spec.kernel * spec.kernel;
        let (shape, fan_in) = match spec.kind {
            LayerKind::Conv => ((spec.c_out, spec.c_in, spec.kernel, spec.kernel), spec.c_in * k2),
            LayerKind::Deconv => (
                (spec.c_in, spec.c_out, spec.kernel, spec.kernel),
                (spec.c_in * k2 / (spec.stride * spec.stride)).max(1),
            ),
        };
        let bound = (3.0 / fan_in as f64).sqrt();
        let weight = init::uniform_var(rng, shape, -bound, bound, dtype)?;
        let bias = init::zeros_var(spec.c_out, dtype)?;
        Ok(Self { spec, weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let y = match s.kind {
            LayerKind::Conv => x.conv2d(self.weight.as_tensor(), s.padding(), s.stride, 1, 1)?,
            LayerKind::Deconv => {
                x.conv_transpose2d(self.weight.as_tensor(), s.padding(), s.stride - 1, s.stride, 1)?
            }
        };
        Ok(y.broadcast_add(&self.bias.reshape((1, s.c_out, 1, 1))?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    /// `x * sigmoid(x)`, a smooth ramp.
    Silu,
    Relu,
    Tanh,
}

impl Nonlinearity {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Nonlinearity::Silu => x.silu()?,
            Nonlinearity::Relu => x.relu()?,
            Nonlinearity::Tanh => x.tanh()?,
        })
    }
}
