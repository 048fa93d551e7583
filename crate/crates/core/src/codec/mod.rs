//! Scale-hyperprior backbone with gate and modulator placement.
//!
//! Four sub-networks: the main analysis transform (4 convolutions), the
//! hyper analysis (3), the hyper synthesis (3) and the main synthesis (4
//! transposed convolutions). Every layer except the first of each
//! sub-network can carry a gate on its input, which gives 10 gates and 4
//! unguarded layers. The modulator pair wraps the quantizer of the main
//! latent only; the hyper path is never modulated.

pub mod checkpoint;
pub mod entropy;
pub mod layers;

use std::f64::consts::LN_2;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::gating::{self, GateParams, DEFAULT_EPSILON};
use crate::init::{self, SeededRng};
use crate::modulator::{self, LambdaTransform, ModulatorPair, DEFAULT_HIDDEN};
use crate::{Mode, Result};

pub use entropy::{FactorizedPrior, LIKELIHOOD_FLOOR, SCALE_FLOOR};
pub use layers::{ConvLayer, LayerKind, LayerSpec, Nonlinearity, SubNet};

/// Downsampling of the main latent relative to the image.
pub const MAIN_DOWNSAMPLING: usize = 16;
/// Downsampling of the hyper latent; input sides must be multiples of this.
pub const HYPER_DOWNSAMPLING: usize = 64;

const STREAM_BACKBONE: u64 = 1;
const STREAM_PRIOR: u64 = 2;
const STREAM_GATES: u64 = 3;
const STREAM_MODULATOR: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    ScaleOnly,
    MeanScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulatorConfig {
    pub enabled: bool,
    pub hidden: usize,
    pub lambda_transform: LambdaTransform,
    pub tied_reciprocal: bool,
}

impl Default for ModulatorConfig {
    fn default() -> Self {
        Self { enabled: false, hidden: DEFAULT_HIDDEN, lambda_transform: LambdaTransform::Log, tied_reciprocal: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub entropy_mode: EntropyMode,
    pub nonlinearity: Nonlinearity,
    pub gate_every_layer_except_first: bool,
    pub epsilon: f64,
    pub scale_floor: f64,
    pub likelihood_floor: f64,
    pub modulator: ModulatorConfig,
    pub precision: Precision,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_channels: 3,
            base_channels: 32,
            latent_channels: 48,
            entropy_mode: EntropyMode::ScaleOnly,
            nonlinearity: Nonlinearity::Silu,
            gate_every_layer_except_first: true,
            epsilon: DEFAULT_EPSILON,
            scale_floor: SCALE_FLOOR,
            likelihood_floor: LIKELIHOOD_FLOOR,
            modulator: ModulatorConfig::default(),
            precision: Precision::F32,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_channels == 0 || self.base_channels == 0 || self.latent_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("gate epsilon must be positive"));
        }
        if !(self.scale_floor > 0.0) || !(self.likelihood_floor > 0.0 && self.likelihood_floor < 1.0) {
            return Err(invalid("scale and likelihood floors must be positive"));
        }
        if self.modulator.hidden == 0 {
            return Err(invalid("modulator hidden width must be positive"));
        }
        Ok(())
    }

    /// All 14 layers in execution order.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let (c, n, m) = (self.image_channels, self.base_channels, self.latent_channels);
        let hs_out = match self.entropy_mode {
            EntropyMode::ScaleOnly => m,
            EntropyMode::MeanScale => 2 * m,
        };
        let gate = self.gate_every_layer_except_first;
        let mk = |subnet, index, kind, c_in, c_out, kernel, stride| LayerSpec {
            subnet,
            index,
            kind,
            c_in,
            c_out,
            kernel,
            stride,
            gated: gate && index > 0,
        };
        use LayerKind::{Conv, Deconv};
        use SubNet::{GA, GS, HA, HS};
        vec![
            mk(GA, 0, Conv, c, n, 5, 2),
            mk(GA, 1, Conv, n, n, 5, 2),
            mk(GA, 2, Conv, n, n, 5, 2),
            mk(GA, 3, Conv, n, m, 5, 2),
            mk(HA, 0, Conv, m, n, 3, 1),
            mk(HA, 1, Conv, n, n, 5, 2),
            mk(HA, 2, Conv, n, n, 5, 2),
            mk(HS, 0, Deconv, n, n, 5, 2),
            mk(HS, 1, Deconv, n, n, 5, 2),
            mk(HS, 2, Conv, n, hs_out, 3, 1),
            mk(GS, 0, Deconv, m, n, 5, 2),
            mk(GS, 1, Deconv, n, n, 5, 2),
            mk(GS, 2, Deconv, n, n, 5, 2),
            mk(GS, 3, Deconv, n, c, 5, 2),
        ]
    }
}

/// Bookkeeping carried alongside the parameters in a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelMeta {
    /// Lambda values seen during training, sorted and deduplicated.
    pub trained_lambdas: Vec<f64>,
    pub steps_trained: usize,
}

impl ModelMeta {
    pub fn record_lambdas(&mut self, lambdas: &[f64]) {
        self.trained_lambdas.extend_from_slice(lambdas);
        self.trained_lambdas.sort_by(f64::total_cmp);
        self.trained_lambdas.dedup();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Entropy,
    Gate,
    Modulator,
}

/// All learnable state of a codec.
#[derive(Debug, Clone)]
pub struct CodecState {
    pub config: CodecConfig,
    pub layers: Vec<ConvLayer>,
    /// Aligned with `layers`; `Some` for every guarded layer.
    pub gates: Vec<Option<GateParams>>,
    pub modulator: Option<ModulatorPair>,
    pub prior: FactorizedPrior,
    pub meta: ModelMeta,
}

/// Hard gate decisions of one guarded layer.
#[derive(Debug, Clone)]
pub struct GateRecord {
    pub layer: usize,
    /// Binary `(batch, channels)` decisions.
    pub hard_mask: Tensor,
    pub sparsity: f64,
}

/// Per-element parameters of the main latent's Gaussian model.
#[derive(Debug, Clone)]
pub struct EntropyParams {
    pub scales: Tensor,
    pub means: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub x_hat: Tensor,
    /// Scalar tensors, differentiable in train mode.
    pub rate_bits_main: Tensor,
    pub rate_bits_hyper: Tensor,
    pub gates: Vec<GateRecord>,
    pub y_mod: Tensor,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub entropy_params: EntropyParams,
    pub scales_clamped: usize,
    /// Batch size times image pixels.
    pub pixels: usize,
}

impl ForwardResult {
    pub fn rate_main(&self) -> Result<f64> {
        Ok(self.rate_bits_main.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn rate_hyper(&self) -> Result<f64> {
        Ok(self.rate_bits_hyper.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn total_rate_bits(&self) -> Result<f64> {
        Ok(self.rate_main()? + self.rate_hyper()?)
    }

    /// Differentiable bits per pixel, in the model dtype.
    pub fn bpp_tensor(&self) -> Result<Tensor> {
        Ok(((&self.rate_bits_main + &self.rate_bits_hyper)? / self.pixels as f64)?)
    }

    pub fn bpp(&self) -> Result<f64> {
        Ok(self.bpp_tensor()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn gate_sparsities(&self) -> Vec<f64> {
        self.gates.iter().map(|g| g.sparsity).collect()
    }
}

/// `-sum(log2 p)` as a scalar tensor.
pub fn rate_bits(probs: &Tensor) -> Result<Tensor> {
    Ok((probs.log()?.sum_all()? * (-1.0 / LN_2))?)
}

/// Train mode adds i.i.d. uniform noise on (-1/2, 1/2); eval mode rounds.
pub fn quantize(y: &Tensor, mode: Mode, rng: &mut SeededRng) -> Result<Tensor> {
    match mode {
        Mode::Eval => Ok(y.round()?),
        Mode::Train => {
            let noise: Vec<f64> = (0..y.elem_count())
                .map(|_| loop {
                    let u: f64 = rng.gen_range(-0.5..0.5);
                    if u != -0.5 {
                        break u;
                    }
                })
                .collect();
            let noise = Tensor::from_vec(noise, y.shape(), &Device::Cpu)?.to_dtype(y.dtype())?;
            Ok((y + noise)?)
        }
    }
}

pub fn build_codec(cfg: &CodecConfig, seed: u64) -> Result<CodecState> {
    cfg.validate()?;
    let dtype = cfg.precision.dtype();
    let mut rng = init::stream(seed, STREAM_BACKBONE);
    let layers = cfg
        .layer_specs()
        .into_iter()
        .map(|spec| ConvLayer::new(spec, &mut rng, dtype))
        .collect::<Result<Vec<_>>>()?;
    let prior = FactorizedPrior::new(cfg.base_channels, &mut init::stream(seed, STREAM_PRIOR), dtype)?;
    let mut state = CodecState {
        config: cfg.clone(),
        gates: vec![None; layers.len()],
        layers,
        modulator: None,
        prior,
        meta: ModelMeta::default(),
    };
    if cfg.gate_every_layer_except_first {
        state.enable_gates(seed)?;
    }
    if cfg.modulator.enabled {
        state.enable_modulator(seed)?;
    }
    Ok(state)
}

impl CodecState {
    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn gate_count(&self) -> usize {
        self.gates.iter().filter(|g| g.is_some()).count()
    }

    pub fn gate_params(&self) -> Vec<&GateParams> {
        self.gates.iter().flatten().collect()
    }

    /// Insert identity-initialized gates in front of every layer except the
    /// first of each sub-network. Existing gates are kept.
    pub fn enable_gates(&mut self, seed: u64) -> Result<()> {
        self.config.gate_every_layer_except_first = true;
        let dtype = self.dtype();
        let mut rng = init::stream(seed, STREAM_GATES);
        for (layer, gate) in self.layers.iter_mut().zip(self.gates.iter_mut()) {
            layer.spec.gated = layer.spec.index > 0;
            if layer.spec.gated && gate.is_none() {
                *gate = Some(GateParams::new(layer.spec.c_in, self.config.epsilon, &mut rng, dtype)?);
            }
        }
        Ok(())
    }

    /// Attach a neutral (all-ones) modulator pair if none is present.
    pub fn enable_modulator(&mut self, seed: u64) -> Result<()> {
        self.config.modulator.enabled = true;
        if self.modulator.is_none() {
            let m = &self.config.modulator;
            self.modulator = Some(ModulatorPair::new(
                self.config.latent_channels,
                m.hidden,
                m.lambda_transform,
                m.tied_reciprocal,
                &mut init::stream(seed, STREAM_MODULATOR),
                self.dtype(),
            )?);
        }
        Ok(())
    }

    /// Every learnable tensor with a stable name, in serialization order.
    pub fn named_vars(&self) -> Vec<(String, Var, ParamGroup)> {
        let mut out = Vec::new();
        for l in &self.layers {
            let name = l.spec.name();
            out.push((format!("{name}.weight"), l.weight.clone(), ParamGroup::Backbone));
            out.push((format!("{name}.bias"), l.bias.clone(), ParamGroup::Backbone));
        }
        for (name, v) in self.prior.vars() {
            out.push((name, v.clone(), ParamGroup::Entropy));
        }
        for (l, g) in self.layers.iter().zip(&self.gates) {
            if let Some(g) = g {
                let name = l.spec.name();
                out.push((format!("gate.{name}.alpha"), g.alpha.clone(), ParamGroup::Gate));
                out.push((format!("gate.{name}.conv1d"), g.conv1d.clone(), ParamGroup::Gate));
            }
        }
        if let Some(pair) = &self.modulator {
            for (n, v) in pair.bm.vars() {
                out.push((format!("bm.{n}"), v.clone(), ParamGroup::Modulator));
            }
            if let Some(ibm) = &pair.ibm {
                for (n, v) in ibm.vars() {
                    out.push((format!("ibm.{n}"), v.clone(), ParamGroup::Modulator));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_vars().iter().map(|(_, v, _)| v.elem_count()).sum()
    }

    /// Copy with freshly allocated parameter storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let fresh = |v: &Var| -> Result<Var> { Ok(Var::from_tensor(&v.as_tensor().copy()?)?) };
        let layers = self
            .layers
            .iter()
            .map(|l| Ok(ConvLayer { spec: l.spec.clone(), weight: fresh(&l.weight)?, bias: fresh(&l.bias)? }))
            .collect::<Result<Vec<_>>>()?;
        let gates = self
            .gates
            .iter()
            .map(|g| {
                g.as_ref()
                    .map(|g| GateParams::from_parts(fresh(&g.alpha)?, fresh(&g.conv1d)?, g.epsilon))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        let copy_mod = |m: &modulator::ModulatorParams| {
            modulator::ModulatorParams::from_parts(fresh(&m.w1)?, fresh(&m.b1)?, fresh(&m.w2)?, fresh(&m.b2)?, m.transform)
        };
        let modulator = self
            .modulator
            .as_ref()
            .map(|p| ModulatorPair::from_parts(copy_mod(&p.bm)?, p.ibm.as_ref().map(copy_mod).transpose()?))
            .transpose()?;
        let copy_all = |vs: &[Var]| vs.iter().map(fresh).collect::<Result<Vec<_>>>();
        let prior = FactorizedPrior {
            matrices: copy_all(&self.prior.matrices)?,
            biases: copy_all(&self.prior.biases)?,
            factors: copy_all(&self.prior.factors)?,
        };
        Ok(Self { config: self.config.clone(), layers, gates, modulator, prior, meta: self.meta.clone() })
    }

    fn run_layers(
        &self,
        range: std::ops::Range<usize>,
        input: &Tensor,
        mode: Mode,
        records: &mut Vec<GateRecord>,
    ) -> Result<Tensor> {
        let last = range.end - 1;
        let mut h = input.clone();
        for i in range {
            if let Some(g) = &self.gates[i] {
                let out = gating::apply_gate(&h, g, mode)?;
                records.push(GateRecord { layer: i, hard_mask: out.hard_mask, sparsity: out.sparsity });
                h = out.masked_input;
            }
            h = self.layers[i].forward(&h)?;
            if i != last {
                h = self.config.nonlinearity.apply(&h)?;
            }
        }
        Ok(h)
    }

    fn check_input(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != self.config.image_channels {
            return Err(invalid(format!("expected (B, {}, H, W) input, got {dims:?}", self.config.image_channels)));
        }
        let (h, w) = (dims[2], dims[3]);
        if h == 0 || w == 0 || h % HYPER_DOWNSAMPLING != 0 || w % HYPER_DOWNSAMPLING != 0 {
            return Err(invalid(format!(
                "spatial dims {h}x{w} must be positive multiples of {HYPER_DOWNSAMPLING}"
            )));
        }
        Ok(x.to_dtype(self.dtype())?)
    }

    fn check_lambda(lam: f64) -> Result<()> {
        if !(lam > 0.0 && lam.is_finite()) {
            return Err(invalid(format!("lambda must be positive, got {lam}")));
        }
        Ok(())
    }

    /// Gated main analysis followed by the forward modulator.
    pub fn analysis(&self, x: &Tensor, lam: f64, mode: Mode, records: &mut Vec<GateRecord>) -> Result<Tensor> {
        let y = self.run_layers(0..4, x, mode, records)?;
        match &self.modulator {
            Some(pair) => modulator::modulate(&y, pair, lam),
            None => Ok(y),
        }
    }

    pub fn hyper_analysis(&self, y_mod: &Tensor, mode: Mode, records: &mut Vec<GateRecord>) -> Result<Tensor> {
        self.run_layers(4..7, &y_mod.abs()?, mode, records)
    }

    pub fn hyper_synthesis(&self, z_hat: &Tensor, mode: Mode, records: &mut Vec<GateRecord>) -> Result<EntropyParams> {
        let out = self.run_layers(7..10, z_hat, mode, records)?;
        let m = self.config.latent_channels;
        let (means, raw) = match self.config.entropy_mode {
            EntropyMode::ScaleOnly => (None, out),
            EntropyMode::MeanScale => (Some(out.narrow(1, 0, m)?), out.narrow(1, m, m)?),
        };
        let scales = raw.clamp(-12.0, 12.0)?.exp()?;
        Ok(EntropyParams { scales, means })
    }

    /// Inverse modulator followed by the gated main synthesis. Eval mode
    /// clamps the reconstruction to [0, 1].
    pub fn synthesis(&self, y_hat: &Tensor, lam: f64, mode: Mode, records: &mut Vec<GateRecord>) -> Result<Tensor> {
        let y = match &self.modulator {
            Some(pair) => modulator::demodulate(y_hat, pair, lam)?,
            None => y_hat.clone(),
        };
        let x_hat = self.run_layers(10..14, &y, mode, records)?;
        match mode {
            Mode::Eval => Ok(x_hat.clamp(0.0, 1.0)?),
            Mode::Train => Ok(x_hat),
        }
    }

    pub fn main_likelihood(&self, y_hat: &Tensor, params: &EntropyParams) -> Result<entropy::MainLikelihood> {
        entropy::likelihood_main(
            y_hat,
            &params.scales,
            params.means.as_ref(),
            self.config.scale_floor,
            self.config.likelihood_floor,
        )
    }

    pub fn hyper_likelihood(&self, z_hat: &Tensor) -> Result<Tensor> {
        self.prior.likelihood(z_hat, self.config.likelihood_floor)
    }

    /// Full pipeline. `rng` supplies the quantization noise in train mode
    /// (hyper latent first, then main latent) and is untouched in eval mode.
    pub fn forward(&self, x: &Tensor, lam: f64, mode: Mode, rng: &mut SeededRng) -> Result<ForwardResult> {
        Self::check_lambda(lam)?;
        let x = self.check_input(x)?;
        let (b, _, h, w) = x.dims4()?;
        let mut gates = Vec::new();
        let y_mod = self.analysis(&x, lam, mode, &mut gates)?;
        let z = self.hyper_analysis(&y_mod, mode, &mut gates)?;
        let z_hat = quantize(&z, mode, rng)?;
        let rate_bits_hyper = rate_bits(&self.hyper_likelihood(&z_hat)?)?;
        let entropy_params = self.hyper_synthesis(&z_hat, mode, &mut gates)?;
        let y_hat = quantize(&y_mod, mode, rng)?;
        let lik = self.main_likelihood(&y_hat, &entropy_params)?;
        let rate_bits_main = rate_bits(&lik.probs)?;
        let x_hat = self.synthesis(&y_hat, lam, mode, &mut gates)?;
        Ok(ForwardResult {
            x_hat,
            rate_bits_main,
            rate_bits_hyper,
            gates,
            y_mod,
            y_hat,
            z_hat,
            entropy_params,
            scales_clamped: lik.scales_clamped,
            pixels: b * h * w,
        })
    }

    /// Eval-mode forward; no randomness is consumed.
    pub fn forward_eval(&self, x: &Tensor, lam: f64) -> Result<ForwardResult> {
        self.forward(x, lam, Mode::Eval, &mut init::stream(0, 0))
    }
}
