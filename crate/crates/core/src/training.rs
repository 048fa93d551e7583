//! Rate-distortion objectives with the gate sparsity penalty, λ sampling
//! and the optimization loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, SGD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{checkpoint, CodecState, ForwardResult, ParamGroup};
use crate::error::invalid;
use crate::gating::GateParams;
use crate::init::{self, SeededRng};
use crate::metrics;
use crate::{Error, Mode, Result};

const STREAM_LAMBDA: u64 = 0x6c61_6d62;
const STREAM_NOISE: u64 = 0x6e6f_6973;
const STREAM_BATCH: u64 = 0x6261_7463;

/// Scale between the usual λ presets (which weight MSE on 0..255 pixels)
/// and distortion measured on [0, 1] images.
pub const PIXEL_SCALE_SQ: f64 = 255.0 * 255.0;

/// Eight log-spaced values spanning `[1e-3, 0.2] * 255^2`.
pub fn default_lambda_set() -> Vec<f64> {
    log_spaced(1e-3 * PIXEL_SCALE_SQ, 0.2 * PIXEL_SCALE_SQ, 8)
}

pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Single-λ training of backbone and entropy model.
    FixedRate,
    /// Adds the gates and the sparsity penalty.
    Ecg,
    /// Trains the modulator pair over the λ set, starting from a trained model.
    BmFinetune,
    /// Everything at once.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::FixedRate => "fixed_rate",
            Stage::Ecg => "ecg",
            Stage::BmFinetune => "bm_finetune",
            Stage::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_set: Vec<f64>,
    pub gamma: f64,
    pub alpha_target: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub stage: Stage,
    pub freeze_backbone: bool,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Train only the gate thresholds on the sparsity penalty, with the
    /// rate and distortion gradients masked out.
    pub penalty_only: bool,
    /// Run an eval-mode pass on the batch every this many steps to log
    /// binary-mask sparsity; 0 disables.
    pub eval_sparsity_every: usize,
    pub log_path: Option<PathBuf>,
    /// Write `step_<n>.gckp` into `checkpoint_dir` every this many steps.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_set: default_lambda_set(),
            gamma: 1e-4,
            alpha_target: 1e-4,
            steps: 1000,
            batch_size: 8,
            learning_rate: 1e-4,
            seed: 0,
            stage: Stage::FixedRate,
            freeze_backbone: false,
            optimizer: OptimizerKind::AdamW,
            grad_clip: 1.0,
            penalty_only: false,
            eval_sparsity_every: 1,
            log_path: None,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_set.is_empty() {
            return Err(invalid("lambda_set must not be empty"));
        }
        if self.lambda_set.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(invalid("every lambda must be positive and finite"));
        }
        if self.stage == Stage::FixedRate && self.lambda_set.len() != 1 {
            return Err(invalid("fixed_rate training uses exactly one lambda"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma must be non-negative"));
        }
        if !self.alpha_target.is_finite() {
            return Err(invalid("alpha_target must be finite"));
        }
        if self.freeze_backbone && self.stage != Stage::BmFinetune {
            return Err(invalid("freeze_backbone applies to the bm_finetune stage only"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate must be positive"));
        }
        if self.grad_clip < 0.0 {
            return Err(invalid("grad_clip must be non-negative"));
        }
        Ok(())
    }
}

/// Scalar values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Bits per pixel.
    pub rate: f64,
    /// Mean squared error on [0, 1] images.
    pub distortion: f64,
    pub sparsity_penalty: f64,
    pub total: f64,
    pub lambda_used: f64,
}

/// Differentiable rate, distortion and `R + λD`.
pub struct RdTerms {
    pub rate: Tensor,
    pub distortion: Tensor,
    pub loss: Tensor,
}

pub fn rd_loss(fr: &ForwardResult, x: &Tensor, lam: f64) -> Result<RdTerms> {
    if fr.x_hat.dims() != x.dims() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", fr.x_hat.dims(), x.dims())));
    }
    let rate = fr.bpp_tensor()?;
    let distortion = (&fr.x_hat - x.to_dtype(fr.x_hat.dtype())?)?.sqr()?.mean_all()?;
    let loss = (&rate + (&distortion * lam)?)?;
    Ok(RdTerms { rate, distortion, loss })
}

/// `sum over gates and channels of (alpha - alpha_target)^2`.
pub fn sparsity_loss(gates: &[&GateParams], alpha_target: f64) -> Result<Tensor> {
    let Some(first) = gates.first() else {
        log::warn!("sparsity penalty requested with no gates; using 0");
        return Ok(Tensor::zeros((), DType::F64, &candle_core::Device::Cpu)?);
    };
    let mut acc = Tensor::zeros((), first.alpha.dtype(), first.alpha.device())?;
    for g in gates {
        acc = (acc + (g.alpha.as_tensor() - alpha_target)?.sqr()?.sum_all()?)?;
    }
    Ok(acc)
}

/// Full objective `R + λD + γ·penalty`, returned as a tensor for
/// backpropagation together with its scalar breakdown.
pub fn total_loss(
    fr: &ForwardResult,
    x: &Tensor,
    lam: f64,
    cfg: &TrainConfig,
    gates: &[&GateParams],
) -> Result<(Tensor, LossBreakdown)> {
    let rd = rd_loss(fr, x, lam)?;
    let penalty = sparsity_loss(gates, cfg.alpha_target)?.to_dtype(rd.loss.dtype())?;
    let total = (&rd.loss + (&penalty * cfg.gamma)?)?;
    let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        rate: s(&rd.rate)?,
        distortion: s(&rd.distortion)?,
        sparsity_penalty: s(&penalty)?,
        total: s(&total)?,
        lambda_used: lam,
    };
    Ok((total, breakdown))
}

/// Uniform draw from the λ set, a pure function of `(seed, step)`.
pub fn sample_lambda(cfg: &TrainConfig, step: usize) -> Result<f64> {
    if cfg.lambda_set.is_empty() {
        return Err(invalid("lambda_set must not be empty"));
    }
    let mut rng = init::stream(cfg.seed ^ STREAM_LAMBDA, step as u64);
    Ok(cfg.lambda_set[rng.gen_range(0..cfg.lambda_set.len())])
}

/// Source of training batches `(B, C, H, W)` on [0, 1].
pub trait BatchSource {
    fn next_batch(&mut self, step: usize, batch_size: usize) -> Result<Tensor>;
}

/// Fixed pool of equally sized images; batch composition is a pure
/// function of `(seed, step)`.
pub struct InMemoryBatches {
    images: Vec<Tensor>,
    seed: u64,
}

impl InMemoryBatches {
    /// `images` are `(C, H, W)` tensors of identical shape.
    pub fn new(images: Vec<Tensor>, seed: u64) -> Result<Self> {
        let Some(first) = images.first() else {
            return Err(Error::Data("no training images".into()));
        };
        let shape = first.dims().to_vec();
        if shape.len() != 3 || images.iter().any(|t| t.dims() != shape.as_slice()) {
            return Err(Error::Data("training images must share one (C, H, W) shape".into()));
        }
        Ok(Self { images, seed })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl BatchSource for InMemoryBatches {
    fn next_batch(&mut self, step: usize, batch_size: usize) -> Result<Tensor> {
        let mut rng = init::stream(self.seed ^ STREAM_BATCH, step as u64);
        let picks: Vec<&Tensor> = (0..batch_size).map(|_| &self.images[rng.gen_range(0..self.images.len())]).collect();
        Ok(Tensor::stack(&picks, 0)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub lambda: f64,
    pub rate: f64,
    pub distortion: f64,
    pub penalty: f64,
    pub total: f64,
    /// FLOP-weighted sparsity of an eval-mode pass on this batch, when run.
    pub sparsity: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// Centered moving average of the total loss over `window` steps.
    pub fn smoothed_total(&self, window: usize) -> Vec<f64> {
        let v: Vec<f64> = self.records.iter().map(|r| r.total).collect();
        v.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

enum Opt {
    Adam(AdamW),
    Sgd(SGD),
}

impl Opt {
    fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Opt::Adam(o) => o.step(grads)?,
            Opt::Sgd(o) => o.step(grads)?,
        }
        Ok(())
    }
}

/// Variables updated in the given configuration.
pub fn trainable_vars(state: &CodecState, cfg: &TrainConfig) -> Result<Vec<Var>> {
    let has = |g: ParamGroup| state.named_vars().iter().any(|(_, _, pg)| *pg == g);
    let groups: Vec<ParamGroup> = if cfg.penalty_only {
        vec![ParamGroup::Gate]
    } else {
        match cfg.stage {
            Stage::FixedRate => vec![ParamGroup::Backbone, ParamGroup::Entropy],
            Stage::Ecg => {
                if !has(ParamGroup::Gate) {
                    return Err(Error::InvalidState("ecg stage needs gates".into()));
                }
                vec![ParamGroup::Backbone, ParamGroup::Entropy, ParamGroup::Gate]
            }
            Stage::BmFinetune => {
                if !has(ParamGroup::Modulator) {
                    return Err(Error::InvalidState("bm_finetune stage needs a modulator".into()));
                }
                if cfg.freeze_backbone {
                    vec![ParamGroup::Modulator]
                } else {
                    vec![ParamGroup::Backbone, ParamGroup::Entropy, ParamGroup::Gate, ParamGroup::Modulator]
                }
            }
            Stage::Joint => vec![ParamGroup::Backbone, ParamGroup::Entropy, ParamGroup::Gate, ParamGroup::Modulator],
        }
    };
    let vars: Vec<Var> = state
        .named_vars()
        .into_iter()
        .filter(|(_, _, g)| groups.contains(g))
        .map(|(_, v, _)| v)
        .collect();
    if vars.is_empty() {
        return Err(Error::InvalidState("nothing to train".into()));
    }
    Ok(vars)
}

fn snapshot(state: &CodecState) -> Result<Vec<Tensor>> {
    state.named_vars().iter().map(|(_, v, _)| Ok(v.as_tensor().copy()?)).collect()
}

fn restore(state: &CodecState, snap: &[Tensor]) -> Result<()> {
    for ((_, v, _), t) in state.named_vars().iter().zip(snap) {
        v.set(t)?;
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
fn clip_gradients(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = (g * k)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Optimize `state` in place. On a non-finite loss the parameters are
/// restored to the last good snapshot and [`Error::Divergence`] is returned.
pub fn train(state: &mut CodecState, data: &mut dyn BatchSource, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok(log);
    }
    let vars = trainable_vars(state, cfg)?;
    let mut opt = match cfg.optimizer {
        OptimizerKind::AdamW => Opt::Adam(AdamW::new(
            vars.clone(),
            ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
        )?),
        OptimizerKind::Sgd => Opt::Sgd(SGD::new(vars.clone(), cfg.learning_rate)?),
    };
    let mut writer = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(File::options().create(true).append(true).open(p)?)),
        None => None,
    };
    let mut last_good = snapshot(state)?;
    for step in 0..cfg.steps {
        let lam = sample_lambda(cfg, step)?;
        let gates = state.gate_params();
        let (loss, breakdown, batch) = if cfg.penalty_only {
            let p = sparsity_loss(&gates, cfg.alpha_target)?;
            let total = (&p * cfg.gamma)?;
            let b = LossBreakdown {
                rate: 0.0,
                distortion: 0.0,
                sparsity_penalty: scalar(&p)?,
                total: scalar(&total)?,
                lambda_used: lam,
            };
            (total, b, None)
        } else {
            let x = data.next_batch(step, cfg.batch_size)?.to_dtype(state.dtype())?;
            let mut rng: SeededRng = init::stream(cfg.seed ^ STREAM_NOISE, step as u64);
            let fr = state.forward(&x, lam, Mode::Train, &mut rng)?;
            let (total, b) = total_loss(&fr, &x, lam, cfg, &gates)?;
            (total, b, Some(x))
        };
        if !breakdown.total.is_finite() {
            restore(state, &last_good)?;
            return Err(Error::Divergence { step });
        }
        let mut grads = loss.backward()?;
        let norm = clip_gradients(&mut grads, &vars, cfg.grad_clip)?;
        if !norm.is_finite() {
            restore(state, &last_good)?;
            return Err(Error::Divergence { step });
        }
        opt.step(&grads)?;

        let sparsity = match (&batch, cfg.eval_sparsity_every) {
            (Some(x), n) if n > 0 && step % n == 0 && state.gate_count() > 0 => {
                let fr = state.forward_eval(x, lam)?;
                let (_, _, h, w) = x.dims4()?;
                Some(metrics::ledger_from_gates(&state.config, h, w, &fr.gates)?.flop_weighted_sparsity())
            }
            _ => None,
        };
        let rec = StepRecord {
            step,
            stage: cfg.stage,
            lambda: lam,
            rate: breakdown.rate,
            distortion: breakdown.distortion,
            penalty: breakdown.sparsity_penalty,
            total: breakdown.total,
            sparsity,
        };
        if let Some(w) = writer.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?)?;
        }
        log.records.push(rec);

        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            last_good = snapshot(state)?;
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                checkpoint::save(state, dir.join(format!("step_{done}.gckp")))?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    state.meta.steps_trained += cfg.steps;
    state.meta.record_lambdas(&cfg.lambda_set);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_codec, CodecConfig};
    use candle_core::Device;

    #[test]
    fn default_lambda_grid() {
        let l = default_lambda_set();
        assert_eq!(l.len(), 8);
        assert!((l[0] - 65.025).abs() < 1e-9 && (l[7] - 13005.0).abs() < 1e-6);
        assert!(l.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sparsity_loss_examples() {
        let mut rng = init::stream(0, 0);
        let g = GateParams::new(2, 4.0, &mut rng, DType::F64).unwrap();
        let p = sparsity_loss(&[&g], 0.1).unwrap().to_scalar::<f64>().unwrap();
        assert!((p - 0.02).abs() < 1e-15);
        g.alpha.set(&Tensor::new(&[0.1f64, 0.1], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(sparsity_loss(&[&g], 0.1).unwrap().to_scalar::<f64>().unwrap(), 0.0);
        assert_eq!(sparsity_loss(&[], 0.1).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn sparsity_gradient_is_linear() {
        let mut rng = init::stream(0, 0);
        let g = GateParams::new(3, 4.0, &mut rng, DType::F64).unwrap();
        g.alpha.set(&Tensor::new(&[0.5f64, -0.25, 2.0], &Device::Cpu).unwrap()).unwrap();
        let grads = sparsity_loss(&[&g], 0.1).unwrap().backward().unwrap();
        let ga = grads.get(g.alpha.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let want = [0.8, -0.7, 3.8];
        for (a, b) in ga.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_sampling_is_deterministic() {
        let cfg = TrainConfig { lambda_set: vec![0.5], ..Default::default() };
        assert!((0..50).all(|s| sample_lambda(&cfg, s).unwrap() == 0.5));
        let cfg = TrainConfig::default();
        assert_eq!(sample_lambda(&cfg, 17).unwrap(), sample_lambda(&cfg, 17).unwrap());
        let cfg = TrainConfig { lambda_set: vec![], ..Default::default() };
        assert!(sample_lambda(&cfg, 0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_err(), "fixed_rate with 8 lambdas");
        let ok = TrainConfig { lambda_set: vec![100.0], ..Default::default() };
        ok.validate().unwrap();
        let bad = TrainConfig { freeze_backbone: true, ..ok.clone() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { gamma: -1.0, stage: Stage::Ecg, ..ok.clone() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_steps_leave_state_untouched() {
        let mut state = build_codec(&CodecConfig::default(), 3).unwrap();
        let before = checkpoint::parameter_section(&state).unwrap();
        let x = Tensor::zeros((3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let mut data = InMemoryBatches::new(vec![x], 0).unwrap();
        let cfg = TrainConfig { lambda_set: vec![100.0], steps: 0, ..Default::default() };
        let log = train(&mut state, &mut data, &cfg).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(checkpoint::parameter_section(&state).unwrap(), before);
    }

    #[test]
    fn stage_preconditions() {
        let state = build_codec(&CodecConfig { gate_every_layer_except_first: false, ..Default::default() }, 0).unwrap();
        let cfg = TrainConfig { stage: Stage::Ecg, ..Default::default() };
        assert!(matches!(trainable_vars(&state, &cfg), Err(Error::InvalidState(_))));
        let cfg = TrainConfig { stage: Stage::BmFinetune, ..Default::default() };
        assert!(matches!(trainable_vars(&state, &cfg), Err(Error::InvalidState(_))));
    }
}
