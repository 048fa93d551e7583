//! Command-line front end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::{checkpoint, build_codec, CodecConfig, CodecState, HYPER_DOWNSAMPLING};
use crate::coder::{self, Bitstream};
use crate::data;
use crate::metrics::{self, FlopLedger, ImageRecord, RDReport};
use crate::training::{self, InMemoryBatches, Stage, TrainConfig};
use crate::{Error, Result};

pub const DATA_DIR_ENV: &str = "GCODEC_DATA_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_MODEL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "gcodec", version, about = "Learned image codec with channel gating and variable-rate modulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train or fine-tune a model.
    Train(TrainArgs),
    /// Rate-distortion evaluation over a λ grid.
    Eval(EvalArgs),
    /// Encode one image to a bitstream.
    Compress(CompressArgs),
    /// Decode a bitstream to an image.
    Decompress(DecompressArgs),
    /// Per-layer effective FLOPs under the learned gates.
    Profile(ProfileArgs),
    /// Cut a directory of images into training patches.
    Ingest(IngestArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// TOML file with optional [codec], [train] and [data] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.gamma=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Starting checkpoint (required for bm_finetune).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Directory of training patches; falls back to $GCODEC_DATA_DIR.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Append per-step JSON records here.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of test images; falls back to $GCODEC_DATA_DIR.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub lambda_grid: Option<Vec<f64>>,
    /// Measure rates with the range coder instead of the likelihood estimate.
    #[arg(long)]
    pub coded: bool,
    /// Output directory for rd.csv, rd.jsonl and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecompressArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Original image, to report PSNR.
    #[arg(long)]
    pub original: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Write the ledger as CSV here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub patch: u32,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    pub scales: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    /// Train on this many generated toy images when no directory is given.
    pub synthetic: usize,
    /// Side of the generated toy images.
    pub synthetic_size: usize,
}

/// Everything a config file may set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Defaults, then the file, then `key=value` overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &[String]) -> Result<FileConfig> {
    let mut root = toml::Table::try_from(FileConfig::default()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        let file: toml::Table = text.parse().map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        // Validate the file on its own so unknown keys are reported against it.
        toml::from_str::<FileConfig>(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))?;
        merge(&mut root, file);
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override `{o}` is not KEY=VALUE")))?;
        let value = parse_value(raw.trim());
        set_path(&mut root, key.trim(), value)?;
    }
    toml::Value::Table(root).try_into().map_err(|e| Error::InvalidArgument(format!("config: {e}")))
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, head) = parts.split_last().expect("split yields one part");
    let mut cur = root;
    for p in head {
        cur = match cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::InvalidArgument(format!("`{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Data(_) | Error::Io(_) | Error::Decode(_) | Error::UnsupportedFormat(_) => EXIT_DATA,
        Error::WrongModel { .. } => EXIT_MODEL,
        _ => EXIT_OTHER,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Compress(a) => cmd_compress(&a).map(|_| ()),
        Command::Decompress(a) => cmd_decompress(&a).map(|_| ()),
        Command::Profile(a) => cmd_profile(&a).map(|_| ()),
        Command::Ingest(a) => {
            let entries = data::ingest_dataset(&a.src, &a.out, a.patch, &a.scales)?;
            println!("{} patches written to {}", entries.len(), a.out.display());
            Ok(())
        }
    }
}

fn data_dir(flag: Option<&PathBuf>, file: Option<&PathBuf>) -> Option<PathBuf> {
    flag.cloned().or_else(|| file.cloned()).or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
}

fn load_dir_images(dir: &Path) -> Result<Vec<(String, candle_core::Tensor)>> {
    let files = data::list_images(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for f in files {
        match data::load_image(&f) {
            Ok(t) => out.push((f.file_name().unwrap_or_default().to_string_lossy().into_owned(), t)),
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no readable images in {}", dir.display())));
    }
    Ok(out)
}

/// Effective training configuration after applying the command-line flags.
pub fn train_config(a: &TrainArgs) -> Result<FileConfig> {
    let mut fc = resolve_config(a.common.config.as_deref(), &a.common.overrides)?;
    if let Some(s) = a.common.seed {
        fc.train.seed = s;
    }
    if let Some(s) = a.steps {
        fc.train.steps = s;
    }
    if let Some(g) = &a.lambda_grid {
        fc.train.lambda_set = g.clone();
    }
    if let Some(l) = a.lambda {
        fc.train.lambda_set = vec![l];
    }
    if let Some(p) = &a.log {
        fc.train.log_path = Some(p.clone());
    }
    Ok(fc)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let fc = train_config(a)?;
    let cfg = &fc.train;
    cfg.validate()?;
    if cfg.stage == Stage::BmFinetune && a.checkpoint.is_none() {
        return Err(Error::InvalidArgument("bm_finetune needs a pretrained --checkpoint".into()));
    }
    if cfg.steps == 0 {
        match &a.checkpoint {
            Some(src) => {
                std::fs::copy(src, &a.out)?;
            }
            None => checkpoint::save(&build_codec(&fc.codec, cfg.seed)?, &a.out)?,
        }
        return Ok(());
    }
    let mut state = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => build_codec(&fc.codec, cfg.seed)?,
    };
    prepare_stage(&mut state, &fc)?;
    let h = state_patch_source(&fc, a.data.as_ref())?;
    let mut batches = InMemoryBatches::new(h, cfg.seed)?;
    let log = training::train(&mut state, &mut batches, cfg)?;
    checkpoint::save(&state, &a.out)?;
    if let Some(last) = log.records.last() {
        println!(
            "trained {} steps: R={:.4} bpp D={:.6} total={:.4}",
            log.records.len(),
            last.rate,
            last.distortion,
            last.total
        );
    }
    Ok(())
}

/// Attach whatever modules the stage trains but the state lacks.
pub fn prepare_stage(state: &mut CodecState, fc: &FileConfig) -> Result<()> {
    let seed = fc.train.seed;
    if matches!(fc.train.stage, Stage::Ecg | Stage::Joint) && state.gate_count() == 0 {
        state.config.epsilon = fc.codec.epsilon;
        state.enable_gates(seed)?;
    }
    if matches!(fc.train.stage, Stage::BmFinetune | Stage::Joint) && state.modulator.is_none() {
        state.config.modulator = fc.codec.modulator.clone();
        state.enable_modulator(seed)?;
    }
    Ok(())
}

fn state_patch_source(fc: &FileConfig, flag: Option<&PathBuf>) -> Result<Vec<candle_core::Tensor>> {
    if let Some(dir) = data_dir(flag, fc.data.dir.as_ref()) {
        let imgs: Vec<_> = load_dir_images(&dir)?.into_iter().map(|(_, t)| t).collect();
        let (_, h, w) = imgs[0].dims3()?;
        if h % HYPER_DOWNSAMPLING != 0 || w % HYPER_DOWNSAMPLING != 0 {
            return Err(Error::Data(format!("training patches must be multiples of {HYPER_DOWNSAMPLING}, got {h}x{w}")));
        }
        return Ok(imgs);
    }
    if fc.data.synthetic > 0 {
        let side = if fc.data.synthetic_size == 0 { 64 } else { fc.data.synthetic_size };
        return data::synthetic_set(fc.train.seed, fc.data.synthetic, side, side);
    }
    Err(Error::Data(format!("no training data: pass --data, set data.dir, or set ${DATA_DIR_ENV}")))
}

fn eval_lambdas(state: &CodecState, one: Option<f64>, grid: Option<&Vec<f64>>) -> Vec<f64> {
    if let Some(g) = grid {
        return g.clone();
    }
    if let Some(l) = one {
        return vec![l];
    }
    if !state.meta.trained_lambdas.is_empty() {
        return state.meta.trained_lambdas.clone();
    }
    training::default_lambda_set()
}

fn warn_extrapolation(state: &CodecState, lam: f64) {
    let t = &state.meta.trained_lambdas;
    if let (Some(lo), Some(hi)) = (t.iter().copied().reduce(f64::min), t.iter().copied().reduce(f64::max)) {
        if lam < lo || lam > hi {
            log::warn!("lambda {lam} is outside the trained range [{lo}, {hi}]; results are extrapolated");
            eprintln!("warning: lambda {lam} is outside the trained range [{lo}, {hi}]");
        }
    }
}

/// Evaluate one image at one λ. Returns the record and the eval-mode ledger.
pub fn evaluate_image(
    state: &CodecState,
    name: &str,
    img: &candle_core::Tensor,
    lam: f64,
    coded: bool,
) -> Result<(ImageRecord, FlopLedger)> {
    let x = img.unsqueeze(0)?;
    let (padded, (h, w)) = data::reflect_pad(&x, HYPER_DOWNSAMPLING)?;
    let fr = state.forward_eval(&padded, lam)?;
    let (_, _, ph, pw) = padded.dims4()?;
    let ledger = metrics::ledger_from_gates(&state.config, ph, pw, &fr.gates)?;
    let bits = if coded {
        coder::compress_image(state, &padded, lam, Some((h as u32, w as u32)))?.payload_bits() as f64
    } else {
        fr.total_rate_bits()?
    };
    let x_hat = fr.x_hat.narrow(2, 0, h)?.narrow(3, 0, w)?;
    let rec = ImageRecord {
        image: name.to_string(),
        lambda: lam,
        bpp: metrics::bits_per_pixel(bits, w, h)?,
        psnr: metrics::psnr(&x, &x_hat)?,
        sparsity: ledger.flop_weighted_sparsity(),
    };
    Ok((rec, ledger))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<RDReport> {
    let state = checkpoint::load(&a.checkpoint)?;
    let dir = data_dir(a.images.as_ref(), None)
        .ok_or_else(|| Error::InvalidArgument(format!("pass --images or set ${DATA_DIR_ENV}")))?;
    let images = load_dir_images(&dir)?;
    let lambdas = eval_lambdas(&state, a.lambda, a.lambda_grid.as_ref());
    let mut report = RDReport { model_bytes: checkpoint::parameter_bytes(&state), ..Default::default() };
    let mut ledger = FlopLedger::default();
    for &lam in &lambdas {
        warn_extrapolation(&state, lam);
        for (name, img) in &images {
            let (rec, l) = evaluate_image(&state, name, img, lam, a.coded)?;
            ledger.accumulate(&l)?;
            report.records.push(rec);
        }
    }
    report.flop_reduction = ledger.reduction()?;
    std::fs::create_dir_all(&a.out)?;
    report.write_csv(File::create(a.out.join("rd.csv"))?)?;
    report.write_jsonl(BufWriter::new(File::create(a.out.join("rd.jsonl"))?))?;
    let mut w = csv::Writer::from_path(a.out.join("summary.csv")).map_err(|e| Error::Data(e.to_string()))?;
    for s in report.summary() {
        w.serialize(s).map_err(|e| Error::Data(e.to_string()))?;
        println!("lambda={:<10.4} bpp={:.4} psnr={:.3} dB sparsity={:.3}", s.lambda, s.mean_bpp, s.mean_psnr, s.mean_sparsity);
    }
    w.flush()?;
    println!("flop reduction {:.3}x", report.flop_reduction);
    Ok(report)
}

pub fn cmd_compress(a: &CompressArgs) -> Result<Bitstream> {
    let state = checkpoint::load(&a.checkpoint)?;
    warn_extrapolation(&state, a.lambda);
    let x = data::load_image(&a.input)?.unsqueeze(0)?;
    let (padded, (h, w)) = data::reflect_pad(&x, HYPER_DOWNSAMPLING)?;
    let bs = coder::compress_image(&state, &padded, a.lambda, Some((h as u32, w as u32)))?;
    std::fs::write(&a.out, bs.to_bytes())?;
    println!("{} bytes, {:.4} bpp", bs.size_bits() / 8, metrics::bits_per_pixel(bs.size_bits() as f64, w, h)?);
    Ok(bs)
}

pub fn cmd_decompress(a: &DecompressArgs) -> Result<Option<f64>> {
    let state = checkpoint::load(&a.checkpoint)?;
    let bs = Bitstream::from_bytes(&std::fs::read(&a.input)?)?;
    let x_hat = coder::crop_to_original(&coder::decompress_image(&state, &bs)?, &bs)?;
    data::save_image(&x_hat, &a.out)?;
    let (h, w) = (bs.image_dims.0 as usize, bs.image_dims.1 as usize);
    println!("{:.4} bpp", metrics::bits_per_pixel(bs.size_bits() as f64, w, h)?);
    if let Some(o) = &a.original {
        let x = data::load_image(o)?.unsqueeze(0)?;
        let p = metrics::psnr(&x, &x_hat)?;
        println!("psnr {p:.3} dB");
        return Ok(Some(p));
    }
    Ok(None)
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<FlopLedger> {
    let state = checkpoint::load(&a.checkpoint)?;
    let dir = data_dir(a.images.as_ref(), None)
        .ok_or_else(|| Error::InvalidArgument(format!("pass --images or set ${DATA_DIR_ENV}")))?;
    let lam = eval_lambdas(&state, a.lambda, None).last().copied().unwrap_or(1.0);
    let mut ledger = FlopLedger::default();
    for (name, img) in load_dir_images(&dir)? {
        let (_, l) = evaluate_image(&state, &name, &img, lam, false)?;
        ledger.accumulate(&l)?;
    }
    let stdout = std::io::stdout();
    ledger.write_csv(stdout.lock())?;
    if let Some(p) = &a.out {
        ledger.write_csv(File::create(p)?)?;
    }
    let mut out = stdout.lock();
    writeln!(out, "total reduction {:.3}x", ledger.reduction()?)?;
    writeln!(out, "flop-weighted sparsity {:.4}", ledger.flop_weighted_sparsity())?;
    Ok(ledger)
}
