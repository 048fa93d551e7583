//! Lossless entropy coding of quantized latents.

pub mod bitstream;
pub mod cdf;
pub mod range;

use candle_core::{DType, Device, Tensor};

use crate::codec::entropy::gaussian_bin_probability;
use crate::codec::{checkpoint, CodecState, EntropyParams, HYPER_DOWNSAMPLING, MAIN_DOWNSAMPLING};
use crate::error::invalid;
use crate::{Error, Mode, Result};

pub use bitstream::Bitstream;
pub use cdf::{build_cdf, build_cdf_with_escape, CdfTable, DEFAULT_PRECISION};
pub use range::{range_decode, range_encode, RangeDecoder, RangeEncoder};

/// Hyper-prior tables are evaluated on `-HYPER_SPAN..=HYPER_SPAN`.
const HYPER_SPAN: i64 = 64;
/// Main tables cover the mean plus or minus this many scales.
const MAIN_TAIL_SCALES: f64 = 16.0;
const MAIN_MAX_SYMBOLS: i64 = 4096;
/// Table entries below this mass are left to the escape slot.
const TABLE_TRIM: f64 = 1e-9;

/// One table per hyper-latent channel.
pub fn hyper_tables(state: &CodecState, precision: u32) -> Result<Vec<CdfTable>> {
    let pmf = state.prior.pmf_table(-HYPER_SPAN, HYPER_SPAN)?;
    pmf.iter()
        .map(|row| {
            let keep: Vec<usize> = (0..row.len()).filter(|&i| row[i] >= TABLE_TRIM).collect();
            let (a, b) = match (keep.first(), keep.last()) {
                (Some(&a), Some(&b)) => (a, b),
                _ => {
                    let m = (0..row.len()).max_by(|&i, &j| row[i].total_cmp(&row[j])).unwrap_or(0);
                    (m, m)
                }
            };
            build_cdf_with_escape(&row[a..=b], a as i64 - HYPER_SPAN, precision)
        })
        .collect()
}

/// Discretized Gaussian table for one latent element.
pub fn gaussian_table(mean: f64, scale: f64, precision: u32) -> Result<CdfTable> {
    if !(scale > 0.0 && scale.is_finite() && mean.is_finite()) {
        return Err(invalid(format!("bad Gaussian parameters mean={mean} scale={scale}")));
    }
    let mut lo = (mean - MAIN_TAIL_SCALES * scale).floor() as i64;
    let mut hi = (mean + MAIN_TAIL_SCALES * scale).ceil() as i64;
    if hi - lo + 1 > MAIN_MAX_SYMBOLS {
        let c = mean.round() as i64;
        lo = c - MAIN_MAX_SYMBOLS / 2;
        hi = lo + MAIN_MAX_SYMBOLS - 1;
    }
    let probs: Vec<f64> = (lo..=hi).map(|s| gaussian_bin_probability(s as f64, mean, scale)).collect();
    build_cdf_with_escape(&probs, lo, precision)
}

fn main_tables(state: &CodecState, params: &EntropyParams, precision: u32) -> Result<Vec<CdfTable>> {
    let floor = state.config.scale_floor;
    let scales = params.scales.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let means = match &params.means {
        Some(m) => m.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
        None => vec![0.0; scales.len()],
    };
    scales.iter().zip(&means).map(|(&s, &m)| gaussian_table(m, s.max(floor), precision)).collect()
}

fn to_symbols(t: &Tensor) -> Result<Vec<i64>> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    v.into_iter()
        .map(|x| {
            if x.is_finite() && x.abs() < 1e15 {
                Ok(x as i64)
            } else {
                Err(invalid(format!("latent value {x} cannot be coded")))
            }
        })
        .collect()
}

fn encode_with(symbols: &[i64], tables: &[CdfTable], per_channel: Option<usize>) -> Result<Vec<u8>> {
    let refs: Vec<&CdfTable> = match per_channel {
        Some(plane) => (0..symbols.len()).map(|i| &tables[i / plane]).collect(),
        None => tables.iter().collect(),
    };
    range_encode(symbols, &refs)
}

/// Compress one image `(1, C, H, W)` with sides divisible by 64. The
/// recorded image size is `orig_dims` when given, otherwise `(H, W)`.
pub fn compress_image(
    state: &CodecState,
    x: &Tensor,
    lam: f64,
    orig_dims: Option<(u32, u32)>,
) -> Result<Bitstream> {
    let (b, _, h, w) = x.dims4()?;
    if b != 1 {
        return Err(invalid(format!("compress_image takes a single image, got batch {b}")));
    }
    if !(lam > 0.0 && lam.is_finite()) {
        return Err(invalid(format!("lambda must be positive, got {lam}")));
    }
    if h % HYPER_DOWNSAMPLING != 0 || w % HYPER_DOWNSAMPLING != 0 {
        return Err(invalid(format!("image {h}x{w} is not a multiple of {HYPER_DOWNSAMPLING}")));
    }
    let x = x.to_dtype(state.dtype())?;
    let precision = DEFAULT_PRECISION;
    let mut records = Vec::new();
    let y_mod = state.analysis(&x, lam, Mode::Eval, &mut records)?;
    let z = state.hyper_analysis(&y_mod, Mode::Eval, &mut records)?;
    let z_hat = z.round()?;
    let (_, _, zh, zw) = z_hat.dims4()?;
    let z_syms = to_symbols(&z_hat)?;
    let payload_hyper = encode_with(&z_syms, &hyper_tables(state, precision)?, Some(zh * zw))?;

    let params = state.hyper_synthesis(&z_hat, Mode::Eval, &mut records)?;
    let y_hat = y_mod.round()?;
    let (_, _, yh, yw) = y_hat.dims4()?;
    let payload_main = encode_with(&to_symbols(&y_hat)?, &main_tables(state, &params, precision)?, None)?;

    Ok(Bitstream {
        version: bitstream::VERSION,
        model_checksum: checkpoint::checksum(state)?,
        lambda: lam,
        image_dims: orig_dims.unwrap_or((h as u32, w as u32)),
        latent_dims: (yh as u32, yw as u32),
        hyper_dims: (zh as u32, zw as u32),
        payload_hyper,
        payload_main,
    })
}

/// Inverse of [`compress_image`]; returns the padded reconstruction
/// `(1, C, 16*lh, 16*lw)` in the model dtype, clamped to [0, 1].
pub fn decompress_image(state: &CodecState, bs: &Bitstream) -> Result<Tensor> {
    if bs.version != bitstream::VERSION {
        return Err(Error::UnsupportedFormat(format!("bitstream version {}", bs.version)));
    }
    let expected = checkpoint::checksum(state)?;
    if bs.model_checksum != expected {
        return Err(Error::WrongModel { expected, found: bs.model_checksum });
    }
    let (yh, yw) = (bs.latent_dims.0 as usize, bs.latent_dims.1 as usize);
    let (zh, zw) = (bs.hyper_dims.0 as usize, bs.hyper_dims.1 as usize);
    let ratio = HYPER_DOWNSAMPLING / MAIN_DOWNSAMPLING;
    if yh == 0 || yw == 0 || yh != zh * ratio || yw != zw * ratio || yh > 1 << 14 || yw > 1 << 14 {
        return Err(Error::UnsupportedFormat(format!("inconsistent latent dims {yh}x{yw} / {zh}x{zw}")));
    }
    let precision = DEFAULT_PRECISION;
    let dev = Device::Cpu;
    let n = state.config.base_channels;
    let m = state.config.latent_channels;

    let tables = hyper_tables(state, precision)?;
    let plane = zh * zw;
    let refs: Vec<&CdfTable> = (0..n * plane).map(|i| &tables[i / plane]).collect();
    let z_syms = range_decode(&bs.payload_hyper, &refs, refs.len())?;
    let z_vals: Vec<f64> = z_syms.iter().map(|&s| s as f64).collect();
    let z_hat = Tensor::from_vec(z_vals, (1, n, zh, zw), &dev)?.to_dtype(state.dtype())?;

    let mut records = Vec::new();
    let params = state.hyper_synthesis(&z_hat, Mode::Eval, &mut records)?;
    let tables = main_tables(state, &params, precision)?;
    let refs: Vec<&CdfTable> = tables.iter().collect();
    let y_syms = range_decode(&bs.payload_main, &refs, m * yh * yw)?;
    let y_vals: Vec<f64> = y_syms.iter().map(|&s| s as f64).collect();
    let y_hat = Tensor::from_vec(y_vals, (1, m, yh, yw), &dev)?.to_dtype(state.dtype())?;
    state.synthesis(&y_hat, bs.lambda, Mode::Eval, &mut records)
}

/// Crop a padded reconstruction back to the size recorded in the stream.
pub fn crop_to_original(x_hat: &Tensor, bs: &Bitstream) -> Result<Tensor> {
    let (h, w) = (bs.image_dims.0 as usize, bs.image_dims.1 as usize);
    Ok(x_hat.narrow(2, 0, h)?.narrow(3, 0, w)?)
}
