//! Reconstruction quality, rate, FLOP and storage accounting, and
//! rate-distortion reports.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::checkpoint::parameter_bytes;
use crate::codec::{CodecConfig, CodecState, GateRecord, LayerSpec};
use crate::error::invalid;
use crate::{Error, Result};

/// Reported PSNR for a lossless reconstruction.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP)
}

pub fn mse(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.dims() != x_hat.dims() {
        return Err(invalid(format!("shape mismatch {:?} vs {:?}", x.dims(), x_hat.dims())));
    }
    let d = (x.to_dtype(DType::F64)? - x_hat.to_dtype(DType::F64)?)?;
    Ok(d.sqr()?.mean_all()?.to_scalar::<f64>()?)
}

/// PSNR in dB for images on [0, 1].
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, x_hat)?))
}

/// Absolute drop in dB and the same drop as a percentage of the reference.
pub fn psnr_drop(reference_db: f64, other_db: f64) -> (f64, f64) {
    let d = reference_db - other_db;
    (d, 100.0 * d / reference_db)
}

pub fn bits_per_pixel(total_bits: f64, width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(invalid("bits_per_pixel over zero pixels"));
    }
    Ok(total_bits / (width * height) as f64)
}

/// Convolution FLOPs counting one multiply-add as two operations.
pub fn conv_flops(c_in: usize, c_out: usize, k: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (c_in * c_out * k * k) as u64 * (h_out * w_out) as u64
}

pub fn layer_flops(spec: &LayerSpec, h_in: usize, w_in: usize) -> u64 {
    let (gh, gw) = spec.mac_grid(h_in, w_in);
    conv_flops(spec.c_in, spec.c_out, spec.kernel, gh, gw)
}

/// Input spatial size of every backbone layer for an `h × w` image.
pub fn layer_input_dims(cfg: &CodecConfig, h: usize, w: usize) -> Vec<(usize, usize)> {
    let specs = cfg.layer_specs();
    let mut dims = Vec::with_capacity(specs.len());
    let mut cur = (h, w);
    let mut latent = (h, w);
    for (i, s) in specs.iter().enumerate() {
        if i == 4 {
            latent = cur;
        }
        if i == 10 {
            cur = latent;
        }
        dims.push(cur);
        cur = s.output_dims(cur.0, cur.1);
    }
    dims
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub gated: bool,
    pub c_in: usize,
    pub baseline_flops: u64,
    pub effective_flops: f64,
    /// Mean number of input channels left on, over all samples.
    pub input_channels_active: f64,
    pub output_dims: (usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub layers: Vec<LayerFlops>,
    pub baseline_total: u64,
    pub effective_total: f64,
}

/// One layer's shape together with its eval-mode input mask `(B, C_in)`,
/// or `None` for an ungated layer.
pub struct LayerMask<'a> {
    pub spec: &'a LayerSpec,
    pub input_dims: (usize, usize),
    pub mask: Option<&'a [Vec<f64>]>,
}

/// Per-layer baseline and effective FLOPs. A masked-off input channel
/// removes its share of the consuming layer's multiply-adds.
pub fn effective_flops(layers: &[LayerMask<'_>]) -> Result<FlopLedger> {
    let mut ledger = FlopLedger::default();
    for l in layers {
        let (h, w) = l.input_dims;
        let baseline = layer_flops(l.spec, h, w);
        let c_in = l.spec.c_in;
        let active = match l.mask {
            None => c_in as f64,
            Some(rows) => {
                if rows.is_empty() {
                    return Err(invalid(format!("empty mask for {}", l.spec.name())));
                }
                let mut on = 0usize;
                for r in rows {
                    if r.len() != c_in {
                        return Err(invalid(format!("{}: mask width {} != {c_in}", l.spec.name(), r.len())));
                    }
                    for &v in r {
                        if v == 1.0 {
                            on += 1;
                        } else if v != 0.0 {
                            return Err(Error::InvalidState(format!("{}: non-binary mask value {v}", l.spec.name())));
                        }
                    }
                }
                on as f64 / rows.len() as f64
            }
        };
        let effective = baseline as f64 * (active / c_in as f64);
        ledger.baseline_total += baseline;
        ledger.effective_total += effective;
        ledger.layers.push(LayerFlops {
            layer: l.spec.name(),
            gated: l.mask.is_some(),
            c_in,
            baseline_flops: baseline,
            effective_flops: effective,
            input_channels_active: active,
            output_dims: l.spec.output_dims(h, w),
        });
    }
    Ok(ledger)
}

/// Ledger for one eval-mode forward pass of an `h × w` batch.
pub fn ledger_from_gates(cfg: &CodecConfig, h: usize, w: usize, gates: &[GateRecord]) -> Result<FlopLedger> {
    let specs = cfg.layer_specs();
    let dims = layer_input_dims(cfg, h, w);
    let mut masks: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for g in gates {
        masks.insert(g.layer, g.hard_mask.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    let inputs: Vec<LayerMask<'_>> = specs
        .iter()
        .enumerate()
        .map(|(i, s)| LayerMask { spec: s, input_dims: dims[i], mask: masks.get(&i).map(|m| m.as_slice()) })
        .collect();
    effective_flops(&inputs)
}

impl FlopLedger {
    pub fn reduction(&self) -> Result<f64> {
        flop_reduction(self.baseline_total as f64, self.effective_total)
    }

    /// Input-channel sparsity of the gated layers, weighted by their
    /// baseline FLOPs. Zero when nothing is gated.
    pub fn flop_weighted_sparsity(&self) -> f64 {
        let (mut base, mut removed) = (0.0, 0.0);
        for l in self.layers.iter().filter(|l| l.gated) {
            base += l.baseline_flops as f64;
            removed += l.baseline_flops as f64 - l.effective_flops;
        }
        if base == 0.0 {
            0.0
        } else {
            removed / base
        }
    }

    /// Add another ledger with the same layer list (e.g. another image).
    pub fn accumulate(&mut self, other: &FlopLedger) -> Result<()> {
        if self.layers.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.layers.len() != other.layers.len() {
            return Err(invalid("ledgers cover different layers"));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            if a.layer != b.layer {
                return Err(invalid(format!("layer {} vs {}", a.layer, b.layer)));
            }
            a.baseline_flops += b.baseline_flops;
            a.effective_flops += b.effective_flops;
            a.input_channels_active = a.c_in as f64 * a.effective_flops / a.baseline_flops as f64;
        }
        self.baseline_total += other.baseline_total;
        self.effective_total += other.effective_total;
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "gated", "c_in", "active_channels", "baseline_flops", "effective_flops", "reduction"])
            .map_err(csv_err)?;
        for l in &self.layers {
            let red = if l.effective_flops > 0.0 { l.baseline_flops as f64 / l.effective_flops } else { f64::INFINITY };
            w.write_record([
                l.layer.clone(),
                l.gated.to_string(),
                l.c_in.to_string(),
                format!("{:.4}", l.input_channels_active),
                l.baseline_flops.to_string(),
                format!("{:.1}", l.effective_flops),
                format!("{red:.4}"),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn flop_reduction(baseline: f64, effective: f64) -> Result<f64> {
    if !(effective > 0.0) {
        return Err(Error::InvalidState(format!("effective FLOPs {effective} must be positive")));
    }
    Ok(baseline / effective)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub per_model_bytes: Vec<usize>,
    pub fixed_rate_total: usize,
    pub variable_rate_bytes: usize,
    /// `1 - variable_rate_bytes / fixed_rate_total`.
    pub saving: f64,
}

/// Storage of a set of fixed-rate models against one variable-rate model,
/// counted from serialized parameter bytes.
pub fn storage_report(fixed_rate: &[&CodecState], variable_rate: &CodecState) -> Result<StorageReport> {
    if fixed_rate.is_empty() {
        return Err(invalid("storage_report needs at least one fixed-rate model"));
    }
    let per_model_bytes: Vec<usize> = fixed_rate.iter().map(|s| parameter_bytes(s)).collect();
    let fixed_rate_total: usize = per_model_bytes.iter().sum();
    let variable_rate_bytes = parameter_bytes(variable_rate);
    Ok(StorageReport {
        per_model_bytes,
        fixed_rate_total,
        variable_rate_bytes,
        saving: 1.0 - variable_rate_bytes as f64 / fixed_rate_total as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: String,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaSummary {
    pub lambda: f64,
    pub images: usize,
    pub mean_bpp: f64,
    pub mean_psnr: f64,
    pub mean_sparsity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RDReport {
    pub records: Vec<ImageRecord>,
    pub model_bytes: usize,
    pub flop_reduction: f64,
}

impl RDReport {
    /// Per-λ means, in increasing λ order.
    pub fn summary(&self) -> Vec<LambdaSummary> {
        let mut by: BTreeMap<u64, Vec<&ImageRecord>> = BTreeMap::new();
        for r in &self.records {
            by.entry(r.lambda.to_bits()).or_default().push(r);
        }
        let mut out: Vec<LambdaSummary> = by
            .into_values()
            .map(|rs| {
                let n = rs.len() as f64;
                LambdaSummary {
                    lambda: rs[0].lambda,
                    images: rs.len(),
                    mean_bpp: rs.iter().map(|r| r.bpp).sum::<f64>() / n,
                    mean_psnr: rs.iter().map(|r| r.psnr).sum::<f64>() / n,
                    mean_sparsity: rs.iter().map(|r| r.sparsity).sum::<f64>() / n,
                }
            })
            .collect();
        out.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        out
    }

    /// One JSON object per line; the first line carries the model-level
    /// fields, the rest one image record each.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let head = serde_json::json!({ "model_bytes": self.model_bytes, "flop_reduction": self.flop_reduction });
        writeln!(out, "{head}")?;
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r).map_err(json_err)?)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            model_bytes: usize,
            flop_reduction: f64,
        }
        let mut lines = input.lines();
        let head: Head = match lines.next() {
            Some(l) => serde_json::from_str(&l?).map_err(json_err)?,
            None => return Err(Error::Data("empty report".into())),
        };
        let mut records = Vec::new();
        for l in lines {
            let l = l?;
            if !l.trim().is_empty() {
                records.push(serde_json::from_str(&l).map_err(json_err)?);
            }
        }
        Ok(Self { records, model_bytes: head.model_bytes, flop_reduction: head.flop_reduction })
    }

    /// One row per (image, λ).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<ImageRecord>> {
        let mut rd = csv::Reader::from_reader(input);
        rd.deserialize().map(|r| r.map_err(csv_err)).collect()
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Data(format!("json: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_codec, LayerKind, SubNet};
    use candle_core::Device;

    #[test]
    fn psnr_examples() {
        let x = Tensor::new(&[0.2f32, 0.4, 0.6, 0.8], &Device::Cpu).unwrap();
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr_from_mse(0.001) - 30.0).abs() < 1e-12);
        let y = Tensor::new(&[0.2f32, 0.4, 0.6], &Device::Cpu).unwrap();
        assert!(psnr(&x, &y).is_err());
    }

    #[test]
    fn bpp_examples() {
        assert_eq!(bits_per_pixel(98304.0, 256, 256).unwrap(), 1.5);
        assert_eq!(bits_per_pixel(0.0, 256, 256).unwrap(), 0.0);
        assert!(bits_per_pixel(10.0, 0, 4).is_err());
    }

    #[test]
    fn conv_flop_examples() {
        assert_eq!(conv_flops(1, 1, 1, 1, 1), 2);
        // Count multiply-adds by walking every output position.
        let mut macs = 0u64;
        for _co in 0..32 {
            for _y in 0..16 {
                for _x in 0..16 {
                    for _ci in 0..32 {
                        macs += 5 * 5;
                    }
                }
            }
        }
        assert_eq!(conv_flops(32, 32, 5, 16, 16), 2 * macs);
        assert_eq!(conv_flops(32, 32, 5, 16, 16), 13_107_200);
        assert_eq!(conv_flops(64, 32, 5, 16, 16), 2 * conv_flops(32, 32, 5, 16, 16));
    }

    #[test]
    fn reduction_examples() {
        assert_eq!(flop_reduction(10.0, 10.0).unwrap(), 1.0);
        assert!((flop_reduction(9.0, 3.0).unwrap() - 3.0).abs() < 1e-15);
        assert!(matches!(flop_reduction(1.0, 0.0), Err(Error::InvalidState(_))));
        assert_eq!(format!("{:.2}x", flop_reduction(254.0, 100.0).unwrap()), "2.54x");
    }

    fn spec(gated: bool) -> LayerSpec {
        LayerSpec { subnet: SubNet::GA, index: 1, kind: LayerKind::Conv, c_in: 4, c_out: 2, kernel: 3, stride: 1, gated }
    }

    #[test]
    fn ledger_half_active() {
        let s = spec(true);
        let mask = vec![vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 1.0]];
        let l = effective_flops(&[LayerMask { spec: &s, input_dims: (8, 8), mask: Some(&mask) }]).unwrap();
        assert!((l.reduction().unwrap() - 2.0).abs() < 1e-12);
        assert!((l.flop_weighted_sparsity() - 0.5).abs() < 1e-12);
        let ones = vec![vec![1.0; 4]];
        let l = effective_flops(&[LayerMask { spec: &s, input_dims: (8, 8), mask: Some(&ones) }]).unwrap();
        assert_eq!(l.reduction().unwrap(), 1.0);
    }

    #[test]
    fn ledger_rejects_soft_masks() {
        let s = spec(true);
        let mask = vec![vec![1.0, 0.5, 1.0, 0.0]];
        let r = effective_flops(&[LayerMask { spec: &s, input_dims: (8, 8), mask: Some(&mask) }]);
        assert!(matches!(r, Err(Error::InvalidState(_))));
    }

    #[test]
    fn input_dims_follow_the_pipeline() {
        let cfg = CodecConfig::default();
        let d = layer_input_dims(&cfg, 64, 128);
        assert_eq!(d[0], (64, 128));
        assert_eq!(d[3], (8, 16));
        assert_eq!(d[4], (4, 8));
        assert_eq!(d[7], (1, 2));
        assert_eq!(d[9], (4, 8));
        assert_eq!(d[10], (4, 8));
        assert_eq!(d[13], (32, 64));
    }

    #[test]
    fn storage_counting() {
        let s = build_codec(&CodecConfig::default(), 0).unwrap();
        let eight = vec![&s; 8];
        let r = storage_report(&eight, &s).unwrap();
        assert!((r.saving - 0.875).abs() < 1e-12);
        let r = storage_report(&[&s], &s).unwrap();
        assert_eq!(r.saving, 0.0);
        assert!(storage_report(&[], &s).is_err());
    }

    #[test]
    fn report_round_trips() {
        let rep = RDReport {
            records: vec![
                ImageRecord { image: "a.png".into(), lambda: 0.01, bpp: 0.5, psnr: 28.25, sparsity: 0.3 },
                ImageRecord { image: "b.png".into(), lambda: 0.01, bpp: 0.7, psnr: 27.0, sparsity: 0.1 / 3.0 },
                ImageRecord { image: "a.png".into(), lambda: 0.1, bpp: 1.25, psnr: 33.5, sparsity: 0.0 },
            ],
            model_bytes: 1234,
            flop_reduction: 1.75,
        };
        let mut buf = Vec::new();
        rep.write_jsonl(&mut buf).unwrap();
        assert_eq!(RDReport::read_jsonl(buf.as_slice()).unwrap(), rep);
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        assert_eq!(RDReport::read_csv(buf.as_slice()).unwrap(), rep.records);
        let s = rep.summary();
        assert_eq!(s.len(), 2);
        assert!((s[0].mean_bpp - 0.6).abs() < 1e-12);
    }
}
