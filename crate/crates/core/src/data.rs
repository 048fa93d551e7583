//! Image I/O, padding, toy image synthesis and patch ingestion.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{imageops::FilterType, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::init;
use crate::{Error, Result};

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Quantize a `(3, H, W)` or `(1, 3, H, W)` tensor on [0, 1] to 8 bits,
/// rounding half away from zero.
pub fn tensor_to_rgb(x: &Tensor) -> Result<RgbImage> {
    let x = if x.rank() == 4 { x.squeeze(0)? } else { x.clone() };
    let (c, h, w) = x.dims3()?;
    if c != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 channels, got {c}")));
    }
    let v = x.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in img.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = (v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(img)
}

/// Load a PNG or PPM as `(3, H, W)` on [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    rgb_to_tensor(&img)
}

pub fn save_image(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    tensor_to_rgb(x)?.save(path).map_err(|e| image_err(path, e))
}

/// Sorted PNG/PPM files directly inside `dir`.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pnm"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pad the last two dims of `(B, C, H, W)` up to multiples of
/// `multiple`. Returns the padded tensor and the original `(H, W)`.
pub fn reflect_pad(x: &Tensor, multiple: usize) -> Result<(Tensor, (usize, usize))> {
    let (_, _, h, w) = x.dims4()?;
    let (ph, pw) = (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple);
    let index = |n: usize, m: usize| -> Result<Tensor> {
        let idx: Vec<u32> = (0..m).map(|i| mirror(i, n) as u32).collect();
        Ok(Tensor::new(idx.as_slice(), x.device())?)
    };
    let mut out = x.clone();
    if ph != h {
        out = out.index_select(&index(h, ph)?, 2)?;
    }
    if pw != w {
        out = out.index_select(&index(w, pw)?, 3)?;
    }
    Ok((out, (h, w)))
}

/// Deterministic toy image `(3, h, w)`: smooth colour gradients with a
/// few overlaid discs and rectangles plus mild texture.
pub fn synthetic_image(seed: u64, index: u64, h: usize, w: usize) -> Result<Tensor> {
    let mut rng = init::stream(seed, 0x5359_4e00 + index);
    let base: [[f32; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.1..0.9)));
    let freq: [f32; 2] = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
    let phase: f32 = rng.gen_range(0.0..6.28);
    let mut data = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w as f32, y as f32 / h as f32);
            let wave = 0.5 + 0.5 * (freq[0] * 6.28 * u + freq[1] * 3.14 * v + phase).sin();
            for c in 0..3 {
                data[c * h * w + y * w + x] = base[0][c] * (1.0 - u) + base[1][c] * u * (1.0 - v) + base[2][c] * wave * v;
            }
        }
    }
    let shapes = rng.gen_range(2..6);
    for _ in 0..shapes {
        let colour: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let (cx, cy) = (rng.gen_range(0.0..w as f32), rng.gen_range(0.0..h as f32));
        let r = rng.gen_range(0.08..0.3) * h.min(w) as f32;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                let inside = if disc { dx * dx + dy * dy < r * r } else { dx.abs() < r && dy.abs() < 0.6 * r };
                if inside {
                    for c in 0..3 {
                        data[c * h * w + y * w + x] = colour[c];
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

pub fn synthetic_set(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<Tensor>> {
    (0..count as u64).map(|i| synthetic_image(seed, i, h, w)).collect()
}

/// Provenance of one extracted patch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub patch: String,
    pub source: String,
    pub scale: u32,
    pub x: u32,
    pub y: u32,
}

pub const MANIFEST_NAME: &str = "manifest.csv";

/// Tile every decodable image of `src` (and its bicubic downsamplings by
/// each factor in `scales`) into non-overlapping `patch × patch` PNGs under
/// `out`, and write `out/manifest.csv`. Undecodable files are skipped.
pub fn ingest_dataset(src: &Path, out: &Path, patch: u32, scales: &[u32]) -> Result<Vec<PatchEntry>> {
    if patch == 0 || scales.is_empty() || scales.contains(&0) {
        return Err(Error::InvalidArgument("patch size and scales must be positive".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for path in list_images(src)? {
        let img = match image::open(&path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("img").to_string();
        let source = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        for &s in scales {
            let (w, h) = (img.width() / s, img.height() / s);
            if w < patch || h < patch {
                continue;
            }
            let scaled = if s == 1 { img.clone() } else { image::imageops::resize(&img, w, h, FilterType::CatmullRom) };
            for ty in 0..h / patch {
                for tx in 0..w / patch {
                    let (x, y) = (tx * patch, ty * patch);
                    let tile = image::imageops::crop_imm(&scaled, x, y, patch, patch).to_image();
                    let name = format!("{stem}_s{s}_{y}_{x}.png");
                    let dest = out.join(&name);
                    tile.save(&dest).map_err(|e| image_err(&dest, e))?;
                    entries.push(PatchEntry { patch: name, source: source.clone(), scale: s, x, y });
                }
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("no patches extracted from {}", src.display())));
    }
    let mut w = csv::Writer::from_path(out.join(MANIFEST_NAME)).map_err(|e| Error::Data(e.to_string()))?;
    for e in &entries {
        w.serialize(e).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(entries)
}
