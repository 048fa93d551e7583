//! Checkpoint container.
//!
//! Layout (little-endian):
//! `"GCKP"`, `u32` version, `u32` length + JSON header (config and meta),
//! then the parameter section: `u32` count followed by, per tensor,
//! `u16` name length, name, `u8` dtype (0 = f32, 1 = f64), `u8` rank,
//! `u32` dims, raw values. The model checksum is the first 8 bytes of the
//! SHA-256 of the parameter section.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_codec, CodecConfig, CodecState, ModelMeta};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: CodecConfig,
    meta: ModelMeta,
}

fn dtype_tag(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::UnsupportedFormat(format!("cannot serialize dtype {other:?}"))),
    }
}

/// Serialized parameter section; the checksum and storage figures are taken
/// over exactly these bytes.
pub fn parameter_section(state: &CodecState) -> Result<Vec<u8>> {
    let vars = state.named_vars();
    let mut out = Vec::new();
    out.extend_from_slice(&(vars.len() as u32).to_le_bytes());
    for (name, var, _) in &vars {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_tag(var.dtype())?);
        out.push(var.rank() as u8);
        for &d in var.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let flat = var.flatten_all()?;
        match var.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    Ok(out)
}

/// Bytes of raw parameter values (no names or shapes).
pub fn parameter_bytes(state: &CodecState) -> usize {
    state.named_vars().iter().map(|(_, v, _)| v.elem_count() * v.dtype().size_in_bytes()).sum()
}

pub fn checksum(state: &CodecState) -> Result<u64> {
    Ok(checksum_of(&parameter_section(state)?))
}

fn checksum_of(section: &[u8]) -> u64 {
    let digest = Sha256::digest(section);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn to_bytes(state: &CodecState) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header { config: state.config.clone(), meta: state.meta.clone() })
        .map_err(|e| Error::InvalidState(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&parameter_section(state)?);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::UnsupportedFormat("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<CodecState> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::UnsupportedFormat("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::UnsupportedFormat(format!("checkpoint version {version} (supported: {VERSION})")));
    }
    let hlen = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::UnsupportedFormat(format!("bad checkpoint header: {e}")))?;
    let mut state = build_codec(&header.config, 0)?;
    state.meta = header.meta;
    let vars = state.named_vars();
    let count = r.u32()? as usize;
    if count != vars.len() {
        return Err(Error::UnsupportedFormat(format!(
            "checkpoint holds {count} tensors, configuration expects {}",
            vars.len()
        )));
    }
    for (name, var, _) in &vars {
        let nlen = r.u16()? as usize;
        let got = std::str::from_utf8(r.take(nlen)?).map_err(|_| Error::UnsupportedFormat("bad tensor name".into()))?;
        if got != name {
            return Err(Error::UnsupportedFormat(format!("expected tensor {name}, found {got}")));
        }
        let tag = r.u8()?;
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
        if dims != var.dims() {
            return Err(Error::UnsupportedFormat(format!("shape mismatch for {name}: {dims:?} vs {:?}", var.dims())));
        }
        let n: usize = dims.iter().product();
        let t = match tag {
            0 => {
                let raw = r.take(4 * n)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            1 => {
                let raw = r.take(8 * n)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            t => return Err(Error::UnsupportedFormat(format!("unknown dtype tag {t}"))),
        };
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::UnsupportedFormat("trailing bytes after checkpoint".into()));
    }
    Ok(state)
}

pub fn save(state: &CodecState, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<CodecState> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = CodecConfig::default();
        cfg.modulator.enabled = true;
        let mut state = build_codec(&cfg, 17).unwrap();
        state.meta.record_lambdas(&[0.5, 2.0]);
        let bytes = to_bytes(&state).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert_eq!(checksum(&back).unwrap(), checksum(&state).unwrap());
        assert_eq!(back.meta, state.meta);
    }

    #[test]
    fn f64_round_trip() {
        let cfg = CodecConfig { precision: crate::codec::Precision::F64, ..CodecConfig::default() };
        let state = build_codec(&cfg, 2).unwrap();
        let bytes = to_bytes(&state).unwrap();
        assert_eq!(to_bytes(&from_bytes(&bytes).unwrap()).unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let state = build_codec(&CodecConfig::default(), 1).unwrap();
        let mut bytes = to_bytes(&state).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn checksum_tracks_parameters() {
        let a = build_codec(&CodecConfig::default(), 1).unwrap();
        let b = build_codec(&CodecConfig::default(), 2).unwrap();
        assert_ne!(checksum(&a).unwrap(), checksum(&b).unwrap());
    }
}
