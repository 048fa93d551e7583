//! Container layout (little-endian):
//!
//! ```text
//! "GCV1" | u16 version | u64 model checksum | f64 lambda
//! u32 image h, w | u32 latent h, w | u32 hyper h, w
//! u32 len | hyper payload | u32 len | main payload
//! ```

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GCV1";
pub const VERSION: u16 = 1;
const HEADER_BYTES: usize = 4 + 2 + 8 + 8 + 6 * 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub version: u16,
    pub model_checksum: u64,
    pub lambda: f64,
    /// Original image size before padding.
    pub image_dims: (u32, u32),
    pub latent_dims: (u32, u32),
    pub hyper_dims: (u32, u32),
    pub payload_hyper: Vec<u8>,
    pub payload_main: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + 8 + self.payload_hyper.len() + self.payload_main.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.model_checksum.to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        for (a, b) in [self.image_dims, self.latent_dims, self.hyper_dims] {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
        for payload in [&self.payload_hyper, &self.payload_main] {
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
            out.extend_from_slice(payload);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::UnsupportedFormat("not a GCV1 bitstream".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("bitstream version {version}")));
        }
        let model_checksum = u64::from_le_bytes(r.array()?);
        let lambda = f64::from_le_bytes(r.array()?);
        let mut dims = [(0u32, 0u32); 3];
        for d in &mut dims {
            *d = (r.u32()?, r.u32()?);
        }
        let n = r.u32()? as usize;
        let payload_hyper = r.take(n)?.to_vec();
        let n = r.u32()? as usize;
        let payload_main = r.take(n)?.to_vec();
        if r.pos != buf.len() {
            return Err(Error::UnsupportedFormat(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self {
            version,
            model_checksum,
            lambda,
            image_dims: dims[0],
            latent_dims: dims[1],
            hyper_dims: dims[2],
            payload_hyper,
            payload_main,
        })
    }

    /// Size of the serialized container in bits.
    pub fn size_bits(&self) -> u64 {
        8 * (HEADER_BYTES + 8 + self.payload_hyper.len() + self.payload_main.len()) as u64
    }

    /// Bits spent on the two entropy-coded payloads only.
    pub fn payload_bits(&self) -> u64 {
        8 * (self.payload_hyper.len() + self.payload_main.len()) as u64
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::UnsupportedFormat("bitstream truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
}
