//! Byte-oriented range coder with carry propagation (LZMA layout):
//! 32-bit range, 33-bit low, renormalization whenever the range drops
//! below 2^24. All arithmetic is integer, so streams are identical across
//! platforms.

use super::cdf::CdfTable;
use crate::{Error, Result};

const TOP: u32 = 1 << 24;
const ESCAPE_CHUNK: u32 = 16;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    /// Encode the interval `[start, start + freq)` out of `2^precision`.
    pub fn encode(&mut self, start: u32, freq: u32, precision: u32) {
        debug_assert!(freq > 0 && (start as u64 + freq as u64) <= 1u64 << precision);
        let r = self.range >> precision;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Raw bits with a uniform model, `bits <= 16`.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits >= 1 && bits <= ESCAPE_CHUNK && value < (1 << bits));
        self.encode(value, 1, bits);
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Encode one value under `table`, escaping out-of-range values when the
    /// table has an escape slot.
    pub fn encode_symbol(&mut self, symbol: i64, table: &CdfTable) -> Result<()> {
        let p = table.precision;
        if (table.lo()..=table.hi()).contains(&symbol) {
            let i = (symbol - table.offset) as usize;
            self.encode(table.cdf[i], table.freq(i), p);
            return Ok(());
        }
        let Some(slot) = table.escape_slot() else {
            return Err(Error::EncodeRange { symbol, lo: table.lo(), hi: table.hi() });
        };
        self.encode(table.cdf[slot], table.freq(slot), p);
        let (side, gap) = if symbol > table.hi() {
            (1, symbol.wrapping_sub(table.hi()).wrapping_sub(1) as u64)
        } else {
            (0, table.lo().wrapping_sub(symbol).wrapping_sub(1) as u64)
        };
        if gap >= (1 << 62) {
            return Err(Error::EncodeRange { symbol, lo: table.lo(), hi: table.hi() });
        }
        self.encode_bits(side, 1);
        self.encode_elias_gamma(gap + 1);
        Ok(())
    }

    fn encode_elias_gamma(&mut self, v: u64) {
        let nbits = 64 - v.leading_zeros();
        self.encode_bits(nbits - 1, 6);
        let mut rest = nbits - 1;
        while rest > 0 {
            let chunk = rest.min(ESCAPE_CHUNK);
            rest -= chunk;
            self.encode_bits(((v >> rest) & ((1 << chunk) - 1)) as u32, chunk);
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self { data, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..5 {
            let b = d.next_byte()?;
            d.code = (d.code << 8) | b as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Decode(format!("stream truncated after {} bytes", self.data.len())))?;
        self.pos += 1;
        Ok(b)
    }

    /// Returns `(target, r)` where `target` lies in the encoded interval.
    fn peek(&self, precision: u32) -> (u32, u32) {
        let r = (self.range >> precision).max(1);
        let v = (self.code / r).min((1 << precision) - 1);
        (v, r)
    }

    fn consume(&mut self, r: u32, start: u32, freq: u32) -> Result<()> {
        self.code = self.code.wrapping_sub(r.wrapping_mul(start));
        self.range = r.wrapping_mul(freq);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let (v, r) = self.peek(bits);
        self.consume(r, v, 1)?;
        Ok(v)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i64> {
        let (v, r) = self.peek(table.precision);
        let slot = table.slot_for(v);
        self.consume(r, table.cdf[slot], table.freq(slot))?;
        if Some(slot) != table.escape_slot() {
            return Ok(table.offset + slot as i64);
        }
        let side = self.decode_bits(1)?;
        let nbits = self.decode_bits(6)? + 1;
        if nbits > 63 {
            return Err(Error::Decode(format!("escape length {nbits} out of range")));
        }
        let mut v: u64 = 1;
        let mut rest = nbits - 1;
        while rest > 0 {
            let chunk = rest.min(ESCAPE_CHUNK);
            rest -= chunk;
            v = (v << chunk) | self.decode_bits(chunk)? as u64;
        }
        let gap = (v - 1) as i64;
        Ok(if side == 1 { table.hi().wrapping_add(1).wrapping_add(gap) } else { table.lo().wrapping_sub(1).wrapping_sub(gap) })
    }
}

/// Encode `symbols[i]` under `tables[i]`.
pub fn range_encode(symbols: &[i64], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::InvalidArgument(format!(
            "{} symbols but {} tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode_symbol(s, t)?;
    }
    Ok(enc.finish())
}

/// Decode `count` symbols, the i-th under `tables[i]`.
pub fn range_decode(data: &[u8], tables: &[&CdfTable], count: usize) -> Result<Vec<i64>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    if tables.len() < count {
        return Err(Error::InvalidArgument(format!("{count} symbols requested but only {} tables", tables.len())));
    }
    let mut dec = RangeDecoder::new(data)?;
    tables[..count].iter().map(|t| dec.decode_symbol(t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coder::cdf::{build_cdf, build_cdf_with_escape};

    #[test]
    fn empty_sequence_is_small() {
        let out = range_encode(&[], &[]).unwrap();
        assert!(out.len() <= 8);
        assert!(range_decode(&out, &[], 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_four_costs_two_bits() {
        let t = build_cdf(&[0.25; 4], 16).unwrap();
        let symbols: Vec<i64> = (0..10_000).map(|i| (i * 7 + i / 3) % 4).collect();
        let tables = vec![&t; symbols.len()];
        let out = range_encode(&symbols, &tables).unwrap();
        assert!((out.len() as i64 - 2500).abs() <= 40, "{} bytes", out.len());
        assert_eq!(range_decode(&out, &tables, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn out_of_range_without_escape_errors() {
        let t = build_cdf(&[0.5, 0.5], 16).unwrap();
        assert!(matches!(range_encode(&[2], &[&t]), Err(Error::EncodeRange { symbol: 2, .. })));
        assert!(matches!(range_encode(&[-1], &[&t]), Err(Error::EncodeRange { .. })));
    }

    #[test]
    fn escape_round_trip() {
        let t = build_cdf_with_escape(&[0.2, 0.5, 0.2], -1, 16).unwrap();
        let symbols = vec![0, 1, -1, 2, -2, 1_000_000, -77_777, 0, i32::MAX as i64, i32::MIN as i64];
        let tables = vec![&t; symbols.len()];
        let out = range_encode(&symbols, &tables).unwrap();
        assert_eq!(range_decode(&out, &tables, symbols.len()).unwrap(), symbols);
    }

    #[test]
    fn truncated_stream_errors() {
        let t = build_cdf(&[0.1, 0.2, 0.3, 0.4], 16).unwrap();
        let symbols: Vec<i64> = (0..2000).map(|i| i % 4).collect();
        let tables = vec![&t; symbols.len()];
        let out = range_encode(&symbols, &tables).unwrap();
        let cut = &out[..out.len() / 2];
        assert!(matches!(range_decode(cut, &tables, symbols.len()), Err(Error::Decode(_))));
        assert!(matches!(range_decode(&[], &tables, 1), Err(Error::Decode(_))));
    }

    #[test]
    fn mismatched_table_never_panics() {
        let a = build_cdf(&[0.1, 0.2, 0.3, 0.4], 16).unwrap();
        let b = build_cdf_with_escape(&[0.97, 0.01], 3, 12).unwrap();
        let symbols: Vec<i64> = (0..500).map(|i| (i * 13) % 4).collect();
        let out = range_encode(&symbols, &vec![&a; 500]).unwrap();
        let _ = range_decode(&out, &vec![&b; 500], 500);
    }
}
