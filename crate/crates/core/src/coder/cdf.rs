use crate::error::invalid;
use crate::Result;

pub const DEFAULT_PRECISION: u32 = 16;

/// Integer cumulative frequency table over the symbols
/// `offset..offset + num_symbols()`, optionally followed by an escape slot
/// for values outside that range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdfTable {
    /// `cdf[0] = 0`, `cdf[last] = 1 << precision`, strictly increasing.
    pub cdf: Vec<u32>,
    pub offset: i64,
    pub precision: u32,
    pub escape: bool,
}

impl CdfTable {
    /// Number of regular (in-range) symbols.
    pub fn num_symbols(&self) -> usize {
        self.cdf.len() - 1 - usize::from(self.escape)
    }

    pub fn lo(&self) -> i64 {
        self.offset
    }

    pub fn hi(&self) -> i64 {
        self.offset + self.num_symbols() as i64 - 1
    }

    pub fn total(&self) -> u32 {
        1 << self.precision
    }

    /// Frequency of slot `i` (regular symbols first, escape last).
    pub fn freq(&self, i: usize) -> u32 {
        self.cdf[i + 1] - self.cdf[i]
    }

    pub fn escape_slot(&self) -> Option<usize> {
        self.escape.then(|| self.num_symbols())
    }

    /// Quantized probability of `symbol`, or of the escape slot when the
    /// symbol is out of range.
    pub fn quantized_probability(&self, symbol: i64) -> Option<f64> {
        let slot = if (self.lo()..=self.hi()).contains(&symbol) {
            (symbol - self.offset) as usize
        } else {
            self.escape_slot()?
        };
        Some(self.freq(slot) as f64 / self.total() as f64)
    }

    /// Slot whose interval contains `value`.
    pub fn slot_for(&self, value: u32) -> usize {
        // Largest i with cdf[i] <= value.
        self.cdf.partition_point(|&c| c <= value) - 1
    }
}

/// Table without an escape slot; probabilities are renormalized to the
/// full range.
pub fn build_cdf(probabilities: &[f64], precision: u32) -> Result<CdfTable> {
    quantize(probabilities, None, 0, precision)
}

/// Table over `offset..offset + probabilities.len()` whose escape slot takes
/// the remaining mass `1 - sum(probabilities)`.
pub fn build_cdf_with_escape(probabilities: &[f64], offset: i64, precision: u32) -> Result<CdfTable> {
    let sum: f64 = probabilities.iter().sum();
    quantize(probabilities, Some((1.0 - sum).max(0.0)), offset, precision)
}

fn quantize(probabilities: &[f64], escape: Option<f64>, offset: i64, precision: u32) -> Result<CdfTable> {
    if probabilities.is_empty() {
        return Err(invalid("cannot build a CDF over an empty symbol range"));
    }
    if !(1..=24).contains(&precision) {
        return Err(invalid(format!("precision {precision} outside 1..=24")));
    }
    let mut probs: Vec<f64> = probabilities.to_vec();
    if let Some(e) = escape {
        probs.push(e);
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(invalid("probabilities must be finite and non-negative"));
    }
    let total = 1u64 << precision;
    if probs.len() as u64 > total {
        return Err(invalid(format!("{} symbols do not fit in {precision}-bit precision", probs.len())));
    }
    let sum: f64 = probs.iter().sum();
    if sum > 1.0 + 1e-6 {
        return Err(invalid(format!("probabilities sum to {sum} > 1")));
    }
    let targets: Vec<f64> = if sum > 0.0 {
        probs.iter().map(|p| p / sum * total as f64).collect()
    } else {
        vec![total as f64 / probs.len() as f64; probs.len()]
    };
    let mut freqs: Vec<u64> = targets.iter().map(|t| (t.floor() as u64).max(1)).collect();
    let assigned: u64 = freqs.iter().sum();
    if assigned < total {
        // Largest remainders first; ties by position.
        let mut order: Vec<usize> = (0..freqs.len()).collect();
        order.sort_by(|&a, &b| {
            let ra = targets[a] - freqs[a] as f64;
            let rb = targets[b] - freqs[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let mut left = total - assigned;
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            freqs[i] += 1;
            left -= 1;
        }
    } else {
        // Floors pushed us over: shave the largest entries.
        let mut excess = assigned - total;
        while excess > 0 {
            let (i, _) = freqs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty");
            let take = (freqs[i] - 1).min(excess).min((freqs[i] / 2).max(1));
            freqs[i] -= take;
            excess -= take;
        }
    }
    let mut cdf = Vec::with_capacity(freqs.len() + 1);
    let mut acc = 0u64;
    cdf.push(0u32);
    for f in freqs {
        acc += f;
        cdf.push(acc as u32);
    }
    debug_assert_eq!(acc, total);
    Ok(CdfTable { cdf, offset, precision, escape: escape.is_some() })
}
