//! Smoothed histograms, entropy estimates and compression ratio.

use crate::error::{Error, Result};
use crate::mosaic::Channel;
use crate::quantizer::QuantizerCodebook;

pub const DEFAULT_ALPHA: u32 = 32;

/// Symbol counts with zero-frequency correction: every occupied bin is
/// weighted by `alpha`, then one occurrence is added to all bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmoothedHistogram {
    counts: Vec<u64>,
    total: u64,
    alpha: u32,
}

impl SmoothedHistogram {
    pub fn new(symbols: usize, alpha: u32) -> Result<Self> {
        if alpha == 0 {
            return Err(Error::Invalid("alpha must be a positive integer".into()));
        }
        if symbols == 0 {
            return Err(Error::Invalid("histogram needs at least one symbol".into()));
        }
        Ok(SmoothedHistogram { counts: vec![0; symbols], total: 0, alpha })
    }

    pub fn from_counts(counts: Vec<u64>, alpha: u32) -> Result<Self> {
        let mut h = Self::new(counts.len(), alpha)?;
        h.total = counts.iter().sum();
        h.counts = counts;
        Ok(h)
    }

    #[inline]
    pub fn add(&mut self, symbol: usize) {
        self.counts[symbol] += 1;
        self.total += 1;
    }

    pub fn symbols(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn alpha(&self) -> u32 {
        self.alpha
    }

    /// Exact probabilities as integer numerators over a common denominator
    /// `alpha * N_tot + N_sym`.
    pub fn rational_probs(&self) -> (Vec<u128>, u128) {
        let a = u128::from(self.alpha);
        let num = self.counts.iter().map(|&n| a * u128::from(n) + 1).collect();
        (num, a * u128::from(self.total) + self.counts.len() as u128)
    }

    pub fn smoothed_probs(&self) -> Vec<f64> {
        let (num, den) = self.rational_probs();
        let den = den as f64;
        num.into_iter().map(|n| n as f64 / den).collect()
    }

    /// `-sum P_i log2 P_i` over the smoothed probabilities.
    pub fn entropy_bits(&self) -> f64 {
        let (num, den) = self.rational_probs();
        let den = den as f64;
        let h: f64 = num
            .into_iter()
            .map(|n| {
                let p = n as f64 / den;
                -p * p.log2()
            })
            .sum();
        h.clamp(0.0, (self.counts.len() as f64).log2())
    }
}

/// Conditional entropy of residuals given the quantized context class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalEntropy {
    /// Bits per sample for R, G1, G2, B.
    pub per_channel: [f64; 4],
    /// Equal-weight mean of the four channels.
    pub combined: f64,
    /// Sample count per (channel, class).
    pub class_counts: [Vec<u64>; 4],
}

/// Per-channel `sum_k P(class k) * H(residual | class k)` and their mean.
///
/// `residuals[c]` and `features[c]` hold the residual symbols and variance
/// features of channel `c` in the same order.
pub fn conditional_entropy(
    residuals: &[Vec<u32>; 4],
    features: &[Vec<f64>; 4],
    codebook: &QuantizerCodebook,
    symbols: usize,
    alpha: u32,
) -> Result<ConditionalEntropy> {
    let k = codebook.regions();
    let mut per_channel = [0.0; 4];
    let mut class_counts: [Vec<u64>; 4] = Default::default();
    for ch in Channel::ALL {
        let (res, feat) = (&residuals[ch.index()], &features[ch.index()]);
        if res.is_empty() {
            return Err(Error::Invalid(format!("channel {} has no samples", ch.name())));
        }
        if res.len() != feat.len() {
            return Err(Error::Dimension(format!(
                "channel {}: {} residuals but {} features",
                ch.name(),
                res.len(),
                feat.len()
            )));
        }
        let mut hists = vec![SmoothedHistogram::new(symbols, alpha)?; k];
        for (&s, &f) in res.iter().zip(feat) {
            let s = s as usize;
            if s >= symbols {
                return Err(Error::Range(format!("residual symbol {s} >= alphabet {symbols}")));
            }
            hists[codebook.classify(ch, f)].add(s);
        }
        let n = res.len() as f64;
        per_channel[ch.index()] =
            hists.iter().filter(|h| h.total() > 0).map(|h| h.total() as f64 / n * h.entropy_bits()).sum();
        class_counts[ch.index()] = hists.iter().map(|h| h.total()).collect();
    }
    let combined = per_channel.iter().sum::<f64>() / 4.0;
    Ok(ConditionalEntropy { per_channel, combined, class_counts })
}

/// `bit_depth / H`; infinite when `H` is zero.
pub fn compression_ratio(bit_depth: u8, bits_per_sample: f64) -> f64 {
    if bits_per_sample <= 0.0 {
        f64::INFINITY
    } else {
        f64::from(bit_depth) / bits_per_sample
    }
}
