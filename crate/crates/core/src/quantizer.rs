//! Lloyd scalar quantizer on variance features, and the per-channel codebook
//! that maps a feature to its coding class.
//!
//! Codebook file layout (little-endian):
//!
//! ```text
//! "MIPQ" | K u8 | for R, G1, G2, B: (K-1) thresholds f32, K representatives f32
//! ```

use crate::context::variance_map;
use crate::error::{Error, Result};
use crate::mosaic::{bayer_split, Channel, MosaicImage};
use crate::par::{self, ExecMode};

pub const MAGIC: &[u8; 4] = b"MIPQ";
pub const DEFAULT_REGIONS: usize = 16;
pub const MAX_ITERATIONS: usize = 500;
pub const RELATIVE_TOLERANCE: f64 = 1e-9;

/// Result of a Lloyd design run.
#[derive(Debug, Clone, PartialEq)]
pub struct LloydDesign {
    /// `K - 1` decision thresholds, strictly increasing.
    pub thresholds: Vec<f64>,
    /// `K` reconstruction values, strictly increasing.
    pub representatives: Vec<f64>,
    /// Mean-squared reconstruction error of the final assignment.
    pub distortion: f64,
    /// Mean-squared error after the assignment step of every iteration.
    pub history: Vec<f64>,
}

impl LloydDesign {
    pub fn classify(&self, v: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= v)
    }
}

/// Distinct sorted values with multiplicities and running sums.
struct Support {
    values: Vec<f64>,
    weights: Vec<u64>,
    total: u64,
}

impl Support {
    fn new(samples: &[f64]) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite quantizer sample {bad}")));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable_by(f64::total_cmp);
        let mut values: Vec<f64> = Vec::new();
        let mut weights: Vec<u64> = Vec::new();
        for v in sorted {
            match values.last() {
                Some(&last) if last == v => *weights.last_mut().unwrap() += 1,
                _ => {
                    values.push(v);
                    weights.push(1);
                }
            }
        }
        let total = samples.len() as u64;
        Ok(Support { values, weights, total })
    }

    /// Region boundaries (indices into `values`) induced by `thresholds`.
    fn partition(&self, thresholds: &[f64]) -> Vec<usize> {
        let mut b = Vec::with_capacity(thresholds.len() + 2);
        b.push(0);
        b.extend(thresholds.iter().map(|&t| self.values.partition_point(|&v| v < t)));
        b.push(self.values.len());
        b
    }

    fn centroid(&self, lo: usize, hi: usize) -> f64 {
        let mut s = 0.0;
        let mut n = 0u64;
        for i in lo..hi {
            s += self.values[i] * self.weights[i] as f64;
            n += self.weights[i];
        }
        s / n as f64
    }

    fn sq_error(&self, lo: usize, hi: usize, r: f64) -> f64 {
        (lo..hi).map(|i| (self.values[i] - r).powi(2) * self.weights[i] as f64).sum()
    }
}

fn midpoints(reps: &[f64]) -> Vec<f64> {
    reps.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

fn lloyd_from(sup: &Support, k: usize, mut reps: Vec<f64>) -> LloydDesign {
    reps.dedup();
    let mut history = Vec::new();
    loop {
        let thresholds = midpoints(&reps);
        let bounds = sup.partition(&thresholds);
        let sse: f64 = bounds.windows(2).zip(&reps).map(|(b, &r)| sup.sq_error(b[0], b[1], r)).sum();
        let mse = sse / sup.total as f64;
        let converged = match history.last() {
            Some(&prev) => reps.len() == k && prev - mse <= RELATIVE_TOLERANCE * prev,
            None => false,
        };
        history.push(mse);
        if (reps.len() == k && (converged || mse == 0.0)) || history.len() >= MAX_ITERATIONS {
            return LloydDesign { thresholds, representatives: reps, distortion: mse, history };
        }

        // centroid step over the non-empty regions
        let mut regions: Vec<(usize, usize)> =
            bounds.windows(2).filter(|b| b[1] > b[0]).map(|b| (b[0], b[1])).collect();
        // repair: split the worst region holding at least two distinct values
        while regions.len() < k {
            let worst = regions
                .iter()
                .enumerate()
                .filter(|(_, &(lo, hi))| hi - lo >= 2)
                .map(|(i, &(lo, hi))| (i, sup.sq_error(lo, hi, sup.centroid(lo, hi))))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .expect("at least k distinct values");
            let (lo, hi) = regions[worst];
            let c = sup.centroid(lo, hi);
            let mid = lo + sup.values[lo..hi].partition_point(|&v| v < c).max(1);
            regions.splice(worst..=worst, [(lo, mid), (mid, hi)]);
        }
        reps = regions.iter().map(|&(lo, hi)| sup.centroid(lo, hi)).collect();
    }
}

/// Design a `k`-level quantizer for `samples` with the Lloyd algorithm.
///
/// Two runs are made, one seeded from the `k`-quantiles of the data and one
/// from a uniform `k`-bin quantizer over its range; the lower-distortion
/// result is returned (quantile seed wins ties).
pub fn design_lloyd(samples: &[f64], k: usize) -> Result<LloydDesign> {
    if k < 2 {
        return Err(Error::Invalid(format!("quantizer needs at least 2 regions, got {k}")));
    }
    let sup = Support::new(samples)?;
    if sup.values.len() < k {
        return Err(Error::Degenerate(format!("{} distinct sample values, need at least {k}", sup.values.len())));
    }
    let quantile = quantile_seed(&sup, k);
    let (lo, hi) = (sup.values[0], *sup.values.last().unwrap());
    let uniform = (0..k).map(|i| lo + (i as f64 + 0.5) * (hi - lo) / k as f64).collect();
    let a = lloyd_from(&sup, k, quantile);
    let b = lloyd_from(&sup, k, uniform);
    Ok(if b.distortion < a.distortion { b } else { a })
}

/// Smallest value whose cumulative count exceeds `(i + 1/2) / k` of the mass.
fn quantile_seed(sup: &Support, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    let mut cum = 0u128;
    let mut j = 0;
    for i in 0..k as u128 {
        // cum / total > (2i + 1) / 2k, in integers
        let need = (2 * i + 1) * sup.total as u128;
        while 2 * k as u128 * cum <= need {
            cum += sup.weights[j] as u128;
            j += 1;
        }
        out.push(sup.values[j - 1]);
    }
    out
}

/// Thresholds and representatives for one channel, stored in single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQuantizer {
    pub thresholds: Vec<f32>,
    pub representatives: Vec<f32>,
}

impl ChannelQuantizer {
    #[inline]
    pub fn classify(&self, v: f64) -> usize {
        self.thresholds.partition_point(|&t| f64::from(t) <= v)
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.thresholds.len() + 1 != k || self.representatives.len() != k {
            return Err(Error::Format(format!("channel quantizer does not have {k} regions")));
        }
        let finite = self.thresholds.iter().chain(&self.representatives).all(|v| v.is_finite());
        let increasing = |v: &[f32]| v.windows(2).all(|w| w[0] < w[1]);
        if !finite || !increasing(&self.thresholds) || !increasing(&self.representatives) {
            return Err(Error::Format("quantizer values must be finite and strictly increasing".into()));
        }
        if self.thresholds.first().is_some_and(|&t| t < 0.0) {
            return Err(Error::Format("negative quantizer threshold".into()));
        }
        for (i, &r) in self.representatives.iter().enumerate() {
            if self.classify(f64::from(r)) != i {
                return Err(Error::Format(format!("representative {i} lies outside its region")));
            }
        }
        Ok(())
    }
}

/// Per-channel variance quantizers defining the coder's context classes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerCodebook {
    regions: usize,
    channels: [ChannelQuantizer; 4],
}

impl QuantizerCodebook {
    pub fn new(regions: usize, channels: [ChannelQuantizer; 4]) -> Result<Self> {
        if !(1..=255).contains(&regions) {
            return Err(Error::Invalid(format!("region count {regions} outside [1, 255]")));
        }
        for ch in &channels {
            ch.validate(regions)?;
        }
        Ok(QuantizerCodebook { regions, channels })
    }

    /// One class per channel: coding without context conditioning.
    pub fn single_class() -> Self {
        let ch = ChannelQuantizer { thresholds: vec![], representatives: vec![0.0] };
        QuantizerCodebook { regions: 1, channels: std::array::from_fn(|_| ch.clone()) }
    }

    /// Data-independent codebook with geometrically spaced thresholds from 1
    /// to a quarter of the squared sample range. Used when there is nothing
    /// to train on.
    pub fn geometric(bit_depth: u8, regions: usize) -> Result<Self> {
        if regions < 2 {
            return Ok(Self::single_class());
        }
        let top = f64::from(2 * u32::from(bit_depth) - 2);
        let thresholds: Vec<f64> = if regions == 2 {
            vec![1.0]
        } else {
            (0..regions - 1).map(|i| (top * i as f64 / (regions - 2) as f64).exp2()).collect()
        };
        let mut reps = vec![0.5 * thresholds[0]];
        reps.extend(midpoints(&thresholds));
        reps.push(2.0 * thresholds[regions - 2]);
        let ch = ChannelQuantizer {
            thresholds: thresholds.iter().map(|&t| t as f32).collect(),
            representatives: reps.iter().map(|&r| r as f32).collect(),
        };
        Self::new(regions, std::array::from_fn(|_| ch.clone()))
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn channel(&self, ch: Channel) -> &ChannelQuantizer {
        &self.channels[ch.index()]
    }

    /// Class index in `[0, K)`: the number of thresholds `<= v`.
    #[inline]
    pub fn classify(&self, ch: Channel, v: f64) -> usize {
        self.channels[ch.index()].classify(v)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * 4 * (2 * self.regions - 1));
        out.extend_from_slice(MAGIC);
        out.push(self.regions as u8);
        for ch in &self.channels {
            for v in ch.thresholds.iter().chain(&ch.representatives) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parse a codebook from the start of `bytes`; returns it and the number
    /// of bytes consumed.
    pub fn read_from(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing MIPQ codebook magic".into()));
        }
        let k = bytes[4] as usize;
        if k == 0 {
            return Err(Error::Format("codebook with zero regions".into()));
        }
        let per_channel = 2 * k - 1;
        let len = 5 + 4 * 4 * per_channel;
        if bytes.len() < len {
            return Err(Error::Format("codebook truncated".into()));
        }
        let floats: Vec<f32> =
            bytes[5..len].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let channels = std::array::from_fn(|c| {
            let f = &floats[c * per_channel..(c + 1) * per_channel];
            ChannelQuantizer { thresholds: f[..k - 1].to_vec(), representatives: f[k - 1..].to_vec() }
        });
        Ok((Self::new(k, channels)?, len))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (cb, used) = Self::read_from(bytes)?;
        if used != bytes.len() {
            return Err(Error::Format("trailing bytes after codebook".into()));
        }
        Ok(cb)
    }
}

/// Convert a design to single precision. Each threshold is snapped so it
/// still separates the same pair of neighbouring training values, which
/// keeps the class of every training sample unchanged.
fn to_channel_quantizer(design: &LloydDesign, samples: &[f64]) -> Result<ChannelQuantizer> {
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let mut thresholds = Vec::with_capacity(design.thresholds.len());
    for &t in &design.thresholds {
        let i = sorted.partition_point(|&v| v < t);
        let hi = sorted.get(i).copied().unwrap_or(f64::INFINITY);
        let lo = if i > 0 { sorted[i - 1] } else { f64::NEG_INFINITY };
        let mut s = t as f32;
        while f64::from(s) <= lo {
            s = s.next_up();
        }
        while f64::from(s) > hi {
            s = s.next_down();
        }
        if let Some(&prev) = thresholds.last() {
            if s <= prev {
                s = f32::next_up(prev);
            }
        }
        thresholds.push(s);
    }
    let mut representatives: Vec<f32> = Vec::with_capacity(design.representatives.len());
    for &r in &design.representatives {
        let mut s = r as f32;
        if let Some(&prev) = representatives.last() {
            if s <= prev {
                s = f32::next_up(prev);
            }
        }
        representatives.push(s);
    }
    Ok(ChannelQuantizer { thresholds, representatives })
}

/// Per-channel variance features of every image, concatenated.
pub fn collect_features(images: &[MosaicImage], mode: ExecMode) -> [Vec<f64>; 4] {
    let per_image = par::map_slice(mode, images, |img| {
        let subs = bayer_split(img);
        subs.planes.map(|p| variance_map(&p))
    });
    std::array::from_fn(|c| per_image.iter().flat_map(|maps| maps[c].iter().copied()).collect())
}

/// Design a `k`-region codebook from the variance features of `images`.
pub fn design_codebook(images: &[MosaicImage], k: usize, mode: ExecMode) -> Result<QuantizerCodebook> {
    if images.is_empty() {
        return Err(Error::Invalid("no training images".into()));
    }
    let features = collect_features(images, mode);
    let designs = par::map_slice(mode, &features, |f| design_lloyd(f, k).and_then(|d| to_channel_quantizer(&d, f)));
    let mut channels = Vec::with_capacity(4);
    for (d, ch) in designs.into_iter().zip(Channel::ALL) {
        channels.push(d.map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("channel {}: {m}", ch.name())),
            other => other,
        })?);
    }
    QuantizerCodebook::new(k, channels.try_into().unwrap())
}
