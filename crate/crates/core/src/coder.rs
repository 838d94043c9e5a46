//! Adaptive multi-symbol arithmetic coder.
//!
//! Interval arithmetic follows the classic 32-bit integer scheme with
//! pending (follow) bits for straddling intervals. Probabilities come from
//! [`FrequencyModel`], a count table kept in a Fenwick tree so cumulative
//! lookups and updates are logarithmic in the alphabet size.

use crate::error::{Error, Result};

const CODE_BITS: u32 = 32;
const TOP: u64 = (1 << CODE_BITS) - 1;
const QUARTER: u64 = 1 << (CODE_BITS - 2);
const HALF: u64 = 2 * QUARTER;
const THREE_QUARTERS: u64 = 3 * QUARTER;

/// Total-count bound at which all counts are halved, per unit increment.
pub const RESCALE_BOUND: u32 = 1 << 16;

/// Hard cap on a model's total; keeps every symbol at least one code unit
/// wide in an interval of `2^30`.
const MAX_TOTAL: u32 = 1 << 24;

/// Coder configuration version recorded in stream headers.
pub const CODER_VERSION: u8 = 1;

/// Adaptive symbol counts. Every count starts at 1 and never drops below 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyModel {
    freq: Vec<u32>,
    /// 1-based Fenwick tree over `freq`.
    tree: Vec<u32>,
    total: u32,
    limit: u32,
    increment: u32,
}

impl FrequencyModel {
    pub fn new(symbols: usize) -> Self {
        Self::with_increment(symbols, 1)
    }

    /// Counts start at 1 and grow by `increment` per coded symbol, so after
    /// `n` symbols `P_i = (increment * n_i + 1) / (increment * n + N_sym)`
    /// until the first rescale.
    pub fn with_increment(symbols: usize, increment: u32) -> Self {
        assert!(symbols > 0, "empty alphabet");
        assert!(symbols <= 1 << 16, "alphabet too large");
        assert!((1..=1 << 16).contains(&increment), "increment outside [1, 65536]");
        // The total must stay above the alphabet size after halving.
        let limit =
            (u64::from(RESCALE_BOUND.max(4 * symbols as u32)) * u64::from(increment)).min(u64::from(MAX_TOTAL)) as u32;
        let mut m = FrequencyModel { freq: vec![1; symbols], tree: Vec::new(), total: 0, limit, increment };
        m.rebuild();
        m
    }

    pub fn symbols(&self) -> usize {
        self.freq.len()
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn count(&self, symbol: usize) -> u32 {
        self.freq[symbol]
    }

    /// Current probability of `symbol`.
    pub fn probability(&self, symbol: usize) -> f64 {
        f64::from(self.freq[symbol]) / f64::from(self.total)
    }

    fn rebuild(&mut self) {
        let n = self.freq.len();
        self.tree = vec![0; n + 1];
        for i in 1..=n {
            self.tree[i] += self.freq[i - 1];
            let parent = i + (i & i.wrapping_neg());
            if parent <= n {
                self.tree[parent] += self.tree[i];
            }
        }
        self.total = self.freq.iter().sum();
    }

    /// Sum of counts of symbols `< symbol`.
    fn prefix(&self, symbol: usize) -> u32 {
        let mut i = symbol;
        let mut s = 0;
        while i > 0 {
            s += self.tree[i];
            i &= i - 1;
        }
        s
    }

    /// `[low, high)` cumulative range of `symbol`.
    #[inline]
    pub fn range(&self, symbol: usize) -> (u32, u32) {
        let low = self.prefix(symbol);
        (low, low + self.freq[symbol])
    }

    /// Symbol whose cumulative range contains `target`, with its range.
    fn find(&self, target: u32) -> (usize, u32, u32) {
        let n = self.freq.len();
        let mut pos = 0;
        let mut rem = target;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next] <= rem {
                pos = next;
                rem -= self.tree[next];
            }
            step >>= 1;
        }
        let low = target - rem;
        (pos, low, low + self.freq[pos])
    }

    pub fn increment(&self) -> u32 {
        self.increment
    }

    pub fn update(&mut self, symbol: usize) {
        let inc = self.increment;
        self.freq[symbol] += inc;
        self.total += inc;
        let n = self.freq.len();
        let mut i = symbol + 1;
        while i <= n {
            self.tree[i] += inc;
            i += i & i.wrapping_neg();
        }
        if self.total >= self.limit {
            for f in &mut self.freq {
                *f = (*f).div_ceil(2);
            }
            self.rebuild();
        }
    }
}

#[derive(Debug, Default)]
struct BitWriter {
    bytes: Vec<u8>,
    acc: u8,
    nbits: u8,
    written: u64,
}

impl BitWriter {
    #[inline]
    fn put(&mut self, bit: bool) {
        self.acc = (self.acc << 1) | bit as u8;
        self.nbits += 1;
        self.written += 1;
        if self.nbits == 8 {
            self.bytes.push(self.acc);
            self.acc = 0;
            self.nbits = 0;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            self.bytes.push(self.acc << (8 - self.nbits));
        }
        self.bytes
    }
}

pub struct ArithmeticEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: BitWriter,
}

impl Default for ArithmeticEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithmeticEncoder {
    pub fn new() -> Self {
        ArithmeticEncoder { low: 0, high: TOP, pending: 0, out: BitWriter::default() }
    }

    /// Code `symbol` under `model`, then update the model.
    pub fn encode(&mut self, model: &mut FrequencyModel, symbol: usize) -> Result<()> {
        if symbol >= model.symbols() {
            return Err(Error::Range(format!("symbol {symbol} outside alphabet of {}", model.symbols())));
        }
        let (lo, hi) = model.range(symbol);
        self.narrow(lo, hi, model.total());
        model.update(symbol);
        Ok(())
    }

    fn narrow(&mut self, lo: u32, hi: u32, total: u32) {
        let range = self.high - self.low + 1;
        let total = u64::from(total);
        self.high = self.low + range * u64::from(hi) / total - 1;
        self.low += range * u64::from(lo) / total;
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
        }
    }

    #[inline]
    fn emit(&mut self, bit: bool) {
        self.out.put(bit);
        for _ in 0..self.pending {
            self.out.put(!bit);
        }
        self.pending = 0;
    }

    /// Bits emitted so far, excluding the final flush.
    pub fn bits_written(&self) -> u64 {
        self.out.written + self.pending
    }

    /// Flush the interval and return the byte-padded payload.
    pub fn finish(mut self) -> Vec<u8> {
        self.pending += 1;
        self.emit(self.low >= QUARTER);
        self.out.finish()
    }
}

/// Bits the decoder may read past the end of the payload. It looks 32 bits
/// ahead, and the encoder's flush leaves at least two of them in the stream.
const READ_AHEAD_BITS: u32 = CODE_BITS;

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    bit: u8,
    overrun: u32,
}

impl BitReader<'_> {
    #[inline]
    fn get(&mut self) -> Result<u64> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                let v = (b >> (7 - self.bit)) & 1;
                self.bit += 1;
                if self.bit == 8 {
                    self.bit = 0;
                    self.pos += 1;
                }
                Ok(u64::from(v))
            }
            None => {
                self.overrun += 1;
                if self.overrun > READ_AHEAD_BITS {
                    Err(Error::StreamUnderflow)
                } else {
                    Ok(0)
                }
            }
        }
    }
}

pub struct ArithmeticDecoder<'a> {
    low: u64,
    high: u64,
    value: u64,
    input: BitReader<'a>,
    /// Re-encodes every decoded symbol so [`ArithmeticDecoder::finish`] can
    /// require the payload to be the encoder's exact output.
    shadow: Option<ArithmeticEncoder>,
}

impl<'a> ArithmeticDecoder<'a> {
    pub fn new(payload: &'a [u8]) -> Result<Self> {
        let mut input = BitReader { bytes: payload, pos: 0, bit: 0, overrun: 0 };
        let mut value = 0;
        for _ in 0..CODE_BITS {
            value = (value << 1) | input.get()?;
        }
        Ok(ArithmeticDecoder { low: 0, high: TOP, value, input, shadow: None })
    }

    /// Decoder that also checks, at [`finish`](Self::finish), that the payload
    /// is byte-identical to what the encoder emits for the decoded symbols.
    /// Any altered bit, including flush and padding bits, is then reported.
    pub fn verifying(payload: &'a [u8]) -> Result<Self> {
        let mut d = Self::new(payload)?;
        d.shadow = Some(ArithmeticEncoder::new());
        Ok(d)
    }

    /// End decoding. Plain decoders accept any tail; verifying decoders
    /// return [`Error::Corrupt`] unless the payload is canonical.
    pub fn finish(self) -> Result<()> {
        let canonical = self.shadow.is_none_or(|enc| enc.finish() == self.input.bytes);
        if canonical {
            Ok(())
        } else {
            Err(Error::Corrupt("payload differs from the canonical encoding".into()))
        }
    }

    /// Decode one symbol under `model`, then update the model.
    pub fn decode(&mut self, model: &mut FrequencyModel) -> Result<usize> {
        let range = self.high - self.low + 1;
        let total = u64::from(model.total());
        let target = ((self.value - self.low + 1) * total - 1) / range;
        if target >= total {
            return Err(Error::Corrupt("arithmetic decoder left its interval".into()));
        }
        let (symbol, lo, hi) = model.find(target as u32);
        if let Some(shadow) = &mut self.shadow {
            shadow.narrow(lo, hi, model.total());
        }
        self.high = self.low + range * u64::from(hi) / total - 1;
        self.low += range * u64::from(lo) / total;
        loop {
            if self.high < HALF {
            } else if self.low >= HALF {
                self.value -= HALF;
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.value -= QUARTER;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = (self.high << 1) | 1;
            self.value = (self.value << 1) | self.input.get()?;
        }
        model.update(symbol);
        Ok(symbol)
    }
}

/// Residual symbol `(y - pred) mod 2^d`.
#[inline]
pub fn residual_map(y: u16, pred: u16, bit_depth: u8) -> u32 {
    let mask = (1u32 << bit_depth) - 1;
    u32::from(y).wrapping_sub(u32::from(pred)) & mask
}

/// Inverse of [`residual_map`]: `(pred + symbol) mod 2^d`.
#[inline]
pub fn residual_unmap(symbol: u32, pred: u16, bit_depth: u8) -> u16 {
    let mask = (1u32 << bit_depth) - 1;
    (u32::from(pred).wrapping_add(symbol) & mask) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn residual_examples() {
        assert_eq!(residual_map(5, 7, 8), 254);
        assert_eq!(residual_unmap(254, 7, 8), 5);
        assert_eq!(residual_map(300, 300, 14), 0);
    }

    #[test]
    fn residual_inverse_exhaustive_4bit() {
        for y in 0..16u16 {
            for p in 0..16u16 {
                let s = residual_map(y, p, 4);
                assert!(s < 16);
                assert_eq!(s, (i32::from(y) - i32::from(p)).rem_euclid(16) as u32);
                assert_eq!(residual_unmap(s, p, 4), y);
            }
        }
    }

    #[test]
    fn fenwick_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = FrequencyModel::new(37);
        for _ in 0..5000 {
            m.update(rng.gen_range(0..37));
            let mut cum = 0;
            for s in 0..37 {
                assert_eq!(m.range(s), (cum, cum + m.count(s)));
                for t in [cum, cum + m.count(s) - 1] {
                    assert_eq!(m.find(t), (s, cum, cum + m.count(s)));
                }
                cum += m.count(s);
            }
            assert_eq!(cum, m.total());
        }
    }

    #[test]
    fn rescale_keeps_counts_positive() {
        let mut m = FrequencyModel::new(256);
        for _ in 0..200_000 {
            m.update(3);
            assert!(m.total() < RESCALE_BOUND);
        }
        assert!((0..256).all(|s| m.count(s) >= 1));
        let big = FrequencyModel::new(1 << 16);
        assert!(big.total() < big.limit);
    }

    fn round_trip(symbols: &[(usize, usize)], alphabets: &[usize]) -> Vec<u8> {
        let mut enc_models: Vec<FrequencyModel> = alphabets.iter().map(|&n| FrequencyModel::new(n)).collect();
        let mut enc = ArithmeticEncoder::new();
        for &(m, s) in symbols {
            enc.encode(&mut enc_models[m], s).unwrap();
        }
        let bytes = enc.finish();
        let mut dec_models: Vec<FrequencyModel> = alphabets.iter().map(|&n| FrequencyModel::new(n)).collect();
        let mut dec = ArithmeticDecoder::new(&bytes).unwrap();
        for &(m, s) in symbols {
            assert_eq!(dec.decode(&mut dec_models[m]).unwrap(), s);
        }
        assert_eq!(enc_models, dec_models);
        bytes
    }

    #[test]
    fn single_symbol_alphabet_costs_only_flush() {
        let syms = vec![(0, 0); 100_000];
        let bytes = round_trip(&syms, &[1]);
        assert!(bytes.len() <= 2, "{} bytes", bytes.len());
    }

    #[test]
    fn random_streams_and_model_switching() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let alphabets: Vec<usize> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(1..5000)).collect();
            let n = rng.gen_range(0..20_000);
            let syms: Vec<(usize, usize)> = (0..n)
                .map(|_| {
                    let m = rng.gen_range(0..alphabets.len());
                    let s = if rng.gen_bool(0.7) {
                        rng.gen_range(0..alphabets[m].min(4))
                    } else {
                        rng.gen_range(0..alphabets[m])
                    };
                    (m, s)
                })
                .collect();
            round_trip(&syms, &alphabets);
        }
    }

    #[test]
    fn encoder_and_decoder_models_agree_on_every_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let syms: Vec<usize> = (0..3000).map(|_| rng.gen_range(0..300)).collect();
        let mut em = FrequencyModel::new(300);
        let mut enc = ArithmeticEncoder::new();
        let mut snapshots = Vec::new();
        for &s in &syms {
            enc.encode(&mut em, s).unwrap();
            snapshots.push(em.clone());
        }
        let bytes = enc.finish();
        let mut dm = FrequencyModel::new(300);
        let mut dec = ArithmeticDecoder::new(&bytes).unwrap();
        for (i, &s) in syms.iter().enumerate() {
            assert_eq!(dec.decode(&mut dm).unwrap(), s);
            assert_eq!(dm, snapshots[i]);
        }
    }

    #[test]
    fn coded_length_tracks_model_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut m = FrequencyModel::new(1024);
        let mut enc = ArithmeticEncoder::new();
        let mut ideal = 0.0;
        for _ in 0..200_000 {
            let s = (rng.gen::<f64>().powi(4) * 1024.0) as usize;
            ideal -= m.probability(s).log2();
            enc.encode(&mut m, s).unwrap();
        }
        let bits = enc.finish().len() as f64 * 8.0;
        assert!(bits <= ideal * 1.02 + 64.0, "{bits} vs {ideal}");
    }

    #[test]
    fn uniform_bytes_cost_eight_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let mut m = FrequencyModel::new(256);
        let mut enc = ArithmeticEncoder::new();
        for _ in 0..n {
            enc.encode(&mut m, rng.gen_range(0..256)).unwrap();
        }
        let bps = enc.finish().len() as f64 * 8.0 / n as f64;
        assert!((bps - 8.0).abs() <= 0.08, "{bps}");
    }

    #[test]
    fn out_of_range_symbol() {
        let mut m = FrequencyModel::new(4);
        assert!(matches!(ArithmeticEncoder::new().encode(&mut m, 4), Err(Error::Range(_))));
    }

    #[test]
    fn truncated_stream_underflows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut m = FrequencyModel::new(256);
        let mut enc = ArithmeticEncoder::new();
        let syms: Vec<usize> = (0..4000).map(|_| rng.gen_range(0..256)).collect();
        for &s in &syms {
            enc.encode(&mut m, s).unwrap();
        }
        let bytes = enc.finish();
        let cut = &bytes[..bytes.len() / 2];
        let mut m = FrequencyModel::new(256);
        let mut dec = ArithmeticDecoder::new(cut).unwrap();
        let res: Result<Vec<usize>> = syms.iter().map(|_| dec.decode(&mut m)).collect();
        assert!(matches!(res, Err(Error::StreamUnderflow)));
    }

    #[test]
    fn weighted_increment_tracks_smoothed_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = FrequencyModel::with_increment(16, 32);
        let mut h = crate::entropy::SmoothedHistogram::new(16, 32).unwrap();
        for _ in 0..1000 {
            let s = rng.gen_range(0..16usize).min(rng.gen_range(0..16));
            m.update(s);
            h.add(s);
        }
        let (num, den) = h.rational_probs();
        assert_eq!(u128::from(m.total()), den);
        for (i, n) in num.iter().enumerate() {
            assert_eq!(u128::from(m.count(i)), *n);
        }
    }

    #[test]
    fn weighted_model_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let syms: Vec<usize> = (0..50_000).map(|_| rng.gen_range(0..300usize).min(rng.gen_range(0..300))).collect();
        let mut m = FrequencyModel::with_increment(300, 1000);
        let mut enc = ArithmeticEncoder::new();
        for &s in &syms {
            enc.encode(&mut m, s).unwrap();
        }
        assert!(m.total() <= MAX_TOTAL);
        let bytes = enc.finish();
        let mut m = FrequencyModel::with_increment(300, 1000);
        let mut dec = ArithmeticDecoder::new(&bytes).unwrap();
        for &s in &syms {
            assert_eq!(dec.decode(&mut m).unwrap(), s);
        }
    }

    #[test]
    fn verifying_decoder_rejects_every_single_bit_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let syms: Vec<usize> = (0..400).map(|_| rng.gen_range(0..20usize).min(rng.gen_range(0..20))).collect();
        let mut m = FrequencyModel::new(20);
        let mut enc = ArithmeticEncoder::new();
        for &s in &syms {
            enc.encode(&mut m, s).unwrap();
        }
        let bytes = enc.finish();
        let decode_all = |payload: &[u8]| -> Result<Vec<usize>> {
            let mut m = FrequencyModel::new(20);
            let mut dec = ArithmeticDecoder::verifying(payload)?;
            let out = syms.iter().map(|_| dec.decode(&mut m)).collect::<Result<Vec<_>>>()?;
            dec.finish()?;
            Ok(out)
        };
        assert_eq!(decode_all(&bytes).unwrap(), syms);
        for bit in 0..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 0x80 >> (bit % 8);
            match decode_all(&b) {
                Err(_) => {}
                Ok(out) => assert_ne!(out, syms, "flip of bit {bit} went unnoticed"),
            }
        }
    }
}
