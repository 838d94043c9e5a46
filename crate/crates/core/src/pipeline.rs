//! Block-predictive encoder, its exact inverse, and the residual analyzer.
//!
//! Stream layout, all integers little-endian:
//!
//! ```text
//! "MIPC" | version u16 | width u32 | height u32 | bit_depth u8 | phase u8
//!        | predictor u8 [| weights hash u64 if CNN] | alpha u16
//!        | codebook ("MIPQ" ...) | coder version u8 | checksum u64
//!        | payload length u64 | header check u32 | payload
//! ```
//!
//! The header check is the low 32 bits of a content hash over the header
//! bytes before it; a damaged header is rejected before anything is sized
//! from it.
//! The checksum is a 64-bit content hash over the header bytes before it
//! followed by the image in `MIPR` form, so any header change that still
//! parses is caught after decoding.
//!
//! The image is zero-padded by [`CONTEXT_SIZE`] rows on top and columns on the
//! left, and 2x2 blocks are coded in raster order. Each sample's residual
//! `(y - prediction) mod 2^d` is coded with the adaptive model selected by its
//! channel and the class of its causal variance feature. Four sentinel bytes
//! close the payload.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use crate::coder::{residual_map, residual_unmap, ArithmeticDecoder, ArithmeticEncoder, FrequencyModel, CODER_VERSION};
use crate::context::{causal_variance, feature_maps, CanvasView, CONTEXT_SIZE};
use crate::entropy::{compression_ratio, conditional_entropy};
use crate::error::{Error, Result};
use crate::io::encode_raw;
use crate::mosaic::{bayer_split, pad_zero, BayerPhase, Channel, MosaicImage, Plane};
use crate::par::{self, ExecMode};
use crate::predictors::graph::{self, content_hash, NetworkGraph};
use crate::predictors::{CnnPredictor, LinearPredictor, Predictor, PredictorId, PredictorTag};
use crate::quantizer::QuantizerCodebook;

pub const MAGIC: &[u8; 4] = b"MIPC";
pub const FORMAT_VERSION: u16 = 1;
const SENTINEL: &[u8; 4] = b"MIPE";

#[derive(Debug, Clone, PartialEq)]
pub struct BitstreamHeader {
    pub width: u32,
    pub height: u32,
    pub bit_depth: u8,
    pub phase: BayerPhase,
    pub predictor: PredictorId,
    pub alpha: u16,
    pub codebook: QuantizerCodebook,
    pub coder_version: u8,
    pub checksum: u64,
    pub payload_len: u64,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s =
            self.bytes.get(self.pos..self.pos + n).ok_or_else(|| Error::Format("stream header truncated".into()))?;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl BitstreamHeader {
    /// Bytes covered by the checksum: everything before the checksum field.
    fn prefix_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.codebook.regions());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.bit_depth);
        out.push(self.phase.to_u8());
        out.push(self.predictor.tag as u8);
        if let Some(h) = self.predictor.weights_hash {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&self.codebook.to_bytes());
        out.push(self.coder_version);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.prefix_bytes();
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&self.payload_len.to_le_bytes());
        let check = content_hash(&out) as u32;
        out.extend_from_slice(&check.to_le_bytes());
        out
    }

    /// Parse a header; returns it with the offset of the payload.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize)> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Format("not a mosaic codec stream (bad magic)".into()));
        }
        let version = c.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported stream version {version}")));
        }
        let width = c.u32()?;
        let height = c.u32()?;
        let bit_depth = c.u8()?;
        let phase = BayerPhase::from_u8(c.u8()?).map_err(|e| Error::Format(e.to_string()))?;
        let predictor = match c.u8()? {
            0 => PredictorId::LINEAR,
            1 => PredictorId::cnn(c.u64()?),
            t => return Err(Error::Format(format!("unknown predictor tag {t}"))),
        };
        let alpha = c.u16()?;
        if alpha == 0 {
            return Err(Error::Format("alpha of zero in header".into()));
        }
        let (codebook, used) = QuantizerCodebook::read_from(&bytes[c.pos..])?;
        c.pos += used;
        let coder_version = c.u8()?;
        if coder_version != CODER_VERSION {
            return Err(Error::Format(format!("unsupported coder version {coder_version}")));
        }
        let checksum = c.u64()?;
        let payload_len = c.u64()?;
        let covered = c.pos;
        if c.u32()? != content_hash(&bytes[..covered]) as u32 {
            return Err(Error::Format("header check failed".into()));
        }
        if width == 0 || height == 0 || width % 2 != 0 || height % 2 != 0 {
            return Err(Error::Format(format!("invalid image size {width}x{height} in header")));
        }
        crate::mosaic::check_bit_depth(bit_depth).map_err(|e| Error::Format(e.to_string()))?;
        let h = BitstreamHeader {
            width,
            height,
            bit_depth,
            phase,
            predictor,
            alpha,
            codebook,
            coder_version,
            checksum,
            payload_len,
        };
        Ok((h, c.pos))
    }

    fn image_checksum(&self, img: &MosaicImage) -> u64 {
        let mut bytes = self.prefix_bytes();
        bytes.extend_from_slice(&encode_raw(img));
        content_hash(&bytes)
    }
}

/// Source of CNN weights for the decoder, looked up by content hash.
pub trait WeightResolver {
    fn resolve(&self, hash: u64) -> Result<Arc<NetworkGraph>>;
}

/// Resolver for streams that must not need weights.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoWeights;

impl WeightResolver for NoWeights {
    fn resolve(&self, hash: u64) -> Result<Arc<NetworkGraph>> {
        Err(Error::Graph(format!("stream needs weights {hash:016x} but none were supplied")))
    }
}

/// A single graph; any other hash is a mismatch.
impl WeightResolver for Arc<NetworkGraph> {
    fn resolve(&self, hash: u64) -> Result<Arc<NetworkGraph>> {
        if self.content_hash() == hash {
            Ok(Arc::clone(self))
        } else {
            Err(Error::HashMismatch { expected: hash, found: self.content_hash() })
        }
    }
}

/// Weight files (`*.mipw`) found in a list of directories or given directly.
#[derive(Debug, Clone, Default)]
pub struct WeightSearchPath {
    pub entries: Vec<PathBuf>,
}

impl WeightSearchPath {
    fn candidates(&self) -> Vec<PathBuf> {
        let mut files = Vec::new();
        for e in &self.entries {
            if e.is_dir() {
                if let Ok(rd) = fs::read_dir(e) {
                    let mut found: Vec<PathBuf> = rd
                        .filter_map(|d| d.ok().map(|d| d.path()))
                        .filter(|p| p.extension().is_some_and(|x| x == "mipw"))
                        .collect();
                    found.sort();
                    files.extend(found);
                }
            } else {
                files.push(e.clone());
            }
        }
        files
    }
}

impl WeightResolver for WeightSearchPath {
    fn resolve(&self, hash: u64) -> Result<Arc<NetworkGraph>> {
        let candidates = self.candidates();
        let mut last_found = None;
        for p in &candidates {
            let bytes = fs::read(p)?;
            // the stored hash is the file's last eight bytes
            let Some(tail) = bytes.len().checked_sub(8).map(|n| &bytes[n..]) else { continue };
            let found = u64::from_le_bytes(tail.try_into().unwrap());
            if found == hash && bytes.starts_with(graph::MAGIC) {
                return Ok(Arc::new(graph::load_graph(&bytes)?));
            }
            last_found = Some(found);
        }
        match (candidates.len(), last_found) {
            (1, Some(found)) => Err(Error::HashMismatch { expected: hash, found }),
            _ => Err(Error::Graph(format!("no weight file with hash {hash:016x} in the search path"))),
        }
    }
}

/// Predictions for every sample of `img`, row-major. Blocks are predicted
/// from the zero-padded original, which equals what the decoder has
/// reconstructed at that point.
pub fn predict_image(img: &MosaicImage, predictor: &dyn Predictor, mode: ExecMode) -> Result<Vec<u16>> {
    let m = CONTEXT_SIZE;
    let canvas = pad_zero(img, m)?;
    let view = canvas.view();
    let (w, bh, bw) = (img.width(), img.height() / 2, img.width() / 2);
    let rows = par::try_map_range(mode, bh, |bi| -> Result<Vec<u16>> {
        let mut pair = vec![0u16; 2 * w];
        for bj in 0..bw {
            let p = predictor.predict_at(&view, (m + 2 * bi, m + 2 * bj))?;
            for dy in 0..2 {
                pair[dy * w + 2 * bj] = p.values[dy][0];
                pair[dy * w + 2 * bj + 1] = p.values[dy][1];
            }
        }
        Ok(pair)
    })?;
    Ok(rows.concat())
}

/// Residual symbols of one image, split by channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualPlanes {
    /// Plane width and height (half the mosaic's).
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    /// Symbols in `[0, 2^d)`, indexed by [`Channel::index`], row-major.
    pub planes: [Vec<u32>; 4],
}

impl ResidualPlanes {
    pub fn from_predictions(img: &MosaicImage, predictions: &[u16]) -> Result<Self> {
        if predictions.len() != img.pixel_count() {
            return Err(Error::Dimension(format!(
                "{} predictions for {} samples",
                predictions.len(),
                img.pixel_count()
            )));
        }
        let (w, h, d) = (img.width(), img.height(), img.bit_depth());
        let mut planes: [Vec<u32>; 4] = Default::default();
        for p in &mut planes {
            p.reserve(w * h / 4);
        }
        for y in 0..h {
            for x in 0..w {
                let k = y * w + x;
                let s = residual_map(img.samples()[k], predictions[k], d);
                planes[img.channel_at(y, x).index()].push(s);
            }
        }
        Ok(ResidualPlanes { width: w / 2, height: h / 2, bit_depth: d, planes })
    }

    /// Inverse of [`from_predictions`](Self::from_predictions).
    pub fn reconstruct(&self, predictions: &[u16], phase: BayerPhase) -> Result<MosaicImage> {
        let (w, h) = (2 * self.width, 2 * self.height);
        if predictions.len() != w * h {
            return Err(Error::Dimension(format!("{} predictions for {} samples", predictions.len(), w * h)));
        }
        let mut out = vec![0u16; w * h];
        for y in 0..h {
            for x in 0..w {
                let ch = phase.channel_at(y, x);
                let s = self.planes[ch.index()][(y / 2) * self.width + x / 2];
                out[y * w + x] = residual_unmap(s, predictions[y * w + x], self.bit_depth);
            }
        }
        MosaicImage::new(w, h, self.bit_depth, phase, out)
    }

    /// Symbol read as a signed error in `[-2^(d-1), 2^(d-1))`.
    pub fn signed(&self, symbol: u32) -> i32 {
        let half = 1i32 << (self.bit_depth - 1);
        let s = symbol as i32;
        if s >= half {
            s - (1 << self.bit_depth)
        } else {
            s
        }
    }
}

/// Everything the payload coder needs, computed once.
struct Prepared {
    residuals: ResidualPlanes,
    features: [Vec<f64>; 4],
}

fn prepare(img: &MosaicImage, predictor: &dyn Predictor, mode: ExecMode) -> Result<Prepared> {
    let predictions = predict_image(img, predictor, mode)?;
    let residuals = ResidualPlanes::from_predictions(img, &predictions)?;
    let features = feature_maps(&bayer_split(img), mode);
    Ok(Prepared { residuals, features })
}

fn check_alpha(alpha: u16) -> Result<()> {
    if alpha == 0 {
        return Err(Error::Invalid("alpha must be at least 1".into()));
    }
    Ok(())
}

/// One lazily built model per (channel, class).
struct ModelBank {
    regions: usize,
    symbols: usize,
    increment: u32,
    models: Vec<Option<FrequencyModel>>,
}

impl ModelBank {
    fn new(regions: usize, bit_depth: u8, alpha: u16) -> Self {
        ModelBank {
            regions,
            symbols: 1 << bit_depth,
            increment: u32::from(alpha),
            models: (0..4 * regions).map(|_| None).collect(),
        }
    }

    #[inline]
    fn get(&mut self, ch: Channel, class: usize) -> &mut FrequencyModel {
        let (symbols, increment) = (self.symbols, self.increment);
        self.models[ch.index() * self.regions + class]
            .get_or_insert_with(|| FrequencyModel::with_increment(symbols, increment))
    }
}

fn code_payload(prep: &Prepared, phase: BayerPhase, codebook: &QuantizerCodebook, alpha: u16) -> Result<Vec<u8>> {
    let r = &prep.residuals;
    let mut bank = ModelBank::new(codebook.regions(), r.bit_depth, alpha);
    let mut enc = ArithmeticEncoder::new();
    for bi in 0..r.height {
        for bj in 0..r.width {
            let k = bi * r.width + bj;
            for dy in 0..2 {
                for dx in 0..2 {
                    let ch = phase.channel_at(dy, dx);
                    let class = codebook.classify(ch, prep.features[ch.index()][k]);
                    enc.encode(bank.get(ch, class), r.planes[ch.index()][k] as usize)?;
                }
            }
        }
    }
    let mut tail = FrequencyModel::new(256);
    for &b in SENTINEL {
        enc.encode(&mut tail, usize::from(b))?;
    }
    Ok(enc.finish())
}

fn header_for(
    img: &MosaicImage,
    predictor: &dyn Predictor,
    codebook: &QuantizerCodebook,
    alpha: u16,
) -> Result<BitstreamHeader> {
    let dim = |v: usize| u32::try_from(v).map_err(|_| Error::Dimension(format!("dimension {v} exceeds u32")));
    Ok(BitstreamHeader {
        width: dim(img.width())?,
        height: dim(img.height())?,
        bit_depth: img.bit_depth(),
        phase: img.phase(),
        predictor: predictor.id(),
        alpha,
        codebook: codebook.clone(),
        coder_version: CODER_VERSION,
        checksum: 0,
        payload_len: 0,
    })
}

fn assemble(mut header: BitstreamHeader, img: &MosaicImage, payload: &[u8]) -> Vec<u8> {
    header.checksum = header.image_checksum(img);
    header.payload_len = payload.len() as u64;
    let mut out = header.to_bytes();
    out.extend_from_slice(payload);
    out
}

/// Compress `img` losslessly. The output is a pure function of the inputs,
/// whatever `mode` is.
pub fn encode_image(
    img: &MosaicImage,
    predictor: &dyn Predictor,
    codebook: &QuantizerCodebook,
    alpha: u16,
    mode: ExecMode,
) -> Result<Vec<u8>> {
    check_alpha(alpha)?;
    let header = header_for(img, predictor, codebook, alpha)?;
    let prep = prepare(img, predictor, mode)?;
    let payload = code_payload(&prep, img.phase(), codebook, alpha)?;
    Ok(assemble(header, img, &payload))
}

fn predictor_for(header: &BitstreamHeader, resolver: &dyn WeightResolver) -> Result<Box<dyn Predictor>> {
    match (header.predictor.tag, header.predictor.weights_hash) {
        (PredictorTag::Linear, _) => Ok(Box::new(LinearPredictor)),
        (PredictorTag::Cnn, Some(hash)) => {
            let g = resolver.resolve(hash)?;
            if g.content_hash() != hash {
                return Err(Error::HashMismatch { expected: hash, found: g.content_hash() });
            }
            if g.bit_depth() != header.bit_depth {
                return Err(Error::Graph(format!(
                    "weights are for {}-bit samples, stream is {}-bit",
                    g.bit_depth(),
                    header.bit_depth
                )));
            }
            Ok(Box::new(CnnPredictor::new(g)))
        }
        (PredictorTag::Cnn, None) => Err(Error::Format("CNN stream without weights hash".into())),
    }
}

/// Exact inverse of [`encode_image`]. Weights are resolved and checked
/// before any symbol is decoded.
pub fn decode_image(bytes: &[u8], resolver: &dyn WeightResolver) -> Result<MosaicImage> {
    let (header, start) = BitstreamHeader::parse(bytes)?;
    let predictor = predictor_for(&header, resolver)?;
    let payload = &bytes[start..];
    match (payload.len() as u64).cmp(&header.payload_len) {
        std::cmp::Ordering::Less => return Err(Error::StreamUnderflow),
        std::cmp::Ordering::Greater => {
            return Err(Error::Corrupt(format!(
                "{} bytes after the declared payload",
                payload.len() as u64 - header.payload_len
            )))
        }
        std::cmp::Ordering::Equal => {}
    }

    let (w, h, d, phase) = (header.width as usize, header.height as usize, header.bit_depth, header.phase);
    let m = CONTEXT_SIZE;
    let cw = w + m;
    // Canvas and planes grow one block row at a time, so memory follows
    // decoding progress rather than the declared size.
    let mut canvas = vec![0u16; m * cw];
    let (pw, ph) = (w / 2, h / 2);
    let mut planes: [Plane; 4] = std::array::from_fn(|_| Plane { width: pw, height: 0, data: Vec::new() });
    let codebook = &header.codebook;
    let mut bank = ModelBank::new(codebook.regions(), d, header.alpha);
    let mut dec = ArithmeticDecoder::verifying(payload)?;

    for bi in 0..ph {
        canvas.resize((m + 2 * bi + 2) * cw, 0);
        for p in &mut planes {
            p.height += 1;
            p.data.resize(p.height * pw, 0);
        }
        for bj in 0..pw {
            let origin = (m + 2 * bi, m + 2 * bj);
            let view = CanvasView { samples: &canvas, width: cw, height: m + 2 * bi + 2, phase, bit_depth: d };
            let pred = predictor.predict_at(&view, origin)?;
            for dy in 0..2 {
                for dx in 0..2 {
                    let ch = phase.channel_at(dy, dx);
                    let plane = &mut planes[ch.index()];
                    let class = codebook.classify(ch, causal_variance(plane, bi, bj));
                    let sym = dec.decode(bank.get(ch, class))?;
                    let y = residual_unmap(sym as u32, pred.values[dy][dx], d);
                    plane.data[bi * pw + bj] = y;
                    canvas[(origin.0 + dy) * cw + origin.1 + dx] = y;
                }
            }
        }
    }
    let mut tail = FrequencyModel::new(256);
    for &b in SENTINEL {
        if dec.decode(&mut tail)? != usize::from(b) {
            return Err(Error::Corrupt("end-of-stream sentinel mismatch".into()));
        }
    }
    dec.finish()?;

    let samples: Vec<u16> = canvas.chunks_exact(cw).skip(m).flat_map(|row| row[m..].iter().copied()).collect();
    let img = MosaicImage::new(w, h, d, phase, samples)?;
    if header.image_checksum(&img) != header.checksum {
        return Err(Error::Corrupt("reconstructed image fails its checksum".into()));
    }
    Ok(img)
}

/// Residual statistics of one image under one predictor and codebook,
/// together with the size of the actual encoding.
#[derive(Debug, Clone)]
pub struct AnalysisReport {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    pub phase: BayerPhase,
    pub predictor: PredictorId,
    pub regions: usize,
    pub alpha: u16,
    /// Conditional entropy per channel, bits/sample.
    pub per_channel: [f64; 4],
    /// Mean of `per_channel`.
    pub entropy: f64,
    /// `bit_depth / entropy`.
    pub compression_ratio: f64,
    /// Payload bits per sample of [`encode_image`] with the same settings.
    pub coded_bits_per_sample: f64,
    /// Whole stream, header included.
    pub stream_bytes: usize,
    pub class_counts: [Vec<u64>; 4],
    pub residuals: ResidualPlanes,
}

pub fn analyze_image(
    img: &MosaicImage,
    predictor: &dyn Predictor,
    codebook: &QuantizerCodebook,
    alpha: u16,
    mode: ExecMode,
) -> Result<AnalysisReport> {
    check_alpha(alpha)?;
    let header = header_for(img, predictor, codebook, alpha)?;
    let prep = prepare(img, predictor, mode)?;
    let ce =
        conditional_entropy(&prep.residuals.planes, &prep.features, codebook, 1 << img.bit_depth(), u32::from(alpha))?;
    let payload = code_payload(&prep, img.phase(), codebook, alpha)?;
    let stream_bytes = assemble(header, img, &payload).len();
    Ok(AnalysisReport {
        width: img.width(),
        height: img.height(),
        bit_depth: img.bit_depth(),
        phase: img.phase(),
        predictor: predictor.id(),
        regions: codebook.regions(),
        alpha,
        per_channel: ce.per_channel,
        entropy: ce.combined,
        compression_ratio: compression_ratio(img.bit_depth(), ce.combined),
        coded_bits_per_sample: payload.len() as f64 * 8.0 / img.pixel_count() as f64,
        stream_bytes,
        class_counts: ce.class_counts,
        residuals: prep.residuals,
    })
}

impl AnalysisReport {
    /// `key=value` lines, one fact per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "width={}", self.width);
        let _ = writeln!(s, "height={}", self.height);
        let _ = writeln!(s, "bit_depth={}", self.bit_depth);
        let _ = writeln!(s, "phase={}", self.phase);
        let _ = writeln!(s, "predictor={}", self.predictor);
        let _ = writeln!(s, "regions={}", self.regions);
        let _ = writeln!(s, "alpha={}", self.alpha);
        for ch in Channel::ALL {
            let _ = writeln!(s, "H_{}={:.6}", ch.name(), self.per_channel[ch.index()]);
        }
        let _ = writeln!(s, "H={:.6}", self.entropy);
        let _ = writeln!(s, "CR={:.6}", self.compression_ratio);
        let _ = writeln!(s, "coded_bps={:.6}", self.coded_bits_per_sample);
        let _ = writeln!(s, "stream_bytes={}", self.stream_bytes);
        s
    }

    /// Residual map as a mosaic of the same geometry: signed error plus
    /// `2^(d-1)`, so zero error is mid-grey.
    pub fn residual_image(&self) -> Result<MosaicImage> {
        let r = &self.residuals;
        let half = 1i32 << (r.bit_depth - 1);
        let mut out = vec![0u16; self.width * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                let s = r.planes[self.phase.channel_at(y, x).index()][(y / 2) * r.width + x / 2];
                out[y * self.width + x] = (r.signed(s) + half) as u16;
            }
        }
        MosaicImage::new(self.width, self.height, r.bit_depth, self.phase, out)
    }

    /// CSV of signed residual counts per channel; rows with no samples are
    /// omitted.
    pub fn histogram_csv(&self) -> String {
        let r = &self.residuals;
        let n = 1usize << r.bit_depth;
        let mut counts = vec![[0u64; 4]; n];
        for ch in Channel::ALL {
            for &s in &r.planes[ch.index()] {
                counts[s as usize][ch.index()] += 1;
            }
        }
        let mut rows: Vec<(i32, [u64; 4])> = counts
            .into_iter()
            .enumerate()
            .filter(|(_, c)| c.iter().any(|&v| v > 0))
            .map(|(s, c)| (r.signed(s as u32), c))
            .collect();
        rows.sort_by_key(|(e, _)| *e);
        let mut s = String::from("residual,R,G1,G2,B\n");
        for (e, c) in rows {
            let _ = writeln!(s, "{e},{},{},{},{}", c[0], c[1], c[2], c[3]);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mosaic::max_sample;
    use crate::quantizer::design_codebook;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize, d: u8, phase: BayerPhase) -> MosaicImage {
        let max = max_sample(d) as u16;
        let s = (0..w * h).map(|_| rng.gen_range(0..=max)).collect();
        MosaicImage::new(w, h, d, phase, s).unwrap()
    }

    /// Smooth gradient with mild noise and per-channel gain.
    fn textured(rng: &mut ChaCha8Rng, w: usize, h: usize, d: u8, phase: BayerPhase) -> MosaicImage {
        let max = max_sample(d) as f64;
        let mut s = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let gain = [0.6, 1.0, 0.95, 0.45][phase.channel_at(y, x).index()];
                let base = 0.5 + 0.3 * ((x as f64 / 9.0).sin() * (y as f64 / 13.0).cos());
                let v = (base * gain * max + rng.gen_range(-2.0..2.0)).clamp(0.0, max);
                s.push(v as u16);
            }
        }
        MosaicImage::new(w, h, d, phase, s).unwrap()
    }

    fn tiny(d: u8) -> Arc<NetworkGraph> {
        Arc::new(NetworkGraph::tiny_fixture(d).unwrap())
    }

    fn round_trip(img: &MosaicImage, p: &dyn Predictor, resolver: &dyn WeightResolver) -> Vec<u8> {
        let cb = QuantizerCodebook::geometric(img.bit_depth(), 8).unwrap();
        let bytes = encode_image(img, p, &cb, 32, ExecMode::Auto).unwrap();
        assert_eq!(&decode_image(&bytes, resolver).unwrap(), img);
        bytes
    }

    fn payload_bps(bytes: &[u8], img: &MosaicImage) -> f64 {
        let (h, _) = BitstreamHeader::parse(bytes).unwrap();
        h.payload_len as f64 * 8.0 / img.pixel_count() as f64
    }

    #[test]
    fn header_round_trip() {
        let cb = QuantizerCodebook::geometric(14, 16).unwrap();
        for predictor in [PredictorId::LINEAR, PredictorId::cnn(0xdead_beef_0123_4567)] {
            let h = BitstreamHeader {
                width: 640,
                height: 480,
                bit_depth: 14,
                phase: BayerPhase::Gbrg,
                predictor,
                alpha: 32,
                codebook: cb.clone(),
                coder_version: CODER_VERSION,
                checksum: 0x0102_0304_0506_0708,
                payload_len: 12345,
            };
            let bytes = h.to_bytes();
            assert_eq!(&bytes[..4], b"MIPC");
            let (back, used) = BitstreamHeader::parse(&bytes).unwrap();
            assert_eq!(back, h);
            assert_eq!(used, bytes.len());
            for cut in 0..bytes.len() {
                assert!(BitstreamHeader::parse(&bytes[..cut]).is_err());
            }
        }
    }

    #[test]
    fn header_rejects_bad_magic_and_version() {
        let img = MosaicImage::filled(4, 4, 8, BayerPhase::Rggb, 9).unwrap();
        let mut bytes = round_trip(&img, &LinearPredictor, &NoWeights);
        bytes[4] = 2;
        assert!(matches!(decode_image(&bytes, &NoWeights), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode_image(&bytes, &NoWeights), Err(Error::Format(_))));
    }

    #[test]
    fn constant_image_is_nearly_free() {
        for d in [8, 14] {
            let img = MosaicImage::filled(512, 512, d, BayerPhase::Rggb, 77).unwrap();
            let bytes = round_trip(&img, &LinearPredictor, &NoWeights);
            let bps = payload_bps(&bytes, &img);
            assert!(bps <= 0.2, "{d}-bit constant image: {bps} bits/sample");
        }
    }

    #[test]
    fn random_image_is_incompressible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [8, 10] {
            let img = random_image(&mut rng, 256, 256, d, BayerPhase::Bggr);
            let bytes = round_trip(&img, &LinearPredictor, &NoWeights);
            let bps = payload_bps(&bytes, &img);
            assert!(bps >= f64::from(d) - 0.1, "{d}-bit random image: {bps} bits/sample");
        }
    }

    #[test]
    fn encoding_is_deterministic_across_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = textured(&mut rng, 96, 70, 12, BayerPhase::Grbg);
        let cb = design_codebook(std::slice::from_ref(&img), 16, ExecMode::Auto).unwrap();
        let a = encode_image(&img, &LinearPredictor, &cb, 32, ExecMode::Auto).unwrap();
        let b = encode_image(&img, &LinearPredictor, &cb, 32, ExecMode::Auto).unwrap();
        let c = encode_image(&img, &LinearPredictor, &cb, 32, ExecMode::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let g = tiny(12);
        let p = CnnPredictor::new(Arc::clone(&g));
        let a = encode_image(&img, &p, &cb, 32, ExecMode::Auto).unwrap();
        let c = encode_image(&img, &p, &cb, 32, ExecMode::Sequential).unwrap();
        assert_eq!(a, c);
        assert_eq!(decode_image(&a, &g).unwrap(), img);
    }

    #[test]
    fn round_trips_phases_depths_predictors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for phase in BayerPhase::ALL {
            for d in [8, 14] {
                let g = tiny(d);
                let cnn = CnnPredictor::new(Arc::clone(&g));
                for (w, h) in [(2, 2), (6, 4), (34, 18), (130, 66)] {
                    let img = textured(&mut rng, w, h, d, phase);
                    round_trip(&img, &LinearPredictor, &NoWeights);
                    round_trip(&img, &cnn, &g);
                    let img = random_image(&mut rng, w, h, d, phase);
                    round_trip(&img, &LinearPredictor, &NoWeights);
                }
            }
        }
    }

    #[test]
    fn extreme_values_round_trip() {
        for d in [8, 16] {
            let max = max_sample(d) as u16;
            let s = (0..64 * 64).map(|k| if (k / 3) % 2 == 0 { 0 } else { max }).collect();
            let img = MosaicImage::new(64, 64, d, BayerPhase::Rggb, s).unwrap();
            round_trip(&img, &LinearPredictor, &NoWeights);
        }
    }

    /// Predictor that randomizes every sample after the current block before
    /// delegating, so any read of the future changes its output.
    struct FutureScrambler<P> {
        inner: P,
        seed: u64,
    }

    impl<P: Predictor> Predictor for FutureScrambler<P> {
        fn id(&self) -> PredictorId {
            self.inner.id()
        }

        fn predict(
            &self,
            ctx: &crate::context::ContextPair,
            phase: BayerPhase,
            d: u8,
        ) -> Result<crate::predictors::PredictionBlock> {
            self.inner.predict(ctx, phase, d)
        }

        fn predict_at(
            &self,
            canvas: &CanvasView<'_>,
            origin: (usize, usize),
        ) -> Result<crate::predictors::PredictionBlock> {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (origin.0 * 100_003 + origin.1) as u64);
            let max = max_sample(canvas.bit_depth) as u16;
            let (r, c) = origin;
            let mut samples = canvas.samples.to_vec();
            for y in 0..canvas.height {
                for x in 0..canvas.width {
                    let future = y >= r + 2 || (y >= r && x >= c);
                    if future {
                        samples[y * canvas.width + x] = rng.gen_range(0..=max);
                    }
                }
            }
            let scrambled = CanvasView { samples: &samples, ..*canvas };
            self.inner.predict_at(&scrambled, origin)
        }
    }

    #[test]
    fn encoding_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for d in [8, 14] {
            let img = textured(&mut rng, 12, 10, d, BayerPhase::Gbrg);
            let cb = QuantizerCodebook::geometric(d, 4).unwrap();
            let g = tiny(d);
            let plain: [&dyn Predictor; 2] = [&LinearPredictor, &CnnPredictor::new(Arc::clone(&g))];
            for (i, p) in plain.into_iter().enumerate() {
                let reference = encode_image(&img, p, &cb, 32, ExecMode::Sequential).unwrap();
                for seed in 0..3 {
                    let scrambled: Box<dyn Predictor> = if i == 0 {
                        Box::new(FutureScrambler { inner: LinearPredictor, seed })
                    } else {
                        Box::new(FutureScrambler { inner: CnnPredictor::new(Arc::clone(&g)), seed })
                    };
                    let got = encode_image(&img, scrambled.as_ref(), &cb, 32, ExecMode::Sequential).unwrap();
                    assert_eq!(got, reference, "predictor {i} read a future sample");
                }
            }
        }
    }

    #[test]
    fn every_payload_bit_flip_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = textured(&mut rng, 16, 12, 8, BayerPhase::Rggb);
        let bytes = round_trip(&img, &LinearPredictor, &NoWeights);
        let (_, start) = BitstreamHeader::parse(&bytes).unwrap();
        for bit in start * 8..bytes.len() * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 0x80 >> (bit % 8);
            match decode_image(&b, &NoWeights) {
                Err(_) => {}
                Ok(out) => panic!("flip of payload bit {bit} decoded silently (equal: {})", out == img),
            }
        }
    }

    #[test]
    fn every_header_bit_flip_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = textured(&mut rng, 8, 8, 10, BayerPhase::Bggr);
        let bytes = round_trip(&img, &LinearPredictor, &NoWeights);
        let (_, start) = BitstreamHeader::parse(&bytes).unwrap();
        for bit in 0..start * 8 {
            let mut b = bytes.clone();
            b[bit / 8] ^= 0x80 >> (bit % 8);
            assert!(decode_image(&b, &NoWeights).is_err(), "header bit {bit}");
        }
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = textured(&mut rng, 16, 16, 8, BayerPhase::Rggb);
        let bytes = round_trip(&img, &LinearPredictor, &NoWeights);
        let (_, start) = BitstreamHeader::parse(&bytes).unwrap();
        assert!(matches!(decode_image(&bytes[..bytes.len() - 1], &NoWeights), Err(Error::StreamUnderflow)));
        assert!(matches!(decode_image(&bytes[..start], &NoWeights), Err(Error::StreamUnderflow)));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_image(&long, &NoWeights), Err(Error::Corrupt(_))));
    }

    #[test]
    fn wrong_weights_fail_before_decoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = textured(&mut rng, 8, 8, 8, BayerPhase::Rggb);
        let g = tiny(8);
        let bytes = round_trip(&img, &CnnPredictor::new(Arc::clone(&g)), &g);
        let other = Arc::new(NetworkGraph::reference_architecture(8, 1).unwrap());
        match decode_image(&bytes, &other) {
            Err(Error::HashMismatch { expected, found }) => {
                assert_eq!(expected, g.content_hash());
                assert_eq!(found, other.content_hash());
            }
            r => panic!("expected hash mismatch, got {r:?}"),
        }
        // a header-only stream (payload cut away) still fails on the hash first
        let (_, start) = BitstreamHeader::parse(&bytes).unwrap();
        assert!(matches!(decode_image(&bytes[..start], &other), Err(Error::HashMismatch { .. })));
        assert!(matches!(decode_image(&bytes, &NoWeights), Err(Error::Graph(_))));
        let g14 = tiny(14);
        let p14 = CnnPredictor::new(g14);
        let cb = QuantizerCodebook::single_class();
        assert!(matches!(encode_image(&img, &p14, &cb, 32, ExecMode::Auto), Err(Error::Graph(_))));
    }

    #[test]
    fn search_path_resolves_by_hash() {
        let dir = tempfile::tempdir().unwrap();
        let g = tiny(8);
        fs::write(dir.path().join("a.mipw"), graph::store_graph(&NetworkGraph::tiny_fixture(14).unwrap())).unwrap();
        fs::write(dir.path().join("b.mipw"), graph::store_graph(&g)).unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let sp = WeightSearchPath { entries: vec![dir.path().to_path_buf()] };
        assert_eq!(sp.resolve(g.content_hash()).unwrap().content_hash(), g.content_hash());
        assert!(matches!(sp.resolve(1), Err(Error::Graph(_))));
        let single = WeightSearchPath { entries: vec![dir.path().join("a.mipw")] };
        assert!(matches!(single.resolve(g.content_hash()), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn residual_planes_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 20, 14, 13, BayerPhase::Grbg);
        let preds: Vec<u16> = (0..img.pixel_count()).map(|_| rng.gen_range(0..8192)).collect();
        let r = ResidualPlanes::from_predictions(&img, &preds).unwrap();
        assert_eq!(r.reconstruct(&preds, img.phase()).unwrap(), img);
        assert_eq!(r.signed(0), 0);
        assert_eq!(r.signed(8191), -1);
        assert_eq!(r.signed(4096), -4096);
    }

    #[test]
    fn analysis_of_zero_residual_image() {
        let img = MosaicImage::filled(64, 64, 8, BayerPhase::Rggb, 50).unwrap();
        let rep =
            analyze_image(&img, &LinearPredictor, &QuantizerCodebook::single_class(), 32, ExecMode::Auto).unwrap();
        // every residual is 0 except the first block row/column against zero padding
        assert!(rep.entropy < 0.5, "{}", rep.entropy);
        assert!(rep.compression_ratio > 16.0);
        let text = rep.to_text();
        assert!(text.contains("predictor=linear\n"));
        assert!(text.contains(&format!("H={:.6}\n", rep.entropy)));
        let csv = rep.histogram_csv();
        assert!(csv.starts_with("residual,R,G1,G2,B\n0,"));
        let map = rep.residual_image().unwrap();
        assert_eq!(map.get(40, 40), 128);
    }

    #[test]
    fn analysis_tracks_coded_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = textured(&mut rng, 256, 256, 10, BayerPhase::Rggb);
        let cb = design_codebook(std::slice::from_ref(&img), 16, ExecMode::Auto).unwrap();
        let rep = analyze_image(&img, &LinearPredictor, &cb, 32, ExecMode::Auto).unwrap();
        let rel = (rep.coded_bits_per_sample - rep.entropy).abs() / rep.entropy;
        assert!(rel < 0.05, "H={} coded={}", rep.entropy, rep.coded_bits_per_sample);
        let bytes = encode_image(&img, &LinearPredictor, &cb, 32, ExecMode::Auto).unwrap();
        assert_eq!(bytes.len(), rep.stream_bytes);
    }
}
