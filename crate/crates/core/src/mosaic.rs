//! Bayer mosaic image model: validation, channel split/merge, green-plane
//! separation and border padding.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Top-left 2x2 arrangement of the color filter array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BayerPhase {
    Rggb,
    Grbg,
    Gbrg,
    Bggr,
}

/// One of the four sample classes of a Bayer period. `G1` is the green on the
/// even row of the period, `G2` the green on the odd row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Channel {
    R = 0,
    G1 = 1,
    G2 = 2,
    B = 3,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::R, Channel::G1, Channel::G2, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::R => "R",
            Channel::G1 => "G1",
            Channel::G2 => "G2",
            Channel::B => "B",
        }
    }
}

impl BayerPhase {
    pub const ALL: [BayerPhase; 4] = [BayerPhase::Rggb, BayerPhase::Grbg, BayerPhase::Gbrg, BayerPhase::Bggr];

    /// Channels at period offsets (0,0), (0,1), (1,0), (1,1).
    pub fn layout(self) -> [Channel; 4] {
        use Channel::*;
        match self {
            BayerPhase::Rggb => [R, G1, G2, B],
            BayerPhase::Grbg => [G1, R, B, G2],
            BayerPhase::Gbrg => [G1, B, R, G2],
            BayerPhase::Bggr => [B, G1, G2, R],
        }
    }

    /// Channel sampled at image position `(row, col)`.
    #[inline]
    pub fn channel_at(self, row: usize, col: usize) -> Channel {
        self.layout()[((row & 1) << 1) | (col & 1)]
    }

    /// Period offset `(dy, dx)` of `ch`.
    pub fn offset_of(self, ch: Channel) -> (usize, usize) {
        let k = self.layout().iter().position(|&c| c == ch).unwrap();
        (k >> 1, k & 1)
    }

    pub fn to_u8(self) -> u8 {
        match self {
            BayerPhase::Rggb => 0,
            BayerPhase::Grbg => 1,
            BayerPhase::Gbrg => 2,
            BayerPhase::Bggr => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        BayerPhase::ALL.get(v as usize).copied().ok_or_else(|| Error::Format(format!("unknown bayer phase code {v}")))
    }
}

impl fmt::Display for BayerPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BayerPhase::Rggb => "RGGB",
            BayerPhase::Grbg => "GRBG",
            BayerPhase::Gbrg => "GBRG",
            BayerPhase::Bggr => "BGGR",
        })
    }
}

impl FromStr for BayerPhase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGGB" => Ok(BayerPhase::Rggb),
            "GRBG" => Ok(BayerPhase::Grbg),
            "GBRG" => Ok(BayerPhase::Gbrg),
            "BGGR" => Ok(BayerPhase::Bggr),
            _ => Err(Error::Invalid(format!("unknown bayer phase '{s}'"))),
        }
    }
}

/// A row-major grid of samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "plane {width}x{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Self {
        Plane { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.data[row * self.width + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u16]> {
        self.data.chunks(self.width.max(1))
    }
}

/// A raw Bayer mosaic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MosaicImage {
    width: usize,
    height: usize,
    bit_depth: u8,
    phase: BayerPhase,
    samples: Vec<u16>,
}

pub const MIN_BIT_DEPTH: u8 = 8;
pub const MAX_BIT_DEPTH: u8 = 16;

pub(crate) fn check_bit_depth(bit_depth: u8) -> Result<()> {
    if !(MIN_BIT_DEPTH..=MAX_BIT_DEPTH).contains(&bit_depth) {
        return Err(Error::Range(format!("bit depth {bit_depth} outside [{MIN_BIT_DEPTH}, {MAX_BIT_DEPTH}]")));
    }
    Ok(())
}

impl MosaicImage {
    pub fn new(width: usize, height: usize, bit_depth: u8, phase: BayerPhase, samples: Vec<u16>) -> Result<Self> {
        check_bit_depth(bit_depth)?;
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(Error::Dimension(format!("mosaic dimensions must be positive and even, got {width}x{height}")));
        }
        if samples.len() != width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} mosaic needs {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        let max = max_sample(bit_depth);
        if let Some(pos) = samples.iter().position(|&s| u32::from(s) > max) {
            return Err(Error::Range(format!("sample {} at index {pos} exceeds {bit_depth}-bit range", samples[pos])));
        }
        Ok(MosaicImage { width, height, bit_depth, phase, samples })
    }

    pub fn filled(width: usize, height: usize, bit_depth: u8, phase: BayerPhase, v: u16) -> Result<Self> {
        Self::new(width, height, bit_depth, phase, vec![v; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn phase(&self) -> BayerPhase {
        self.phase
    }

    pub fn samples(&self) -> &[u16] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<u16> {
        self.samples
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.samples[row * self.width + col]
    }

    pub fn channel_at(&self, row: usize, col: usize) -> Channel {
        self.phase.channel_at(row, col)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Largest representable sample at `bit_depth`.
#[inline]
pub fn max_sample(bit_depth: u8) -> u32 {
    (1u32 << bit_depth) - 1
}

/// The four per-channel planes of a mosaic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubImages {
    /// Indexed by [`Channel::index`].
    pub planes: [Plane; 4],
    pub bit_depth: u8,
}

impl SubImages {
    pub fn plane(&self, ch: Channel) -> &Plane {
        &self.planes[ch.index()]
    }
}

/// De-interleave a mosaic into its R, G1, G2, B planes.
pub fn bayer_split(img: &MosaicImage) -> SubImages {
    let (pw, ph) = (img.width / 2, img.height / 2);
    let planes = Channel::ALL.map(|ch| {
        let (dy, dx) = img.phase.offset_of(ch);
        let mut data = Vec::with_capacity(pw * ph);
        for i in 0..ph {
            let row = &img.samples[(2 * i + dy) * img.width..][..img.width];
            data.extend(row.iter().skip(dx).step_by(2));
        }
        Plane { width: pw, height: ph, data }
    });
    SubImages { planes, bit_depth: img.bit_depth }
}

/// Re-interleave four planes under `phase`; exact inverse of [`bayer_split`].
pub fn bayer_merge(subs: &SubImages, phase: BayerPhase) -> Result<MosaicImage> {
    let (pw, ph) = (subs.planes[0].width, subs.planes[0].height);
    if subs.planes.iter().any(|p| p.width != pw || p.height != ph || p.data.len() != pw * ph) {
        return Err(Error::Dimension("sub-image planes differ in shape".into()));
    }
    let (w, h) = (2 * pw, 2 * ph);
    let mut samples = vec![0u16; w * h];
    for ch in Channel::ALL {
        let (dy, dx) = phase.offset_of(ch);
        let plane = &subs.planes[ch.index()];
        for i in 0..ph {
            for j in 0..pw {
                samples[(2 * i + dy) * w + 2 * j + dx] = plane.get(i, j);
            }
        }
    }
    MosaicImage::new(w, h, subs.bit_depth, phase, samples)
}

/// Pull the two quincunx green lattices out as rectangular planes.
pub fn g_separate(img: &MosaicImage) -> (Plane, Plane) {
    let [_, g1, g2, _] = bayer_split(img).planes;
    (g1, g2)
}

/// Column-interleave two green planes: G1 at even columns, G2 at odd.
pub fn g_merge(g1: &Plane, g2: &Plane) -> Result<Plane> {
    if g1.width != g2.width || g1.height != g2.height {
        return Err(Error::Dimension(format!(
            "green planes differ: {}x{} vs {}x{}",
            g1.width, g1.height, g2.width, g2.height
        )));
    }
    let data = g1.data.iter().zip(&g2.data).flat_map(|(&a, &b)| [a, b]).collect();
    Ok(Plane { width: 2 * g1.width, height: g1.height, data })
}

/// Inverse of [`g_merge`].
pub fn g_unmerge(merged: &Plane) -> Result<(Plane, Plane)> {
    if !merged.width.is_multiple_of(2) {
        return Err(Error::Dimension("merged green plane has odd width".into()));
    }
    let w = merged.width / 2;
    let g1 = merged.data.iter().step_by(2).copied().collect();
    let g2 = merged.data.iter().skip(1).step_by(2).copied().collect();
    Ok((Plane { width: w, height: merged.height, data: g1 }, Plane { width: w, height: merged.height, data: g2 }))
}

/// Mirror `i` into `[0, n)` without repeating the edge sample. The image axis
/// position and its mirror always share parity, so the Bayer channel is kept.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Extend `img` by `margin` rows on top and `margin` columns on the left using
/// phase-preserving reflection. Original samples end up at `(r + margin, c + margin)`.
pub fn pad_causal(img: &MosaicImage, margin: usize) -> Result<MosaicImage> {
    if !margin.is_multiple_of(2) {
        return Err(Error::Invalid(format!("padding margin must be even, got {margin}")));
    }
    let (w, h) = (img.width + margin, img.height + margin);
    let mut samples = Vec::with_capacity(w * h);
    for y in 0..h {
        let sy = reflect(y as isize - margin as isize, img.height);
        for x in 0..w {
            let sx = reflect(x as isize - margin as isize, img.width);
            samples.push(img.get(sy, sx));
        }
    }
    MosaicImage::new(w, h, img.bit_depth, img.phase, samples)
}

/// Extend `img` by `margin` zero rows on top and zero columns on the left.
///
/// This is the border the codec uses: unlike reflection it depends on no
/// sample, so a decoder can rebuild it before anything is decoded.
pub fn pad_zero(img: &MosaicImage, margin: usize) -> Result<MosaicImage> {
    if !margin.is_multiple_of(2) {
        return Err(Error::Invalid(format!("padding margin must be even, got {margin}")));
    }
    let w = img.width + margin;
    let mut samples = vec![0u16; w * (img.height + margin)];
    for (y, row) in img.samples.chunks(img.width).enumerate() {
        samples[(y + margin) * w + margin..][..img.width].copy_from_slice(row);
    }
    MosaicImage::new(w, img.height + margin, img.bit_depth, img.phase, samples)
}
