//! Causal contexts for block prediction and variance features for the coder.

use crate::error::{Error, Result};
use crate::mosaic::{BayerPhase, Channel, MosaicImage, Plane, SubImages};
use crate::par::{self, ExecMode};

/// Side length of each square prediction context.
pub const CONTEXT_SIZE: usize = 64;

/// Side length of the predicted block.
pub const BLOCK: usize = 2;

/// Two causal windows around a 2x2 block at `block_origin`.
///
/// `top` covers rows `[r-64, r)` and columns `[c-62, c+2)`; `left` covers rows
/// `[r-62, r+2)` and columns `[c-64, c)`. Both start on even coordinates so
/// their Bayer phase equals the image phase.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextPair {
    pub top: Vec<u16>,
    pub left: Vec<u16>,
    pub block_origin: (usize, usize),
}

impl ContextPair {
    #[inline]
    pub fn top_at(&self, row: usize, col: usize) -> u16 {
        self.top[row * CONTEXT_SIZE + col]
    }

    #[inline]
    pub fn left_at(&self, row: usize, col: usize) -> u16 {
        self.left[row * CONTEXT_SIZE + col]
    }
}

/// Image-frame origin `(row, col)` of the top and left windows for a block.
pub fn context_origins(block_origin: (usize, usize)) -> ((isize, isize), (isize, isize)) {
    let (r, c) = (block_origin.0 as isize, block_origin.1 as isize);
    let n = CONTEXT_SIZE as isize;
    let b = BLOCK as isize;
    ((r - n, c + b - n), (r + b - n, c - n))
}

/// Borrowed sample grid with mosaic metadata. The decoder predicts from a
/// partially reconstructed canvas through this view.
#[derive(Debug, Clone, Copy)]
pub struct CanvasView<'a> {
    pub samples: &'a [u16],
    pub width: usize,
    pub height: usize,
    pub phase: BayerPhase,
    pub bit_depth: u8,
}

impl CanvasView<'_> {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u16 {
        self.samples[row * self.width + col]
    }
}

impl MosaicImage {
    pub fn view(&self) -> CanvasView<'_> {
        CanvasView {
            samples: self.samples(),
            width: self.width(),
            height: self.height(),
            phase: self.phase(),
            bit_depth: self.bit_depth(),
        }
    }
}

pub fn extract_context_pair(img: &MosaicImage, block_origin: (usize, usize)) -> Result<ContextPair> {
    extract_from_view(&img.view(), block_origin)
}

/// Check that both windows of a block fit inside `img`.
pub fn check_block_origin(img: &CanvasView<'_>, block_origin: (usize, usize)) -> Result<()> {
    let (r, c) = block_origin;
    if r % 2 != 0 || c % 2 != 0 {
        return Err(Error::Invalid(format!("block origin ({r}, {c}) is not on the Bayer grid")));
    }
    if r < CONTEXT_SIZE || c < CONTEXT_SIZE || r + BLOCK > img.height || c + BLOCK > img.width {
        return Err(Error::Range(format!(
            "context windows for block ({r}, {c}) fall outside the {}x{} image",
            img.width, img.height
        )));
    }
    Ok(())
}

pub fn extract_from_view(img: &CanvasView<'_>, block_origin: (usize, usize)) -> Result<ContextPair> {
    check_block_origin(img, block_origin)?;
    let ((tr, tc), (lr, lc)) = context_origins(block_origin);
    Ok(ContextPair {
        top: copy_window(img, tr as usize, tc as usize),
        left: copy_window(img, lr as usize, lc as usize),
        block_origin,
    })
}

fn copy_window(img: &CanvasView<'_>, row0: usize, col0: usize) -> Vec<u16> {
    let mut out = Vec::with_capacity(CONTEXT_SIZE * CONTEXT_SIZE);
    let w = img.width;
    for y in row0..row0 + CONTEXT_SIZE {
        out.extend_from_slice(&img.samples[y * w + col0..][..CONTEXT_SIZE]);
    }
    out
}

/// Local-activity feature of one sample, used to pick its coding class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceFeature {
    pub value: f64,
    pub channel: Channel,
}

/// Population variance of the causal same-channel neighbours W, N, NW, NE of
/// plane position `(i, j)`.
///
/// Neighbours outside the plane are dropped rather than reflected, because a
/// reflected neighbour would lie in the decoder's future. With no neighbour
/// at all (the first sample) the feature is 0.
pub fn variance_feature(plane: &Plane, channel: Channel, pos: (usize, usize)) -> VarianceFeature {
    VarianceFeature { value: causal_variance(plane, pos.0, pos.1), channel }
}

#[inline]
pub(crate) fn causal_variance(plane: &Plane, i: usize, j: usize) -> f64 {
    let mut n = 0u64;
    let mut s = 0u64;
    let mut q = 0u64;
    let mut add = |v: u16| {
        let v = u64::from(v);
        n += 1;
        s += v;
        q += v * v;
    };
    if j > 0 {
        add(plane.get(i, j - 1));
    }
    if i > 0 {
        add(plane.get(i - 1, j));
        if j > 0 {
            add(plane.get(i - 1, j - 1));
        }
        if j + 1 < plane.width {
            add(plane.get(i - 1, j + 1));
        }
    }
    population_variance(n, s, q)
}

/// `(n*q - s^2) / n^2` evaluated from exact integer moments.
#[inline]
pub(crate) fn population_variance(n: u64, s: u64, q: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let num = n * q - s * s;
    num as f64 / (n * n) as f64
}

/// Features for every position of one plane, row-major.
pub fn variance_map(plane: &Plane) -> Vec<f64> {
    let mut out = Vec::with_capacity(plane.data.len());
    for i in 0..plane.height {
        for j in 0..plane.width {
            out.push(causal_variance(plane, i, j));
        }
    }
    out
}

/// Feature maps for all four planes, indexed by [`Channel::index`].
pub fn feature_maps(subs: &SubImages, mode: ExecMode) -> [Vec<f64>; 4] {
    let maps = par::map_slice(mode, &subs.planes, variance_map);
    maps.try_into().expect("four planes")
}
