#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use mosaic_codec::io::read_image;
use mosaic_codec::{MosaicImage, NetworkGraph};

pub const NATURAL: [&str; 5] =
    ["astronaut_rggb8.pgm", "chelsea_rggb8.pgm", "coffee_rggb8.pgm", "motorcycle_rggb8.pgm", "rocket_rggb8.pgm"];

pub const LARGE: &str = "retina_rggb8_1mp.pgm";

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn load(name: &str) -> MosaicImage {
    read_image(&fixture(name), None, None).unwrap()
}

pub fn tiny_graph(bit_depth: u8) -> Arc<NetworkGraph> {
    let bytes = std::fs::read(fixture(&format!("tiny_{bit_depth}.mipw"))).unwrap();
    Arc::new(mosaic_codec::predictors::graph::load_graph(&bytes).unwrap())
}

/// Even-sized window of `img` starting at an even position.
pub fn crop(img: &MosaicImage, row: usize, col: usize, h: usize, w: usize) -> MosaicImage {
    let s = (row..row + h).flat_map(|y| (col..col + w).map(move |x| img.get(y, x))).collect();
    MosaicImage::new(w, h, img.bit_depth(), img.phase(), s).unwrap()
}

/// The 8-bit image widened to 14 bits, with low-order noise so the extra
/// bits are not trivially zero.
pub fn widen_to_14(img: &MosaicImage, seed: u64) -> MosaicImage {
    let mut state = seed | 1;
    let s = img
        .samples()
        .iter()
        .map(|&v| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (v << 6) | (state & 63) as u16
        })
        .collect();
    MosaicImage::new(img.width(), img.height(), 14, img.phase(), s).unwrap()
}
