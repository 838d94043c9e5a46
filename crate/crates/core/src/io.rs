//! Mosaic containers: binary PGM (P5) and the headered `MIPR` raw format.
//!
//! `MIPR` layout, little-endian:
//!
//! ```text
//! "MIPR" | width u32 | height u32 | bit_depth u8 | phase u8 | samples u16 * width * height
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mosaic::{BayerPhase, MosaicImage, MAX_BIT_DEPTH, MIN_BIT_DEPTH};

pub const RAW_MAGIC: &[u8; 4] = b"MIPR";

/// Bit depth implied by a PGM maxval: exact when `maxval = 2^d - 1`,
/// otherwise the smallest depth that holds it (never below 8).
fn depth_for_maxval(maxval: u32) -> u8 {
    let bits = 32 - maxval.leading_zeros();
    (bits as u8).max(MIN_BIT_DEPTH)
}

pub fn decode_pgm(bytes: &[u8], phase: BayerPhase, bit_depth: Option<u8>) -> Result<MosaicImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (P5) file".into()));
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PGM header".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed PGM header".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields.map(|v| v as usize);
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    let depth = bit_depth.unwrap_or_else(|| depth_for_maxval(maxval as u32));
    let wide = maxval > 255;
    let n = width * height;
    let data = &bytes[pos..];
    let need = if wide { 2 * n } else { n };
    if data.len() < need {
        return Err(Error::Format(format!("PGM pixel data truncated ({} of {need} bytes)", data.len())));
    }
    let samples = if wide {
        data[..need].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect()
    } else {
        data[..n].iter().map(|&b| u16::from(b)).collect()
    };
    MosaicImage::new(width, height, depth, phase, samples)
}

pub fn encode_pgm(img: &MosaicImage) -> Vec<u8> {
    let maxval = (1u32 << img.bit_depth()) - 1;
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval).into_bytes();
    if maxval <= 255 {
        out.extend(img.samples().iter().map(|&s| s as u8));
    } else {
        for s in img.samples() {
            out.extend_from_slice(&s.to_be_bytes());
        }
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> Result<MosaicImage> {
    if bytes.len() < 14 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("not a MIPR raw mosaic".into()));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let depth = bytes[12];
    let phase = BayerPhase::from_u8(bytes[13])?;
    let data = &bytes[14..];
    if data.len() != 2 * width * height {
        return Err(Error::Format(format!(
            "MIPR sample data is {} bytes, expected {}",
            data.len(),
            2 * width * height
        )));
    }
    let samples = data.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    MosaicImage::new(width, height, depth, phase, samples)
}

pub fn encode_raw(img: &MosaicImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(14 + 2 * img.pixel_count());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.push(img.bit_depth());
    out.push(img.phase().to_u8());
    for s in img.samples() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Decode either container, sniffing the magic. `phase` and `bit_depth`
/// override what the file says (PGM carries no phase; RGGB if none given).
pub fn decode_image(bytes: &[u8], phase: Option<BayerPhase>, bit_depth: Option<u8>) -> Result<MosaicImage> {
    if let Some(d) = bit_depth {
        if !(MIN_BIT_DEPTH..=MAX_BIT_DEPTH).contains(&d) {
            return Err(Error::Invalid(format!("bit depth {d} outside [8, 16]")));
        }
    }
    if bytes.starts_with(RAW_MAGIC) {
        let img = decode_raw(bytes)?;
        if phase.is_none() && bit_depth.is_none() {
            return Ok(img);
        }
        let (w, h) = (img.width(), img.height());
        let p = phase.unwrap_or(img.phase());
        let d = bit_depth.unwrap_or(img.bit_depth());
        return MosaicImage::new(w, h, d, p, img.into_samples());
    }
    decode_pgm(bytes, phase.unwrap_or(BayerPhase::Rggb), bit_depth)
}

pub fn read_image(path: &Path, phase: Option<BayerPhase>, bit_depth: Option<u8>) -> Result<MosaicImage> {
    decode_image(&fs::read(path)?, phase, bit_depth)
}

/// Write `bytes` to `path` through a temporary file in the same directory,
/// so a failure never leaves a partial output behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Container chosen from the output extension: `.mipr` raw, otherwise PGM.
pub fn encode_for_path(path: &Path, img: &MosaicImage) -> Vec<u8> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("mipr") => encode_raw(img),
        _ => encode_pgm(img),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_8bit_round_trip() {
        let img = MosaicImage::new(4, 2, 8, BayerPhase::Rggb, vec![0, 1, 2, 3, 250, 251, 252, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n4 2\n255\n"));
        assert_eq!(decode_pgm(&bytes, BayerPhase::Rggb, None).unwrap(), img);
    }

    #[test]
    fn pgm_wide_is_big_endian() {
        let img = MosaicImage::new(2, 2, 14, BayerPhase::Gbrg, vec![0x1234, 1, 2, 16383]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n2 2\n16383\n"));
        let data = &bytes[bytes.len() - 8..];
        assert_eq!(&data[..2], &[0x12, 0x34]);
        assert_eq!(decode_pgm(&bytes, BayerPhase::Gbrg, None).unwrap(), img);
    }

    #[test]
    fn pgm_header_comments_and_overrides() {
        let mut bytes = b"P5\n# a comment\n2 2\n# another\n65535\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 0, 2, 0x3f, 0xff, 0, 4]);
        let img = decode_pgm(&bytes, BayerPhase::Bggr, None).unwrap();
        assert_eq!(img.bit_depth(), 16);
        assert_eq!(img.samples(), &[1, 2, 0x3fff, 4]);
        let img = decode_image(&bytes, Some(BayerPhase::Bggr), Some(14)).unwrap();
        assert_eq!(img.bit_depth(), 14);
        assert!(decode_image(&bytes, None, Some(12)).is_err());
    }

    #[test]
    fn pgm_errors() {
        assert!(matches!(decode_pgm(b"P2\n2 2\n255\n", BayerPhase::Rggb, None), Err(Error::Format(_))));
        assert!(matches!(decode_pgm(b"P5\n2 2\n255\n\x01", BayerPhase::Rggb, None), Err(Error::Format(_))));
        assert!(matches!(
            decode_pgm(b"P5\n3 2\n255\n\x01\x02\x03\x04\x05\x06", BayerPhase::Rggb, None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn raw_round_trip_and_sniffing() {
        let img = MosaicImage::new(2, 4, 12, BayerPhase::Grbg, (0..8).map(|v| v * 500).collect()).unwrap();
        let bytes = encode_raw(&img);
        assert_eq!(&bytes[..4], b"MIPR");
        assert_eq!(bytes.len(), 14 + 16);
        assert_eq!(decode_image(&bytes, None, None).unwrap(), img);
        assert!(decode_raw(&bytes[..20]).is_err());
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        write_atomic(&p, b"hello").unwrap();
        write_atomic(&p, b"hi").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"hi");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
