//! Binary PGM (P5) and PPM (P6) reading and writing, maxval 255 only.
//!
//! The 8-bit raster round-trips exactly: write(read(x)) == x.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channels innermost.
    pub pixels: Vec<u8>,
}

/// Parse a P5/P6 header token, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(bytes[start..*pos].to_vec())
}

pub fn parse_pnm(bytes: &[u8], origin: &Path) -> Result<PnmImage> {
    let bad = |msg: &str| Error::format(origin, msg);
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos).ok_or_else(|| bad("missing magic"))?;
    let channels = match magic.as_slice() {
        b"P5" => 1,
        b"P6" => 3,
        other => {
            return Err(bad(&format!(
                "unsupported magic {:?} (binary P5/P6 only)",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let mut dim = |name: &str| -> Result<usize> {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| bad(&format!("missing {name}")))?;
        std::str::from_utf8(&tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(&format!("malformed {name}")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported (must be 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing raster separator"));
    }
    pos += 1;
    let expected = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() != expected {
        return Err(bad(&format!(
            "raster holds {} bytes, expected {expected}",
            raster.len()
        )));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        pixels: raster.to_vec(),
    })
}

pub fn read_pnm(path: &Path) -> Result<PnmImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pnm(&bytes, path)
}

pub fn encode(image: &PnmImage) -> Vec<u8> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_pnm(path: &Path, image: &PnmImage) -> Result<()> {
    debug_assert_eq!(
        image.pixels.len(),
        image.width * image.height * image.channels
    );
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode(image)).map_err(|e| Error::io(path, e))?;
    Ok(())
}
