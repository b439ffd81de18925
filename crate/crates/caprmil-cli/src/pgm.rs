//! Binary portable graymap (P5) writing and reading — byte-exact and
//! dependency-free, which keeps heatmap exports diffable.

use std::io::Write;
#[cfg(test)]
use std::io::Read;
use std::path::Path;

use caprmil::{Error, Result};

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path.display().to_string(), source)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "{} pixels for {width}x{height} graymap",
            pixels.len()
        )));
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(format!("P5\n{width} {height}\n255\n").as_bytes())
        .map_err(|e| io_err(path, e))?;
    file.write_all(pixels).map_err(|e| io_err(path, e))
}

/// Returns `(width, height, pixels)`.
#[cfg(test)]
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| io_err(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| io_err(path, e))?;
    let bad = |what: &str| Error::format(format!("{}: {what}", path.display()));
    // header is three whitespace-separated tokens after the magic, then a
    // single whitespace byte before the raster
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(bad("not a P5 graymap"));
    }
    let width: usize = token(&mut pos)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&mut pos)?.parse().map_err(|_| bad("bad height"))?;
    if token(&mut pos)? != "255" {
        return Err(bad("expected maxval 255"));
    }
    pos += 1; // the single whitespace separating header from raster
    let raster = bytes
        .get(pos..pos + width * height)
        .ok_or_else(|| bad("truncated raster"))?;
    if pos + width * height != bytes.len() {
        return Err(bad("trailing bytes after raster"));
    }
    Ok((width, height, raster.to_vec()))
}
