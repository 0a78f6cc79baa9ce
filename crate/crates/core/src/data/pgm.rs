//! Binary 8-bit PGM (`P5`) rasters.
//!
//! Written as `P5\n<width> <height>\n255\n` followed by `width * height`
//! bytes in row-major order. The reader accepts any whitespace and `#`
//! comments in the header and a maxval up to 255.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Gray8> {
    let bad = |msg: &str| Error::Format {
        kind: "PGM",
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    if token() != Some(b"P5".as_slice()) {
        return Err(bad("missing P5 magic"));
    }
    let mut number = |what: &str| -> Result<usize> {
        token()
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let width = number("width")?;
    let height = number("height")?;
    let maxval = number("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval (1..=255) is supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let len = width * height;
    if bytes.len() < start + len {
        return Err(bad("raster is truncated"));
    }
    if bytes.len() > start + len {
        return Err(bad("trailing bytes after raster"));
    }
    let mut pixels = bytes[start..].to_vec();
    if maxval != 255 {
        for p in &mut pixels {
            *p = ((*p as usize * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Ok(Gray8 {
        width,
        height,
        pixels,
    })
}

pub fn read(path: &Path) -> Result<(Gray8, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok((decode(&bytes, path)?, bytes))
}
