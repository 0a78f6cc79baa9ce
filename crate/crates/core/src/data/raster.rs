//! Multi-channel 64-bit raster container for soft targets.
//!
//! ```text
//! magic     8 bytes "UNSQRAST"
//! version   u32 = 1
//! channels  u32
//! height    u32
//! width     u32
//! values    channels*height*width x f64, channel-major, little-endian
//! ```

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const RASTER_MAGIC: &[u8; 8] = b"UNSQRAST";
pub const RASTER_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 * 4;

/// Encodes a `1 x c x h x w` tensor.
pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.n != 1 {
        return Err(Error::invalid(
            "raster::encode",
            format!("expected one sample, got {s}"),
        ));
    }
    let mut out = vec![0u8; HEADER + 8 * t.len()];
    out[..8].copy_from_slice(RASTER_MAGIC);
    LittleEndian::write_u32(&mut out[8..12], RASTER_VERSION);
    LittleEndian::write_u32(&mut out[12..16], s.c as u32);
    LittleEndian::write_u32(&mut out[16..20], s.h as u32);
    LittleEndian::write_u32(&mut out[20..24], s.w as u32);
    for (chunk, v) in out[HEADER..].chunks_exact_mut(8).zip(t.data()) {
        LittleEndian::write_f64(chunk, v.as_f64());
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let bad = |msg: String| Error::Format {
        kind: "raster",
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER {
        return Err(bad("truncated header".into()));
    }
    if &bytes[..8] != RASTER_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = LittleEndian::read_u32(&bytes[8..12]);
    if version != RASTER_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dims = |i: usize| LittleEndian::read_u32(&bytes[i..i + 4]) as usize;
    let shape = Shape::new(1, dims(12), dims(16), dims(20));
    if bytes.len() != HEADER + 8 * shape.len() {
        return Err(bad(format!(
            "expected {} value bytes for {shape}, found {}",
            8 * shape.len(),
            bytes.len() - HEADER
        )));
    }
    let values = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| T::lit(LittleEndian::read_f64(c)))
        .collect();
    Tensor::new(shape, values)
}

pub fn write<T: Real>(path: &Path, t: &Tensor<T>) -> Result<Vec<u8>> {
    let bytes = encode(t)?;
    std::fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn read<T: Real>(path: &Path) -> Result<(Tensor<T>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    Ok((decode(&bytes, path)?, bytes))
}
