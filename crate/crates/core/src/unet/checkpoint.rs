//! Versioned binary checkpoints.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic        8 bytes  "UNSQCKPT"
//! version      u32      = 1
//! config       u32 start_channels, u32 levels, u32 in_channels,
//!              u32 out_classes, u8 batch_norm_contracting, u8 count_mode
//! seed         u64
//! tensors      u32 count, then per tensor:
//!              u32 name length, name (UTF-8), 4 x u32 shape (n, c, h, w),
//!              n*c*h*w x f64 values
//! ```
//!
//! Tensors are the trainable parameters in registration order followed by
//! `<block>.bn.running_mean` / `<block>.bn.running_var` (shape `c x 1 x 1 x 1`)
//! and the scalars `<block>.bn.momentum` / `<block>.bn.epsilon` for every
//! batch-norm layer.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{ParamCountMode, UnetConfig, UnetModel};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UNSQCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

type Entry = (String, Shape, Vec<f64>);

fn entries<T: Real>(model: &UnetModel<T>) -> Vec<Entry> {
    let mut out: Vec<Entry> = model
        .named_parameters()
        .into_iter()
        .map(|(name, t)| (name, t.shape(), t.to_f64_vec()))
        .collect();
    for (prefix, norm) in model.norm_prefixes().into_iter().zip(model.norms()) {
        let c = norm.channels();
        let vec = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
        out.push((
            format!("{prefix}.bn.running_mean"),
            Shape::new(c, 1, 1, 1),
            vec(&norm.running_mean),
        ));
        out.push((
            format!("{prefix}.bn.running_var"),
            Shape::new(c, 1, 1, 1),
            vec(&norm.running_var),
        ));
        out.push((
            format!("{prefix}.bn.momentum"),
            Shape::scalar(),
            vec![norm.momentum],
        ));
        out.push((
            format!("{prefix}.bn.epsilon"),
            Shape::scalar(),
            vec![norm.epsilon],
        ));
    }
    out
}

impl<T: Real> UnetModel<T> {
    fn norm_prefixes(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (l, level) in self.encoder.iter().enumerate() {
            for (i, b) in level.blocks.iter().enumerate() {
                if b.norm.is_some() {
                    out.push(format!("enc{l}.conv{}", i + 1));
                }
            }
        }
        for level in &self.decoder {
            for (i, b) in level.blocks.iter().enumerate() {
                if b.norm.is_some() {
                    out.push(format!("dec{}.conv{}", level.level, i + 1));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let c = &self.config;
        // Writes into a Vec cannot fail.
        let w = &mut buf;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        for v in [c.start_channels, c.levels, c.in_channels, c.out_classes] {
            w.write_u32::<LittleEndian>(v as u32).unwrap();
        }
        w.write_u8(c.batch_norm_contracting as u8).unwrap();
        w.write_u8(match c.param_count_mode {
            ParamCountMode::Plain => 0,
            ParamCountMode::PaperCompat => 1,
        })
        .unwrap();
        w.write_u64::<LittleEndian>(self.seed).unwrap();
        let tensors = entries(self);
        w.write_u32::<LittleEndian>(tensors.len() as u32).unwrap();
        for (name, shape, values) in tensors {
            w.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            w.extend_from_slice(name.as_bytes());
            for d in shape.dims() {
                w.write_u32::<LittleEndian>(d as u32).unwrap();
            }
            for v in values {
                w.write_f64::<LittleEndian>(v).unwrap();
            }
        }
        buf
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let u32_ = |r: &mut Cursor<&[u8]>| r.read_u32::<LittleEndian>().map_err(|_| Error::Truncated);
        let start_channels = u32_(&mut r)? as usize;
        let levels = u32_(&mut r)? as usize;
        let in_channels = u32_(&mut r)? as usize;
        let out_classes = u32_(&mut r)? as usize;
        let bn = r.read_u8().map_err(|_| Error::Truncated)?;
        let mode = r.read_u8().map_err(|_| Error::Truncated)?;
        let seed = r.read_u64::<LittleEndian>().map_err(|_| Error::Truncated)?;
        let config = UnetConfig {
            start_channels,
            levels,
            in_channels,
            out_classes,
            batch_norm_contracting: bn != 0,
            param_count_mode: if mode == 1 {
                ParamCountMode::PaperCompat
            } else {
                ParamCountMode::Plain
            },
        };
        config.validate()?;

        let count = u32_(&mut r)? as usize;
        let mut stored = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32_(&mut r)? as usize;
            if len > bytes.len() {
                return Err(Error::Truncated);
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| Error::Truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format {
                kind: "checkpoint",
                path: Default::default(),
                msg: "tensor name is not UTF-8".into(),
            })?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = u32_(&mut r)? as usize;
            }
            let shape = Shape::from(dims);
            let remaining = bytes.len() - r.position() as usize;
            if shape.len().checked_mul(8).is_none_or(|b| b > remaining) {
                return Err(Error::Truncated);
            }
            let mut values = vec![0.0; shape.len()];
            r.read_f64_into::<LittleEndian>(&mut values)
                .map_err(|_| Error::Truncated)?;
            stored.push((name, shape, values));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                path: Default::default(),
                msg: "trailing bytes after last tensor".into(),
            });
        }

        let mut model = UnetModel::<T>::build(&config, seed)?;
        let expected = entries(&model);
        if expected.len() != stored.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                path: Default::default(),
                msg: format!("expected {} tensors, found {}", expected.len(), stored.len()),
            });
        }
        for ((want_name, want_shape, _), (name, shape, _)) in expected.iter().zip(&stored) {
            if want_name != name {
                return Err(Error::Format {
                    kind: "checkpoint",
                    path: Default::default(),
                    msg: format!("expected tensor `{want_name}`, found `{name}`"),
                });
            }
            if want_shape != shape {
                return Err(Error::CheckpointShape {
                    name: name.clone(),
                    expected: want_shape.to_string(),
                    found: shape.to_string(),
                });
            }
        }

        let mut values = stored.into_iter().map(|(_, _, v)| v);
        for p in model.parameters_mut() {
            let v = values.next().expect("count checked");
            *p = Tensor::new(p.shape(), v.into_iter().map(T::lit).collect())?;
        }
        for norm in model.norms_mut() {
            let cast = |v: Vec<f64>| v.into_iter().map(T::lit).collect::<Vec<T>>();
            norm.running_mean = cast(values.next().expect("count checked"));
            norm.running_var = cast(values.next().expect("count checked"));
            norm.momentum = values.next().expect("count checked")[0];
            norm.epsilon = values.next().expect("count checked")[0];
        }
        Ok(model)
    }
}

pub fn save_checkpoint<T: Real>(model: &UnetModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<UnetModel<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    UnetModel::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::build;

    fn model() -> UnetModel {
        let mut m: UnetModel = build(&UnetConfig::new(2).with_batch_norm(true), 3).unwrap();
        m.encoder[1].blocks[0].norm.as_mut().unwrap().running_mean[1] = 0.125;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back: UnetModel = UnetModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncation_is_detected_at_every_cut() {
        let bytes = model().to_bytes();
        for cut in [0, 5, 8, 12, 30, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(UnetModel::<f64>::from_bytes(&bytes[..cut]), Err(Error::Truncated)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn magic_and_version() {
        let mut bytes = model().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            UnetModel::<f64>::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            UnetModel::<f64>::from_bytes(&bytes),
            Err(Error::BadMagic)
        ));
    }

    #[test]
    fn shape_mismatch_against_config() {
        let mut bytes = model().to_bytes();
        // start_channels lives right after magic + version.
        bytes[12] = 4;
        assert!(matches!(
            UnetModel::<f64>::from_bytes(&bytes),
            Err(Error::CheckpointShape { .. })
        ));
    }
}
