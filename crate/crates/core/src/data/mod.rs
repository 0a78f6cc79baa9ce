//! Synthetic blob segmentation data and on-disk datasets.
//!
//! A dataset split is a directory holding PGM images, PGM masks (0 or 255)
//! and a `manifest.json`:
//!
//! ```json
//! {
//!   "format": "unsq-dataset",
//!   "version": 1,
//!   "split": "train",
//!   "height": 64,
//!   "width": 64,
//!   "entries": [{"image": "img_0000.pgm", "mask": "mask_0000.pgm", "h": 64, "w": 64}],
//!   "stats": {"foreground": 6810, "background": 124262},
//!   "generator": { ...SynthConfig... } | null,
//!   "content_hash": "<sha256 hex>"
//! }
//! ```
//!
//! Entry paths are relative to the manifest's directory. The content hash is
//! the SHA-256 of, for every entry in order, the image file name, a zero byte,
//! the image file bytes, the mask file name, a zero byte and the mask bytes.

pub mod pgm;
pub mod raster;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};
use crate::unet::UnetConfig;

pub const MANIFEST_FORMAT: &str = "unsq-dataset";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Every dataset dimension must be a multiple of this (four 2x2 poolings).
pub const DIM_MULTIPLE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid("split", format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_train: usize,
    pub num_test: usize,
    pub height: usize,
    pub width: usize,
    /// Target fraction of foreground pixels, in (0, 0.5).
    pub foreground_fraction: f64,
    /// Inclusive range of the planned blob count per image; it sets the blob
    /// size, and blobs are then added until the foreground target is met.
    pub blob_count: (usize, usize),
    pub blob_radius: (f64, f64),
    pub background_level: f64,
    /// Amplitude of the smooth low-frequency background modulation.
    pub background_variation: f64,
    pub blob_intensity: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_train: 32,
            num_test: 16,
            height: 64,
            width: 64,
            foreground_fraction: 1.0 / 18.8,
            blob_count: (2, 5),
            blob_radius: (2.0, 24.0),
            background_level: 0.45,
            background_variation: 0.12,
            blob_intensity: 0.2,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("SynthConfig", msg));
        let f = self.foreground_fraction;
        if !(f > 0.0 && f < 0.5) {
            return bad(format!("foreground fraction must be in (0, 0.5), got {f}"));
        }
        if self.height == 0
            || self.width == 0
            || self.height % DIM_MULTIPLE != 0
            || self.width % DIM_MULTIPLE != 0
        {
            return Err(Error::IndivisibleDims {
                h: self.height,
                w: self.width,
                multiple: DIM_MULTIPLE,
            });
        }
        let target = self.target_pixels();
        if target < 1.0 {
            return Err(Error::UnreachableFraction(format!(
                "{f} of {}x{} is less than one pixel",
                self.height, self.width
            )));
        }
        let (lo, hi) = self.blob_count;
        if lo == 0 || lo > hi {
            return bad(format!("blob count range {lo}..={hi} is empty or zero"));
        }
        let (rmin, rmax) = self.blob_radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad(format!("blob radius range {rmin}..={rmax} is invalid"));
        }
        if 2.0 * rmax > self.height.min(self.width) as f64 {
            return bad(format!(
                "blob radius {rmax} does not fit a {}x{} image",
                self.height, self.width
            ));
        }
        // A single minimal blob must not overshoot the target by more than
        // the tolerated margin, and the maximal blobs must be able to reach it.
        if PI * rmin * rmin > 1.2 * target.max(1.0) + 1.0 {
            return Err(Error::UnreachableFraction(format!(
                "smallest blob ({:.1} px) exceeds the foreground target ({target:.1} px)",
                PI * rmin * rmin
            )));
        }
        if PI * rmax * rmax * (Self::MAX_PROPOSALS as f64) < target {
            return Err(Error::UnreachableFraction(format!(
                "blobs of radius <= {rmax} cannot cover {target:.1} px"
            )));
        }
        for (name, v) in [
            ("background_level", self.background_level),
            ("blob_intensity", self.blob_intensity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be >= 0, got {}", self.noise_std));
        }
        if !(self.background_variation >= 0.0 && self.background_variation.is_finite()) {
            return bad("background variation must be >= 0".into());
        }
        if self.num_train == 0 && self.num_test == 0 {
            return Err(Error::EmptyDataset("synthetic config has no images".into()));
        }
        Ok(())
    }

    const MAX_PROPOSALS: usize = 64;

    fn target_pixels(&self) -> f64 {
        self.foreground_fraction * (self.height * self.width) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub image: String,
    pub mask: String,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelStats {
    pub foreground: u64,
    pub background: u64,
}

impl PixelStats {
    pub fn fraction(&self) -> f64 {
        self.foreground as f64 / (self.foreground + self.background).max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    /// Directory the entries are relative to; set from the manifest location.
    #[serde(skip)]
    pub root: PathBuf,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<Entry>,
    pub stats: PixelStats,
    pub generator: Option<SynthConfig>,
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Format {
                kind: "manifest",
                path: path.to_path_buf(),
                msg: format!("unknown format {:?}", manifest.format),
            });
        }
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.version,
                expected: MANIFEST_VERSION,
            });
        }
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn write(&self) -> Result<()> {
        std::fs::create_dir_all(&self.root)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(self.path(), text + "\n")?;
        Ok(())
    }

    /// Builds a manifest for image/mask pairs already on disk in `root`,
    /// computing statistics and the content hash.
    pub fn for_files(root: impl AsRef<Path>, split: Split, pairs: &[(String, String)]) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mut hasher = Sha256::new();
        let mut entries = Vec::with_capacity(pairs.len());
        let mut stats = PixelStats {
            foreground: 0,
            background: 0,
        };
        for (image, mask) in pairs {
            let (img, img_bytes) = pgm::read(&root.join(image))?;
            let (m, mask_bytes) = pgm::read(&root.join(mask))?;
            let fg = count_mask(&m, &root.join(mask))?;
            stats.foreground += fg;
            stats.background += m.pixels.len() as u64 - fg;
            if (img.height, img.width) != (m.height, m.width) {
                return Err(Error::Format {
                    kind: "dataset",
                    path: root.join(mask),
                    msg: format!(
                        "mask is {}x{} but image is {}x{}",
                        m.height, m.width, img.height, img.width
                    ),
                });
            }
            hash_entry(&mut hasher, image, &img_bytes, mask, &mask_bytes);
            entries.push(Entry {
                image: image.clone(),
                mask: mask.clone(),
                h: img.height,
                w: img.width,
            });
        }
        let (height, width) = entries.first().map(|e| (e.h, e.w)).unwrap_or((0, 0));
        Ok(Self {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            root,
            split,
            height,
            width,
            entries,
            stats,
            generator: None,
            content_hash: hex::encode(hasher.finalize()),
        })
    }
}

fn hash_entry(hasher: &mut Sha256, image: &str, img: &[u8], mask: &str, m: &[u8]) {
    hasher.update(image.as_bytes());
    hasher.update([0u8]);
    hasher.update(img);
    hasher.update(mask.as_bytes());
    hasher.update([0u8]);
    hasher.update(m);
}

fn count_mask(mask: &pgm::Gray8, path: &Path) -> Result<u64> {
    let mut fg = 0;
    for (index, &p) in mask.pixels.iter().enumerate() {
        match p {
            0 => {}
            255 => fg += 1,
            _ => {
                return Err(Error::NonBinaryMask {
                    path: path.to_path_buf(),
                    index,
                    value: p as f64 / 255.0,
                })
            }
        }
    }
    Ok(fg)
}

/// Both splits written by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: DatasetManifest,
    pub test: DatasetManifest,
}

impl SyntheticDataset {
    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// One rendered sample: quantized image and mask bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub image: pgm::Gray8,
    pub mask: pgm::Gray8,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }
}

/// Renders one image/mask pair. Pixel centres sit at half-integer
/// coordinates; a pixel is foreground iff its centre lies in some ellipse.
fn render(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> SynthSample {
    let (h, w) = (cfg.height, cfg.width);
    let target = cfg.target_pixels();
    let (rmin, rmax) = cfg.blob_radius;
    let k = rng.random_range(cfg.blob_count.0..=cfg.blob_count.1);
    let r0 = (target / k as f64 / PI).sqrt();

    let mut mask = vec![false; h * w];
    let mut count = 0usize;
    for _ in 0..SynthConfig::MAX_PROPOSALS {
        let aspect: f64 = rng.random_range(0.6..1.6);
        let scale: f64 = rng.random_range(0.8..1.2);
        let rx = (r0 * scale * aspect.sqrt()).clamp(rmin, rmax);
        let ry = (r0 * scale / aspect.sqrt()).clamp(rmin, rmax);
        let margin = rx.max(ry);
        let e = Ellipse {
            cx: rng.random_range(margin..=(w as f64 - margin)),
            cy: rng.random_range(margin..=(h as f64 - margin)),
            rx,
            ry,
            angle: rng.random_range(0.0..PI),
        };
        let added: Vec<usize> = (0..h * w)
            .filter(|&i| !mask[i] && e.contains((i % w) as f64 + 0.5, (i / w) as f64 + 0.5))
            .collect();
        let next = count + added.len();
        // Stop at whichever side of the target is nearer.
        if next as f64 > target && (next as f64 - target) > (target - count as f64) {
            if count > 0 {
                break;
            }
        }
        for i in added {
            mask[i] = true;
        }
        count = next;
        if count as f64 >= target {
            break;
        }
    }

    let fx: f64 = rng.random_range(0.5..1.5);
    let fy: f64 = rng.random_range(0.5..1.5);
    let px: f64 = rng.random_range(0.0..1.0);
    let py: f64 = rng.random_range(0.0..1.0);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut image = Vec::with_capacity(h * w);
    for (i, &fg) in mask.iter().enumerate() {
        let x = (i % w) as f64 / w as f64;
        let y = (i / w) as f64 / h as f64;
        let base = if fg {
            cfg.blob_intensity
        } else {
            cfg.background_level
                + cfg.background_variation
                    * (2.0 * PI * (fx * x + px)).sin()
                    * (2.0 * PI * (fy * y + py)).cos()
        };
        let n = if cfg.noise_std > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        image.push(((base + n).clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    SynthSample {
        image: pgm::Gray8 {
            width: w,
            height: h,
            pixels: image,
        },
        mask: pgm::Gray8 {
            width: w,
            height: h,
            pixels: mask.iter().map(|&m| if m { 255 } else { 0 }).collect(),
        },
    }
}

/// Renders `n` samples for `split` without touching the disk. The train and
/// test splits draw from independent streams of the same seed.
pub fn synthesize(cfg: &SynthConfig, split: Split) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let n = match split {
        Split::Train => cfg.num_train,
        Split::Test => cfg.num_test,
    };
    let samples: Vec<_> = (0..n).map(|_| render(cfg, &mut rng)).collect();
    if n > 0 {
        let fg: usize = samples
            .iter()
            .map(|s| s.mask.pixels.iter().filter(|&&p| p == 255).count())
            .sum();
        let realized = fg as f64 / (n * cfg.height * cfg.width) as f64;
        let rel = (realized - cfg.foreground_fraction).abs() / cfg.foreground_fraction;
        if rel > 0.2 {
            return Err(Error::UnreachableFraction(format!(
                "{} split realized foreground fraction {realized:.4}, target {:.4}",
                split.name(),
                cfg.foreground_fraction
            )));
        }
    }
    Ok(samples)
}

/// Writes both splits under `root/train` and `root/test`.
pub fn generate_synthetic(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let root = root.as_ref();
    let write_split = |split: Split| -> Result<DatasetManifest> {
        let samples = synthesize(cfg, split)?;
        let dir = root.join(split.name());
        std::fs::create_dir_all(&dir)?;
        let mut pairs = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let image = format!("img_{i:04}.pgm");
            let mask = format!("mask_{i:04}.pgm");
            std::fs::write(dir.join(&image), pgm::encode(&s.image))?;
            std::fs::write(dir.join(&mask), pgm::encode(&s.mask))?;
            pairs.push((image, mask));
        }
        let mut manifest = DatasetManifest::for_files(&dir, split, &pairs)?;
        manifest.height = cfg.height;
        manifest.width = cfg.width;
        manifest.generator = Some(cfg.clone());
        manifest.write()?;
        Ok(manifest)
    };
    let train = write_split(Split::Train)?;
    let test = write_split(Split::Test)?;
    Ok(SyntheticDataset { train, test })
}

/// A loaded split: images in [0, 1] and {0, 1} masks, both `n x 1 x h x w`.
#[derive(Debug, Clone)]
pub struct Dataset<T: Real = f64> {
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
    pub manifest: DatasetManifest,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.shape().n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> PixelStats {
        self.manifest.stats
    }

    /// In-memory dataset from tensors; the manifest carries only statistics.
    pub fn from_tensors(images: Tensor<T>, masks: Tensor<T>, split: Split) -> Result<Self> {
        let s = images.shape();
        if s.c != 1 || masks.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "Dataset::from_tensors",
                expected: format!("n x 1 x h x w images and equal-shaped masks, got {s}"),
                got: masks.shape().to_string(),
            });
        }
        let mut fg = 0u64;
        for (index, &v) in masks.data().iter().enumerate() {
            if v == T::one() {
                fg += 1;
            } else if v != T::zero() {
                return Err(Error::NonBinaryMask {
                    path: PathBuf::from("<memory>"),
                    index,
                    value: v.as_f64(),
                });
            }
        }
        let manifest = DatasetManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            root: PathBuf::new(),
            split,
            height: s.h,
            width: s.w,
            entries: Vec::new(),
            stats: PixelStats {
                foreground: fg,
                background: masks.len() as u64 - fg,
            },
            generator: None,
            content_hash: String::new(),
        };
        Ok(Self {
            images,
            masks,
            manifest,
        })
    }

    /// Images and masks for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Tensor<T>) {
        (self.images.gather(indices), self.masks.gather(indices))
    }

    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Result<BatchIterator> {
        BatchIterator::new(self.len(), batch_size, seed, shuffle)
    }
}

/// Loads and validates a split. Checks run in this order: referenced files
/// exist, PGMs parse with binary masks, dimensions are multiples of 16, the
/// content hash matches, and the statistics match a recount.
pub fn load_dataset<T: Real>(manifest_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = &manifest.root;
    for e in &manifest.entries {
        for name in [&e.image, &e.mask] {
            let p = root.join(name);
            if !p.is_file() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    let (h, w) = (manifest.height, manifest.width);
    let n = manifest.entries.len();
    let mut images = Vec::with_capacity(n * h * w);
    let mut masks = Vec::with_capacity(n * h * w);
    let mut hasher = Sha256::new();
    let mut fg = 0u64;
    for e in &manifest.entries {
        let (img, img_bytes) = pgm::read(&root.join(&e.image))?;
        let mask_path = root.join(&e.mask);
        let (m, mask_bytes) = pgm::read(&mask_path)?;
        fg += count_mask(&m, &mask_path)?;
        for (g, what) in [(&img, &e.image), (&m, &e.mask)] {
            if (g.height, g.width) != (e.h, e.w) || (e.h, e.w) != (h, w) {
                return Err(Error::Format {
                    kind: "dataset",
                    path: root.join(what),
                    msg: format!(
                        "raster is {}x{}, entry says {}x{}, manifest says {h}x{w}",
                        g.height, g.width, e.h, e.w
                    ),
                });
            }
        }
        if h % DIM_MULTIPLE != 0 || w % DIM_MULTIPLE != 0 {
            return Err(Error::IndivisibleDims {
                h,
                w,
                multiple: DIM_MULTIPLE,
            });
        }
        hash_entry(&mut hasher, &e.image, &img_bytes, &e.mask, &mask_bytes);
        images.extend(img.pixels.iter().map(|&p| T::lit(p as f64 / 255.0)));
        masks.extend(
            m.pixels
                .iter()
                .map(|&p| if p == 255 { T::one() } else { T::zero() }),
        );
    }
    let found = hex::encode(hasher.finalize());
    if found != manifest.content_hash {
        return Err(Error::HashMismatch {
            expected: manifest.content_hash.clone(),
            found,
        });
    }
    let recount = PixelStats {
        foreground: fg,
        background: (n * h * w) as u64 - fg,
    };
    if recount != manifest.stats {
        return Err(Error::Format {
            kind: "manifest",
            path: manifest_path.to_path_buf(),
            msg: format!(
                "statistics {:?} disagree with mask recount {recount:?}",
                manifest.stats
            ),
        });
    }
    let shape = Shape::new(n, 1, h, w);
    Ok(Dataset {
        images: Tensor::new(shape, images)?,
        masks: Tensor::new(shape, masks)?,
        manifest,
    })
}

/// Checks that a dataset's rasters fit a U-net configuration.
pub fn check_compatible(manifest: &DatasetManifest, config: &UnetConfig) -> Result<()> {
    let m = config.required_multiple();
    if manifest.height % m != 0 || manifest.width % m != 0 {
        return Err(Error::IndivisibleDims {
            h: manifest.height,
            w: manifest.width,
            multiple: m,
        });
    }
    Ok(())
}

/// Deterministic minibatch order. Each epoch is a fresh permutation drawn
/// from its own stream of `seed`; the final partial batch is kept.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
    epoch: u64,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch_iterator", "batch size must be at least 1"));
        }
        if len == 0 {
            return Err(Error::EmptyDataset("cannot batch an empty dataset".into()));
        }
        Ok(Self {
            len,
            batch_size,
            seed,
            shuffle,
            epoch: 0,
            queue: Default::default(),
        })
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len).collect();
        if self.shuffle {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Epoch of the next batch to be yielded.
    pub fn epoch(&self) -> u64 {
        if self.queue.is_empty() {
            self.epoch
        } else {
            self.epoch - 1
        }
    }
}

/// Never ends; wraps into the next epoch.
impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.queue.is_empty() {
            self.queue = self.epoch_batches(self.epoch).into();
            self.epoch += 1;
        }
        self.queue.pop_front()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            num_train: 6,
            num_test: 3,
            height: 32,
            width: 32,
            foreground_fraction: 0.1,
            blob_radius: (1.5, 12.0),
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_threshold_recovers_mask() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            blob_intensity: 1.0,
            background_level: 0.0,
            background_variation: 0.0,
            ..small(3)
        };
        for s in synthesize(&cfg, Split::Train).unwrap() {
            let thresholded: Vec<u8> = s
                .image
                .pixels
                .iter()
                .map(|&p| if p as f64 / 255.0 > 0.5 { 255 } else { 0 })
                .collect();
            assert_eq!(thresholded, s.mask.pixels);
        }
    }

    #[test]
    fn generate_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small(1), dir.path()).unwrap();
        let loaded: Dataset = load_dataset(ds.train.path()).unwrap();
        assert_eq!(loaded.images.shape(), Shape::new(6, 1, 32, 32));
        let samples = synthesize(&small(1), Split::Train).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let img = loaded.images.sample(i);
            let back: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
            assert_eq!(back, s.image.pixels);
        }
        let fg = loaded.masks.data().iter().filter(|&&v| v == 1.0).count() as u64;
        assert_eq!(fg, ds.train.stats.foreground);
    }

    #[test]
    fn same_seed_same_hash() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let x = generate_synthetic(&small(9), a.path()).unwrap();
        let y = generate_synthetic(&small(9), b.path()).unwrap();
        let z = generate_synthetic(&small(10), b.path()).unwrap();
        assert_eq!(x.train.content_hash, y.train.content_hash);
        assert_ne!(x.train.content_hash, z.train.content_hash);
        assert_ne!(x.train.content_hash, x.test.content_hash);
    }

    #[test]
    fn load_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&small(2), dir.path()).unwrap();
        let root = dir.path().join("train");

        // Non-binary mask (128 is about 0.5).
        let mask_path = root.join(&ds.train.entries[0].mask);
        let original = std::fs::read(&mask_path).unwrap();
        let mut bad = original.clone();
        let last = bad.len() - 1;
        bad[last] = 128;
        std::fs::write(&mask_path, &bad).unwrap();
        assert!(matches!(
            load_dataset::<f64>(ds.train.path()),
            Err(Error::NonBinaryMask { .. })
        ));

        // Flipped but still binary pixel: hash mismatch.
        bad[last] = if original[last] == 0 { 255 } else { 0 };
        std::fs::write(&mask_path, &bad).unwrap();
        assert!(matches!(
            load_dataset::<f64>(ds.train.path()),
            Err(Error::HashMismatch { .. })
        ));
        std::fs::write(&mask_path, &original).unwrap();
        assert!(load_dataset::<f64>(ds.train.path()).is_ok());

        std::fs::remove_file(root.join(&ds.train.entries[1].image)).unwrap();
        assert!(matches!(
            load_dataset::<f64>(ds.train.path()),
            Err(Error::MissingFile(_))
        ));
        assert!(matches!(
            load_dataset::<f64>(dir.path().join("nowhere.json")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn indivisible_dims_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let img = pgm::Gray8 {
            width: 20,
            height: 16,
            pixels: vec![0; 320],
        };
        std::fs::write(dir.path().join("i.pgm"), pgm::encode(&img)).unwrap();
        std::fs::write(dir.path().join("m.pgm"), pgm::encode(&img)).unwrap();
        let m = DatasetManifest::for_files(dir.path(), Split::Train, &[("i.pgm".into(), "m.pgm".into())])
            .unwrap();
        m.write().unwrap();
        assert!(matches!(
            load_dataset::<f64>(m.path()),
            Err(Error::IndivisibleDims { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let too_small = SynthConfig {
            foreground_fraction: 0.0001,
            height: 16,
            width: 16,
            ..Default::default()
        };
        assert!(matches!(too_small.validate(), Err(Error::UnreachableFraction(_))));
        let big_blobs = SynthConfig {
            foreground_fraction: 0.01,
            blob_radius: (10.0, 20.0),
            ..Default::default()
        };
        assert!(matches!(big_blobs.validate(), Err(Error::UnreachableFraction(_))));
        let wide = SynthConfig {
            blob_radius: (2.0, 40.0),
            ..Default::default()
        };
        assert!(wide.validate().is_err());
        assert!(SynthConfig {
            foreground_fraction: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }

    #[test]
    fn batches() {
        let it = BatchIterator::new(10, 4, 0, false).unwrap();
        let sizes: Vec<usize> = it.epoch_batches(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert_eq!(it.epoch_order(3), (0..10).collect::<Vec<_>>());

        let it = BatchIterator::new(10, 4, 7, true).unwrap();
        assert_ne!(it.epoch_order(0), it.epoch_order(1));
        let again = BatchIterator::new(10, 4, 7, true).unwrap();
        assert_eq!(it.epoch_order(1), again.epoch_order(1));
        let flat: Vec<usize> = it.clone().take(6).flatten().collect();
        let mut expect = it.epoch_order(0);
        expect.extend(it.epoch_order(1));
        assert_eq!(flat, expect);
        assert!(BatchIterator::new(10, 0, 0, true).is_err());
    }
}
