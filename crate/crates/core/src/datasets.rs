//! Image ingestion: raw binary batch reader (label byte + channel-planar
//! pixels per record), normalization to [0,1], and deterministic synthetic
//! sets for tests and toy training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::stream;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("file size {len} is not a multiple of the record length {record}")]
    Format { len: usize, record: usize },
    #[error("checksum mismatch for {file}: manifest {expected:016x}, computed {actual:016x}")]
    ChecksumMismatch { file: String, expected: u64, actual: u64 },
    #[error("file {file} missing from manifest")]
    NotInManifest { file: String },
}

/// Interleaved h×w×3 image with values in [0,1]; index (row, col, channel)
/// maps to (row*w + col)*3 + channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * 3);
        Image { h, w, data }
    }

    pub fn constant(h: usize, w: usize, value: f64) -> Self {
        Image::new(h, w, vec![value; h * w * 3])
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.w + col) * 3 + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        self.data[(row * self.w + col) * 3 + ch] = v;
    }
}

#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<Image>,
    pub source: String,
    /// FNV-1a over the raw file bytes; 0 for synthetic sets.
    pub checksum: u64,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// FNV-1a 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

const RAW_H: usize = 32;
const RAW_W: usize = 32;
const RAW_RECORD: usize = 1 + 3 * RAW_H * RAW_W;

/// Reads a raw batch file: per record one label byte (discarded) followed by
/// 3072 pixel bytes, channel-planar (full R plane, then G, then B; each
/// plane row-major 32×32). Pixels are scaled by 1/255.
pub fn load_raw_batch(path: &Path) -> Result<ImageSet, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_raw_batch(&bytes, &path.display().to_string())
}

pub fn decode_raw_batch(bytes: &[u8], source: &str) -> Result<ImageSet, DatasetError> {
    if !bytes.len().is_multiple_of(RAW_RECORD) {
        return Err(DatasetError::Format { len: bytes.len(), record: RAW_RECORD });
    }
    let n = bytes.len() / RAW_RECORD;
    let mut images = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * RAW_RECORD..(r + 1) * RAW_RECORD];
        let planes = &rec[1..]; // label byte discarded
        let mut img = Image::constant(RAW_H, RAW_W, 0.0);
        for ch in 0..3 {
            for i in 0..RAW_H * RAW_W {
                let row = i / RAW_W;
                let col = i % RAW_W;
                img.set(row, col, ch, planes[ch * RAW_H * RAW_W + i] as f64 / 255.0);
            }
        }
        images.push(img);
    }
    Ok(ImageSet { images, source: source.to_string(), checksum: fnv1a(bytes) })
}

/// JSON manifest of per-file checksums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataManifest {
    pub files: BTreeMap<String, String>,
}

impl DataManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DatasetError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })
    }

    pub fn verify(&self, file_name: &str, set: &ImageSet) -> Result<(), DatasetError> {
        let expected = self
            .files
            .get(file_name)
            .ok_or_else(|| DatasetError::NotInManifest { file: file_name.to_string() })?;
        let expected = u64::from_str_radix(expected.trim_start_matches("0x"), 16).map_err(|e| DatasetError::Io {
            path: file_name.to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        if expected != set.checksum {
            return Err(DatasetError::ChecksumMismatch {
                file: file_name.to_string(),
                expected,
                actual: set.checksum,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    /// Smooth per-channel linear ramps with random orientation.
    Gradients,
    /// Two-color checkerboard with the given cell size; aligning `cell`
    /// with the patch grid makes every patch constant.
    Checkers { cell: usize },
    /// Uniform noise in [0,1).
    Noise,
}

/// Deterministic synthetic image set.
pub fn synthetic_set(kind: SyntheticKind, n: usize, h: usize, w: usize, seed: u64) -> ImageSet {
    assert!(n >= 1);
    let mut images = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng = stream(seed, &[0x5e7, idx as u64]);
        let mut img = Image::constant(h, w, 0.0);
        match kind {
            SyntheticKind::Gradients => {
                for ch in 0..3 {
                    let a = rng.gen_range(-0.5..0.5);
                    let b = rng.gen_range(-0.5..0.5);
                    let c = rng.gen_range(0.25..0.75);
                    for row in 0..h {
                        for col in 0..w {
                            let y = if h > 1 { row as f64 / (h - 1) as f64 } else { 0.0 };
                            let x = if w > 1 { col as f64 / (w - 1) as f64 } else { 0.0 };
                            img.set(row, col, ch, (a * y + b * x + c).clamp(0.0, 1.0));
                        }
                    }
                }
            }
            SyntheticKind::Checkers { cell } => {
                assert!(cell >= 1);
                let mut colors = [[0.0; 3]; 2];
                for color in colors.iter_mut() {
                    for v in color.iter_mut() {
                        *v = rng.gen_range(0.0..1.0);
                    }
                }
                for row in 0..h {
                    for col in 0..w {
                        let parity = (row / cell + col / cell) % 2;
                        for (ch, &v) in colors[parity].iter().enumerate() {
                            img.set(row, col, ch, v);
                        }
                    }
                }
            }
            SyntheticKind::Noise => {
                for v in img.data_mut() {
                    *v = rng.gen_range(0.0..1.0);
                }
            }
        }
        images.push(img);
    }
    ImageSet { images, source: format!("synthetic:{kind:?}:{n}x{h}x{w}:seed{seed}"), checksum: 0 }
}
