//! MNIST loading from a local dataset cache.
//!
//! Raw IDX files live under `$PACOL_DATA_DIR/mnist/` in their canonical
//! binary format and are checksum-verified on every load.

use std::path::{Path, PathBuf};

use ndarray::Array4;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DATA_DIR_VAR: &str = "PACOL_DATA_DIR";

const MNIST_FILES: [(&str, &str); 4] = [
    (
        "train-images-idx3-ubyte",
        "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    ),
    (
        "train-labels-idx1-ubyte",
        "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    ),
    (
        "t10k-images-idx3-ubyte",
        "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    ),
    (
        "t10k-labels-idx1-ubyte",
        "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
    ),
];

/// A set of images with labels, pixels in [0,1].
#[derive(Debug, Clone)]
pub struct ImageSet {
    /// NCHW, values in [0,1].
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug)]
pub struct Mnist {
    pub train: ImageSet,
    pub test: ImageSet,
}

/// Resolve the dataset cache directory from the environment.
pub fn data_dir() -> Result<PathBuf> {
    match std::env::var(DATA_DIR_VAR) {
        Ok(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(Error::DatasetCache(format!(
            "{DATA_DIR_VAR} is not set; point it at a directory containing \
             mnist/train-images-idx3-ubyte and the three companion IDX files"
        ))),
    }
}

fn read_verified(path: &Path, expected_sha256: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::DatasetCache(format!(
            "cannot read {}: {e}; populate the cache ({DATA_DIR_VAR}) with the \
             canonical MNIST IDX files",
            path.display()
        ))
    })?;
    let actual = hex(&Sha256::digest(&bytes));
    if actual != expected_sha256 {
        return Err(Error::Checksum {
            path: path.display().to_string(),
            expected: expected_sha256.to_string(),
            actual,
        });
    }
    Ok(bytes)
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn be32(b: &[u8]) -> u32 {
    u32::from_be_bytes([b[0], b[1], b[2], b[3]])
}

fn parse_idx_images(bytes: &[u8]) -> Result<Array4<f32>> {
    if bytes.len() < 16 || be32(&bytes[0..4]) != 0x0803 {
        return Err(Error::Data("not an IDX image file".into()));
    }
    let n = be32(&bytes[4..8]) as usize;
    let h = be32(&bytes[8..12]) as usize;
    let w = be32(&bytes[12..16]) as usize;
    if bytes.len() != 16 + n * h * w {
        return Err(Error::Data("IDX image payload length mismatch".into()));
    }
    let data: Vec<f32> = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Array4::from_shape_vec((n, 1, h, w), data).unwrap())
}

fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 8 || be32(&bytes[0..4]) != 0x0801 {
        return Err(Error::Data("not an IDX label file".into()));
    }
    let n = be32(&bytes[4..8]) as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Data("IDX label payload length mismatch".into()));
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Load MNIST from the cache, verifying checksums.
pub fn load_mnist() -> Result<Mnist> {
    let dir = data_dir()?.join("mnist");
    let mut parts = Vec::with_capacity(4);
    for (name, sum) in MNIST_FILES {
        parts.push(read_verified(&dir.join(name), sum)?);
    }
    let train = ImageSet {
        images: parse_idx_images(&parts[0])?,
        labels: parse_idx_labels(&parts[1])?,
        num_classes: 10,
    };
    let test = ImageSet {
        images: parse_idx_images(&parts[2])?,
        labels: parse_idx_labels(&parts[3])?,
        num_classes: 10,
    };
    if train.images.dim().0 != train.labels.len() || test.images.dim().0 != test.labels.len() {
        return Err(Error::Data("image/label count mismatch".into()));
    }
    Ok(Mnist { train, test })
}
