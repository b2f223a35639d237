//! IDX file reader/writer (the MNIST container format).
//!
//! An IDX file is a big-endian 32-bit magic (`0x00000803` for 3-D unsigned
//! byte arrays, `0x00000801` for 1-D), one big-endian 32-bit size per
//! dimension, then the raw unsigned-byte payload.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::LabeledData;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxDataset {
    /// `[N, H, W]`, pixels scaled to `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Hex SHA-256 over the image file bytes followed by the label file bytes.
    pub source_digest: String,
}

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedIdx {
            path: path.to_string(),
            expected: offset + 4,
            actual: bytes.len(),
        })
}

fn parse<'a>(bytes: &'a [u8], magic: u32, path: &str) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path).map_err(|_| Error::NotIdx(path.to_string()))?;
    if found != magic {
        return Err(Error::NotIdx(format!(
            "{path}: magic 0x{found:08x}, expected 0x{magic:08x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndims;
    let payload: usize = dims.iter().product();
    let expected = header + payload;
    if bytes.len() < expected {
        return Err(Error::TruncatedIdx {
            path: path.to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Parses a 3-D image file into `([N, H, W], raw pixels)`.
pub fn parse_images(bytes: &[u8], path: &str) -> Result<([usize; 3], Vec<u8>)> {
    let (dims, payload) = parse(bytes, IMAGES_MAGIC, path)?;
    Ok(([dims[0], dims[1], dims[2]], payload.to_vec()))
}

pub fn parse_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>> {
    let (_, payload) = parse(bytes, LABELS_MAGIC, path)?;
    Ok(payload.to_vec())
}

pub fn encode_images(dims: [usize; 3], pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from in-memory IDX image and label files.
pub fn decode_idx(image_bytes: &[u8], label_bytes: &[u8], image_name: &str, label_name: &str) -> Result<IdxDataset> {
    let (dims, pixels) = parse_images(image_bytes, image_name)?;
    let labels = parse_labels(label_bytes, label_name)?;
    if labels.len() != dims[0] {
        return Err(Error::InvalidArgument(format!(
            "{image_name} has {} images but {label_name} has {} labels",
            dims[0],
            labels.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!("{image_name}: empty dimension {dims:?}")));
    }
    let images = Tensor::new(
        dims.to_vec(),
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    )?;
    let mut h = Sha256::new();
    h.update(image_bytes);
    h.update(label_bytes);
    Ok(IdxDataset {
        images,
        labels: labels.into_iter().map(usize::from).collect(),
        source_digest: hex::encode(h.finalize()),
    })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxDataset> {
    let ib = fsutil::read(images)?;
    let lb = fsutil::read(labels)?;
    decode_idx(
        &ib,
        &lb,
        &images.display().to_string(),
        &labels.display().to_string(),
    )
}

impl IdxDataset {
    /// Re-serializes to `(image file, label file)` bytes; pixels are rounded
    /// back to the nearest byte.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let s = self.images.shape();
        let pixels: Vec<u8> = self
            .images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        (encode_images([s[0], s[1], s[2]], &pixels), encode_labels(&labels))
    }

    /// Flattens images to `[N, H·W]` rows.
    pub fn to_labeled(&self, num_classes: usize) -> Result<LabeledData> {
        let n = self.images.rows();
        let features = self.images.clone().reshape(vec![n, self.images.cols()])?;
        LabeledData::new(features, self.labels.clone(), num_classes)
    }
}
