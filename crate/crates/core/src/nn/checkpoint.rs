//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DPDFD1"                      6-byte magic
//! version        u32            currently 1
//! seed           u64
//! input_dim      u32
//! layer_count    u32
//! layer descriptors, one per layer:
//!   tag u8: 1 dense   -> in u32, out u32
//!           2 norm    -> dim u32, momentum f32, eps f32, populated u8
//!           3 relu
//!           4 lrelu   -> slope f32
//!           5 tanh
//! parameters     f32*           per layer: weight [in*out] then bias [out],
//!                               or gamma [dim] then beta [dim]
//! running stats  f32*           per norm layer: mean [dim] then var [dim]
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::nn::model::{BatchNormLayer, Layer, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"DPDFD1";
pub const VERSION: u32 = 1;

const TAG_DENSE: u8 = 1;
const TAG_NORM: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_LRELU: u8 = 4;
const TAG_TANH: u8 = 5;

pub fn encode(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.seed().to_le_bytes());
    out.extend_from_slice(&(model.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    for layer in model.layers() {
        match layer {
            Layer::Dense { weight, .. } => {
                out.push(TAG_DENSE);
                out.extend_from_slice(&(weight.shape()[0] as u32).to_le_bytes());
                out.extend_from_slice(&(weight.shape()[1] as u32).to_le_bytes());
            }
            Layer::BatchNorm(bn) => {
                out.push(TAG_NORM);
                out.extend_from_slice(&(bn.dim() as u32).to_le_bytes());
                out.extend_from_slice(&bn.momentum.to_le_bytes());
                out.extend_from_slice(&bn.eps.to_le_bytes());
                out.push(bn.populated as u8);
            }
            Layer::Relu => out.push(TAG_RELU),
            Layer::LeakyRelu(s) => {
                out.push(TAG_LRELU);
                out.extend_from_slice(&s.to_le_bytes());
            }
            Layer::Tanh => out.push(TAG_TANH),
        }
    }
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for bn in model.norm_layers() {
        for v in bn.running_mean.iter().chain(&bn.running_var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

enum Desc {
    Dense(usize, usize),
    Norm {
        dim: usize,
        momentum: f32,
        eps: f32,
        populated: bool,
    },
    Relu,
    LeakyRelu(f32),
    Tanh,
}

pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("missing DPDFD1 magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let seed = r.u64()?;
    let input_dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut descs = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let d = match r.u8()? {
            TAG_DENSE => Desc::Dense(r.u32()? as usize, r.u32()? as usize),
            TAG_NORM => Desc::Norm {
                dim: r.u32()? as usize,
                momentum: r.f32()?,
                eps: r.f32()?,
                populated: r.u8()? != 0,
            },
            TAG_RELU => Desc::Relu,
            TAG_LRELU => Desc::LeakyRelu(r.f32()?),
            TAG_TANH => Desc::Tanh,
            tag => {
                return Err(Error::Checkpoint(format!(
                    "unknown layer tag {tag} for layer {i}"
                )))
            }
        };
        descs.push(d);
    }
    let mut layers = Vec::with_capacity(descs.len());
    for d in &descs {
        layers.push(match *d {
            Desc::Dense(i, o) => {
                if i == 0 || o == 0 {
                    return Err(Error::Checkpoint("zero-width dense layer".into()));
                }
                Layer::Dense {
                    weight: Tensor::matrix(i, o, r.f32s(i * o)?),
                    bias: Tensor::vector(r.f32s(o)?),
                }
            }
            Desc::Norm {
                dim,
                momentum,
                eps,
                populated,
            } => {
                if dim == 0 {
                    return Err(Error::Checkpoint("zero-width norm layer".into()));
                }
                let mut bn = BatchNormLayer::new(dim);
                bn.gamma = Tensor::vector(r.f32s(dim)?);
                bn.beta = Tensor::vector(r.f32s(dim)?);
                bn.momentum = momentum;
                bn.eps = eps;
                bn.populated = populated;
                Layer::BatchNorm(bn)
            }
            Desc::Relu => Layer::Relu,
            Desc::LeakyRelu(s) => Layer::LeakyRelu(s),
            Desc::Tanh => Layer::Tanh,
        });
    }
    for layer in &mut layers {
        if let Layer::BatchNorm(bn) = layer {
            let dim = bn.dim();
            bn.running_mean = r.f32s(dim)?;
            bn.running_var = r.f32s(dim)?;
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after running statistics",
            bytes.len() - r.pos
        )));
    }
    Model::from_layers(input_dim, layers, seed)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fsutil::write_atomic(path, &encode(model))
}

pub fn load(path: &Path) -> Result<Model> {
    decode(&fsutil::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::parse_arch;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut m = Model::new(
            4,
            &parse_arch("bn,dense:6,bn,lrelu:0.2,dense:3,tanh").unwrap(),
            11,
        )
        .unwrap();
        let x = Tensor::matrix(3, 4, (0..12).map(|i| i as f32 * 0.3 - 1.0).collect());
        m.forward(&x, true).unwrap();
        let bytes = encode(&m);
        assert_eq!(&bytes[..6], b"DPDFD1");
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let m = Model::new(2, &parse_arch("dense:2").unwrap(), 0).unwrap();
        let bytes = encode(&m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
