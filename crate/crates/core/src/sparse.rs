//! Bitmap + packed-values sparse checkpoint (`LEAPSPRS`).
//!
//! Little-endian layout: magic, `u32` version, `u32` layer count; per layer
//! `u32` name length, name bytes, `u32` rows, `u32` cols, a row-major
//! LSB-first bitmap of `ceil(rows·cols/8)` bytes, `u64` kept count, then the
//! kept weights as `f32` in bitmap order.

use std::fs;
use std::path::Path;

use crate::autodiff::{Real, Tensor};
use crate::checkpoint::{write_atomic, Cursor};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::TinyCausalLM;

pub const SPARSE_MAGIC: &[u8; 8] = b"LEAPSPRS";
pub const SPARSE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bitmap: Vec<u8>,
    pub values: Vec<f32>,
}

impl SparseLayer {
    /// Packs the kept entries of `weights` under `mask`.
    pub fn from_mask<T: Real>(mask: &BinaryMask, weights: &Tensor<T>) -> Result<Self> {
        if weights.numel() != mask.len() {
            return Err(Error::Shape {
                op: "sparse_layer",
                lhs: weights.shape().to_vec(),
                rhs: vec![mask.rows, mask.cols],
            });
        }
        let mut bitmap = vec![0u8; mask.len().div_ceil(8)];
        let mut values = Vec::with_capacity(mask.kept());
        for (i, (&b, w)) in mask.bits.iter().zip(weights.data()).enumerate() {
            if b {
                bitmap[i / 8] |= 1 << (i % 8);
                values.push(w.to_f32().unwrap());
            }
        }
        Ok(SparseLayer {
            name: mask.name.clone(),
            rows: mask.rows,
            cols: mask.cols,
            bitmap,
            values,
        })
    }

    pub fn bit(&self, i: usize) -> bool {
        self.bitmap[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.rows * self.cols).map(|i| self.bit(i)).collect()
    }

    pub fn popcount(&self) -> usize {
        self.bitmap.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// The dense matrix with zeros at pruned positions.
    pub fn to_dense(&self) -> Vec<f32> {
        let mut vals = self.values.iter();
        (0..self.rows * self.cols)
            .map(|i| if self.bit(i) { *vals.next().unwrap() } else { 0.0 })
            .collect()
    }

    pub fn density(&self) -> f64 {
        self.values.len() as f64 / (self.rows * self.cols).max(1) as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseCheckpoint {
    pub layers: Vec<SparseLayer>,
}

impl SparseCheckpoint {
    /// One layer per mask, weights taken from `model`.
    pub fn from_model<T: Real>(model: &TinyCausalLM<T>, masks: &[BinaryMask]) -> Result<Self> {
        let layers = model.maskable_layers();
        let layers = masks
            .iter()
            .map(|m| {
                let l = layers
                    .iter()
                    .find(|l| l.name == m.name)
                    .ok_or_else(|| Error::MissingMasks(format!("model has no layer {}", m.name)))?;
                SparseLayer::from_mask(m, model.layer_weights(l))
            })
            .collect::<Result<_>>()?;
        Ok(SparseCheckpoint { layers })
    }

    pub fn kept(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.rows * l.cols).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SPARSE_MAGIC);
        out.extend_from_slice(&SPARSE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
            out.extend_from_slice(l.name.as_bytes());
            out.extend_from_slice(&(l.rows as u32).to_le_bytes());
            out.extend_from_slice(&(l.cols as u32).to_le_bytes());
            out.extend_from_slice(&l.bitmap);
            out.extend_from_slice(&(l.values.len() as u64).to_le_bytes());
            for &v in &l.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut c = Cursor::new(bytes, path);
        c.header(SPARSE_MAGIC, SPARSE_VERSION)?;
        let n = c.u32()?;
        let mut layers = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = c.string()?;
            let rows = c.u32()? as usize;
            let cols = c.u32()? as usize;
            let bitmap = c.take((rows * cols).div_ceil(8))?.to_vec();
            let kept = c.u64()? as usize;
            let values: Vec<f32> = c.take(kept * 4)?.chunks_exact(4).map(f32::read_le).collect();
            let layer = SparseLayer {
                name,
                rows,
                cols,
                bitmap,
                values,
            };
            if layer.popcount() != kept {
                return Err(c.fail(format!(
                    "layer {}: bitmap has {} set bits but {kept} values",
                    layer.name,
                    layer.popcount()
                )));
            }
            layers.push(layer);
        }
        if !c.at_end() {
            return Err(c.fail("trailing bytes"));
        }
        Ok(SparseCheckpoint { layers })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Writes the sparse checkpoint for `model` under `masks` and verifies it by
/// reading it back.
pub fn export_sparse<T: Real>(model: &TinyCausalLM<T>, masks: &[BinaryMask], path: impl AsRef<Path>) -> Result<SparseCheckpoint> {
    let path = path.as_ref();
    let ckpt = SparseCheckpoint::from_model(model, masks)?;
    ckpt.write(path)?;
    let back = SparseCheckpoint::read(path)?;
    let same_bits = back
        .layers
        .iter()
        .zip(&ckpt.layers)
        .all(|(a, b)| a.bitmap == b.bitmap && a.values.iter().map(|v| v.to_bits()).eq(b.values.iter().map(|v| v.to_bits())));
    if back.layers.len() != ckpt.layers.len() || !same_bits {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "read-back differs from what was written".into(),
        });
    }
    Ok(ckpt)
}
