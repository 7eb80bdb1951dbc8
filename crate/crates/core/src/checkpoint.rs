//! Dense tensor container (`LEAPDNSE`) used for model checkpoints, mask
//! logits and finalized masks, plus atomic file writes.
//!
//! Layout, little-endian: magic, `u32` version, then records of
//! `u32` name length, name bytes, `u32` rank, `u32` dims, `u8` dtype tag
//! (0 = f32, 1 = f64), raw values. Records run to end of file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::autodiff::{Real, Tensor};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, MaskLogits};
use crate::model::{ModelConfig, TinyCausalLM};

pub const DENSE_MAGIC: &[u8; 8] = b"LEAPDNSE";
pub const DENSE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl RecordData {
    pub fn len(&self) -> usize {
        match self {
            RecordData::F32(v) => v.len(),
            RecordData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_real<T: Real>(&self) -> Vec<T> {
        match self {
            RecordData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            RecordData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        }
    }

    fn from_real<T: Real>(data: &[T]) -> Self {
        match T::DTYPE_TAG {
            0 => RecordData::F32(data.iter().map(|x| x.to_f32().unwrap()).collect()),
            _ => RecordData::F64(data.iter().map(|x| x.to_f64().unwrap()).collect()),
        }
    }
}

/// One named tensor in a dense container.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: RecordData,
}

impl DenseRecord {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        DenseRecord {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: RecordData::from_real(t.data()),
        }
    }

    /// A rank-0 `f64` record.
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        DenseRecord {
            name: name.into(),
            shape: Vec::new(),
            data: RecordData::F64(vec![value]),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.to_real())
    }
}

pub fn encode_dense(records: &[DenseRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DENSE_MAGIC);
    out.extend_from_slice(&DENSE_VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &d in &r.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &r.data {
            RecordData::F32(v) => {
                out.push(f32::DTYPE_TAG);
                v.iter().for_each(|&x| x.write_le(&mut out));
            }
            RecordData::F64(v) => {
                out.push(f64::DTYPE_TAG);
                v.iter().for_each(|&x| x.write_le(&mut out));
            }
        }
    }
    out
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor { bytes, pos: 0, path }
    }

    pub(crate) fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            reason: format!("{} (offset {})", reason.into(), self.pos),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.fail("name is not UTF-8"))
    }

    pub(crate) fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<()> {
        if self.take(8).map_err(|_| self.fail("missing magic"))? != magic {
            return Err(self.fail(format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        let v = self.u32()?;
        if v != version {
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(())
    }
}

pub fn decode_dense(bytes: &[u8], path: &Path) -> Result<Vec<DenseRecord>> {
    let mut c = Cursor::new(bytes, path);
    c.header(DENSE_MAGIC, DENSE_VERSION)?;
    let mut out = Vec::new();
    while !c.at_end() {
        let name = c.string()?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = match c.u8()? {
            0 => RecordData::F32(c.take(n * 4)?.chunks_exact(4).map(f32::read_le).collect()),
            1 => RecordData::F64(c.take(n * 8)?.chunks_exact(8).map(f64::read_le).collect()),
            t => return Err(c.fail(format!("unknown dtype tag {t} in record {name}"))),
        };
        out.push(DenseRecord { name, shape, data });
    }
    Ok(out)
}

/// Writes to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_dense(path: impl AsRef<Path>) -> Result<Vec<DenseRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dense(&bytes, path)
}

pub fn write_dense(path: impl AsRef<Path>, records: &[DenseRecord]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_dense(records))
}

fn meta<'a>(records: &'a [DenseRecord], key: &str, path: &Path) -> Result<&'a DenseRecord> {
    records.iter().find(|r| r.name == key).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("missing record {key}"),
    })
}

fn meta_usize(records: &[DenseRecord], key: &str, path: &Path) -> Result<usize> {
    let v = meta(records, key, path)?.data.to_real::<f64>();
    match v.as_slice() {
        [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
        _ => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{key} is not a non-negative integer scalar"),
        }),
    }
}

const CONFIG_KEYS: [&str; 6] = [
    "meta.vocab_size",
    "meta.embed_dim",
    "meta.n_blocks",
    "meta.n_heads",
    "meta.context_len",
    "meta.mlp_ratio",
];

/// Every parameter plus the architecture as `meta.*` scalars.
pub fn save_model<T: Real>(model: &TinyCausalLM<T>, path: impl AsRef<Path>) -> Result<()> {
    let c = model.config();
    let values = [c.vocab_size, c.embed_dim, c.n_blocks, c.n_heads, c.context_len, c.mlp_ratio];
    let mut records: Vec<DenseRecord> = CONFIG_KEYS
        .iter()
        .zip(values)
        .map(|(k, v)| DenseRecord::scalar(*k, v as f64))
        .collect();
    records.extend(model.params().iter().map(|(n, t)| DenseRecord::from_tensor(n.clone(), t)));
    write_dense(path, &records)
}

pub fn load_model<T: Real>(path: impl AsRef<Path>) -> Result<TinyCausalLM<T>> {
    let path = path.as_ref();
    let records = read_dense(path)?;
    let v: Vec<usize> = CONFIG_KEYS
        .iter()
        .map(|k| meta_usize(&records, k, path))
        .collect::<Result<_>>()?;
    let config = ModelConfig {
        vocab_size: v[0],
        embed_dim: v[1],
        n_blocks: v[2],
        n_heads: v[3],
        context_len: v[4],
        mlp_ratio: v[5],
    };
    let params = records
        .iter()
        .filter(|r| !r.name.starts_with("meta."))
        .map(|r| Ok((r.name.clone(), r.to_tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    TinyCausalLM::from_params(config, params)
}

/// Logits `P` per layer, keyed by layer name.
pub fn save_logits<T: Real>(logits: &[MaskLogits<T>], path: impl AsRef<Path>) -> Result<()> {
    let records: Vec<DenseRecord> = logits
        .iter()
        .map(|ml| DenseRecord::from_tensor(ml.name.clone(), ml.logits()))
        .collect();
    write_dense(path, &records)
}

/// Loads logits saved by [`save_logits`] and pairs them with the model's
/// frozen weights.
pub fn load_logits<T: Real>(model: &TinyCausalLM<T>, path: impl AsRef<Path>) -> Result<Vec<MaskLogits<T>>> {
    let path = path.as_ref();
    let records = read_dense(path)?;
    model
        .maskable_layers()
        .iter()
        .map(|l| {
            let r = meta(&records, &l.name, path)?;
            MaskLogits::new(l.layer_id, l.name.clone(), r.to_tensor()?, model.layer_weights(l).clone())
        })
        .collect()
}

/// Finalized masks as `{0,1}` f32 records plus the target density.
pub fn save_masks(masks: &[BinaryMask], density: f64, path: impl AsRef<Path>) -> Result<()> {
    let mut records = vec![DenseRecord::scalar("meta.density", density)];
    records.extend(masks.iter().map(|m| DenseRecord {
        name: m.name.clone(),
        shape: vec![m.rows, m.cols],
        data: RecordData::F32(m.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
    }));
    write_dense(path, &records)
}

/// Masks saved by [`save_masks`], matched to the model's maskable layers,
/// and the stored density.
pub fn load_masks<T: Real>(model: &TinyCausalLM<T>, path: impl AsRef<Path>) -> Result<(Vec<BinaryMask>, f64)> {
    let path = path.as_ref();
    let records = read_dense(path)?;
    let density = meta(&records, "meta.density", path)?.data.to_real::<f64>()[0];
    let masks = model
        .maskable_layers()
        .iter()
        .map(|l| {
            let r = meta(&records, &l.name, path)?;
            let w = model.layer_weights(l);
            if r.shape != w.shape() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("mask {} has shape {:?}, weights {:?}", l.name, r.shape, w.shape()),
                });
            }
            let bits: Vec<bool> = r.data.to_real::<f64>().iter().map(|&x| x != 0.0).collect();
            BinaryMask::new(l.layer_id, l.name.clone(), r.shape[0], r.shape[1], bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((masks, density))
}
