//! Portable little-endian named-tensor container.
//!
//! Layout: `"BSCK"`, version `u16`, tensor count `u32`, then per tensor a
//! `u16` name length, the UTF-8 name, a dtype code `u8` (0 = f32, 1 = f64),
//! `ndim: u8`, `ndim` dims as `u64`, and the row-major payload. A CRC32 of
//! every preceding byte closes the file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::layer::{DenseLinear, FactorizedLinear, LowRankPair};
use crate::linalg::Matrix;
use crate::model::{block_name, Layer, ModelConfig, ToyModel};

pub const MAGIC: &[u8; 4] = b"BSCK";
pub const VERSION: u16 = 1;
/// Magic, version and tensor count.
const HEADER_LEN: usize = 4 + 2 + 4;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    BadVersion { found: u16 },
    #[error("file truncated: {len} bytes, need at least {needed}")]
    Truncated { len: usize, needed: usize },
    #[error("CRC mismatch over bytes {start}..{end}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch {
        start: usize,
        end: usize,
        stored: u32,
        computed: u32,
    },
    #[error("malformed checkpoint at byte {offset}: {message}")]
    Malformed { offset: usize, message: String },
    #[error("checkpoint does not describe a model: {0}")]
    Model(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn code(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
        }
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims,
            data: TensorData::F64(data),
        }
    }

    fn matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self::f64(name, vec![m.rows() as u64, m.cols() as u64], m.as_slice().to_vec())
    }

    fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self::f64(name, vec![v.len() as u64], v.to_vec())
    }

    /// Bitwise equality, so NaN payloads compare too.
    pub fn bits_eq(&self, other: &Self) -> bool {
        let same_data = match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits())),
            (TensorData::F64(a), TensorData::F64(b)) => a.iter().map(|x| x.to_bits()).eq(b.iter().map(|x| x.to_bits())),
            _ => false,
        };
        self.name == other.name && self.dims == other.dims && same_data
    }
}

/// Serializes tensors into the container format.
pub fn encode(tensors: &[Tensor]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| CheckpointError::Model("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        let name_len =
            u16::try_from(name.len()).map_err(|_| CheckpointError::Model(format!("tensor name too long: {}", t.name)))?;
        let ndim = u8::try_from(t.dims.len()).map_err(|_| CheckpointError::Model(format!("too many dims: {}", t.name)))?;
        let elems: u64 = t.dims.iter().product();
        if elems != t.data.len() as u64 {
            return Err(CheckpointError::Model(format!(
                "tensor {} has dims {:?} but {} values",
                t.name,
                t.dims,
                t.data.len()
            )));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(t.data.code());
        out.push(ndim);
        for d in &t.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Malformed {
                offset: self.pos,
                message: format!("{what} runs past the end of the data"),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a container. Magic and version are checked first,
/// then the CRC, and only then is the tensor table trusted.
pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>, CheckpointError> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic {
                found: bytes[..4].to_vec(),
            });
        }
        return Err(CheckpointError::Truncated {
            len: bytes.len(),
            needed: HEADER_LEN + CRC_LEN,
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..4].to_vec(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::BadVersion { found: version });
    }
    let body_end = bytes.len() - CRC_LEN;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(CheckpointError::CrcMismatch {
            start: 0,
            end: body_end,
            stored,
            computed,
        });
    }

    let mut r = Reader {
        bytes: &bytes[..body_end],
        pos: 6,
    };
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CheckpointError::Malformed {
                offset: at,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let at = r.pos;
        let code = r.u8("dtype")?;
        let width = match code {
            0 => 4,
            1 => 8,
            c => {
                return Err(CheckpointError::Malformed {
                    offset: at,
                    message: format!("unknown dtype code {c}"),
                })
            }
        };
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim).map(|_| r.u64("dim")).collect::<Result<Vec<_>, _>>()?;
        let at = r.pos;
        let bytes_needed = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|e| e.checked_mul(width as u64))
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| CheckpointError::Malformed {
                offset: at,
                message: format!("payload size of {name} overflows"),
            })?;
        let raw = r.take(bytes_needed, "payload")?;
        let data = if width == 4 {
            TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
        } else {
            TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
        };
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != body_end {
        return Err(CheckpointError::Malformed {
            offset: r.pos,
            message: format!("{} trailing bytes before the CRC", body_end - r.pos),
        });
    }
    Ok(tensors)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub fn save_tensors(path: &Path, tensors: &[Tensor]) -> Result<(), CheckpointError> {
    write_atomic(path, &encode(tensors)?)
}

pub fn load_tensors(path: &Path) -> Result<Vec<Tensor>, CheckpointError> {
    decode(&fs::read(path).map_err(io_err(path))?)
}

/// Model as named tensors. The `meta` tensor holds the model config as
/// `[vocab, context, embed_dim, hidden, blocks]`; each block is stored
/// under `blocks.{i}.` with the tensor names of its current form.
pub fn model_to_tensors(model: &ToyModel) -> Vec<Tensor> {
    let c = &model.config;
    let meta = [c.vocab, c.context, c.embed_dim, c.hidden, c.blocks].map(|x| x as f64);
    let mut out = vec![Tensor::vector("meta", &meta), Tensor::matrix("embedding", &model.embedding)];
    for (i, block) in model.blocks.iter().enumerate() {
        let p = block_name(i);
        match block {
            Layer::Dense(d) => push_dense(&mut out, &p, d),
            Layer::Factorized(f) => {
                out.push(Tensor::matrix(format!("{p}.base_u"), f.base_u()));
                out.push(Tensor::matrix(format!("{p}.base_v"), f.base_v()));
                out.push(Tensor::vector(format!("{p}.s"), f.weights()));
                out.push(Tensor::matrix(format!("{p}.extra_u"), f.extra_u()));
                out.push(Tensor::matrix(format!("{p}.extra_v"), f.extra_v()));
                out.push(Tensor::vector(format!("{p}.bias"), f.bias()));
                let origin: Vec<f64> = f.origin().iter().map(|&o| o as f64).collect();
                out.push(Tensor::vector(format!("{p}.origin"), &origin));
            }
            Layer::LowRank(pair) => {
                push_dense(&mut out, &format!("{p}.first"), &pair.first);
                push_dense(&mut out, &format!("{p}.second"), &pair.second);
            }
        }
    }
    push_dense(&mut out, "head", &model.head);
    out
}

fn push_dense(out: &mut Vec<Tensor>, prefix: &str, d: &DenseLinear) {
    out.push(Tensor::matrix(format!("{prefix}.weight"), &d.weight));
    if let Some(b) = &d.bias {
        out.push(Tensor::vector(format!("{prefix}.bias"), b));
    }
}

struct Table {
    tensors: HashMap<String, Tensor>,
}

impl Table {
    fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    fn take(&mut self, name: &str) -> Result<Tensor, CheckpointError> {
        self.tensors
            .remove(name)
            .ok_or_else(|| CheckpointError::Model(format!("missing tensor {name}")))
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        let t = self.take(name)?;
        if t.dims.len() != 1 {
            return Err(CheckpointError::Model(format!("{name} should be 1-d, has dims {:?}", t.dims)));
        }
        Ok(t.data.to_f64())
    }

    fn matrix(&mut self, name: &str) -> Result<Matrix, CheckpointError> {
        let t = self.take(name)?;
        if t.dims.len() != 2 {
            return Err(CheckpointError::Model(format!("{name} should be 2-d, has dims {:?}", t.dims)));
        }
        Matrix::from_vec(t.dims[0] as usize, t.dims[1] as usize, t.data.to_f64())
            .map_err(|e| CheckpointError::Model(format!("{name}: {e}")))
    }

    fn dense(&mut self, prefix: &str) -> Result<DenseLinear, CheckpointError> {
        let weight = self.matrix(&format!("{prefix}.weight"))?;
        let bias_name = format!("{prefix}.bias");
        let bias = if self.has(&bias_name) { Some(self.vector(&bias_name)?) } else { None };
        DenseLinear::new(weight, bias).map_err(|e| CheckpointError::Model(format!("{prefix}: {e}")))
    }
}

fn as_count(x: f64, what: &str) -> Result<usize, CheckpointError> {
    if x >= 0.0 && x.fract() == 0.0 && x < 1e15 {
        Ok(x as usize)
    } else {
        Err(CheckpointError::Model(format!("{what} is not a count: {x}")))
    }
}

pub fn model_from_tensors(tensors: Vec<Tensor>) -> Result<ToyModel, CheckpointError> {
    let mut t = Table {
        tensors: tensors.into_iter().map(|t| (t.name.clone(), t)).collect(),
    };
    let meta = t.vector("meta")?;
    if meta.len() != 5 {
        return Err(CheckpointError::Model(format!("meta has {} entries, expected 5", meta.len())));
    }
    let config = ModelConfig {
        vocab: as_count(meta[0], "vocab")?,
        context: as_count(meta[1], "context")?,
        embed_dim: as_count(meta[2], "embed_dim")?,
        hidden: as_count(meta[3], "hidden")?,
        blocks: as_count(meta[4], "blocks")?,
    };
    let embedding = t.matrix("embedding")?;
    let mut blocks = Vec::with_capacity(config.blocks);
    for i in 0..config.blocks {
        let p = block_name(i);
        let layer = if t.has(&format!("{p}.base_u")) {
            let origin = t
                .vector(&format!("{p}.origin"))?
                .into_iter()
                .map(|o| as_count(o, "origin"))
                .collect::<Result<_, _>>()?;
            Layer::Factorized(
                FactorizedLinear::from_parts(
                    t.matrix(&format!("{p}.base_u"))?,
                    t.matrix(&format!("{p}.base_v"))?,
                    t.vector(&format!("{p}.s"))?,
                    t.matrix(&format!("{p}.extra_u"))?,
                    t.matrix(&format!("{p}.extra_v"))?,
                    t.vector(&format!("{p}.bias"))?,
                    origin,
                )
                .map_err(|e| CheckpointError::Model(format!("{p}: {e}")))?,
            )
        } else if t.has(&format!("{p}.first.weight")) {
            Layer::LowRank(LowRankPair {
                first: t.dense(&format!("{p}.first"))?,
                second: t.dense(&format!("{p}.second"))?,
            })
        } else {
            Layer::Dense(t.dense(&p)?)
        };
        blocks.push(layer);
    }
    let head = t.dense("head")?;
    if let Some(extra) = t.tensors.keys().min() {
        return Err(CheckpointError::Model(format!("unexpected tensor {extra}")));
    }
    let model = ToyModel {
        config,
        embedding,
        blocks,
        head,
    };
    check_shapes(&model)?;
    Ok(model)
}

fn check_shapes(model: &ToyModel) -> Result<(), CheckpointError> {
    let c = &model.config;
    let bad = |what: String| Err(CheckpointError::Model(what));
    if model.embedding.shape() != (c.vocab, c.embed_dim) {
        return bad(format!("embedding shape {:?}", model.embedding.shape()));
    }
    let mut width = c.input_width();
    for (i, b) in model.blocks.iter().enumerate() {
        if b.in_features() != width || b.out_features() != c.hidden {
            return bad(format!("{} maps {} -> {}", block_name(i), b.in_features(), b.out_features()));
        }
        if let Layer::LowRank(p) = b {
            if p.first.out_features() != p.second.in_features() {
                return bad(format!("{} pair ranks disagree", block_name(i)));
            }
        }
        width = c.hidden;
    }
    if model.head.in_features() != width || model.head.out_features() != c.vocab {
        return bad(format!("head maps {} -> {}", model.head.in_features(), model.head.out_features()));
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &ToyModel) -> Result<(), CheckpointError> {
    save_tensors(path, &model_to_tensors(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyModel, CheckpointError> {
    model_from_tensors(load_tensors(path)?)
}
