//! Named parameter tensors and the checkpoint file.
//!
//! Checkpoint layout (little endian): `SCKP`, u32 version, u32 meta length,
//! JSON meta, u32 tensor count, then per tensor: u32 name length, name,
//! u8 kind, u32 rows, u32 cols, f64 values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{hash_str, stream};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SCKP";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Used at conversion time.
    Inference,
    /// Auxiliary classifier weights, training only.
    Classifier,
    /// Fixed statistics (feature normalisation); not trained.
    Statistic,
    /// Optimizer state carried in a checkpoint.
    Optimizer,
}

impl ParamKind {
    fn code(self) -> u8 {
        match self {
            ParamKind::Inference => 0,
            ParamKind::Classifier => 1,
            ParamKind::Statistic => 2,
            ParamKind::Optimizer => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ParamKind::Inference,
            1 => ParamKind::Classifier,
            2 => ParamKind::Statistic,
            3 => ParamKind::Optimizer,
            _ => return Err(Error::Format(format!("unknown tensor kind {c}"))),
        })
    }

    pub fn trainable(self) -> bool {
        matches!(self, ParamKind::Inference | ParamKind::Classifier)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, kind: ParamKind, value: Tensor) -> usize {
        if let Some(&i) = self.index.get(name) {
            self.params[i] = Param {
                name: name.to_string(),
                kind,
                value,
            };
            return i;
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|i| &self.params[i].value)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// A copy without tensors of the given kind.
    pub fn without(&self, kind: ParamKind) -> ParamStore {
        let mut out = ParamStore::new();
        for p in self.params.iter().filter(|p| p.kind != kind) {
            out.insert(&p.name, p.kind, p.value.clone());
        }
        out
    }

    pub fn of_kind(&self, kind: ParamKind) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.kind == kind)
    }
}

/// Initialisation schemes, each seeded per parameter name.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-a, a]`.
    Uniform(f64),
    /// Glorot uniform over `fan_in + fan_out`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
}

pub fn init_tensor(rows: usize, cols: usize, init: Init, seed: u64, name: &str) -> Tensor {
    let bound = match init {
        Init::Zeros => return Tensor::zeros(rows, cols),
        Init::Const(c) => return Tensor::filled(rows, cols, c),
        Init::Uniform(a) => a,
        Init::Xavier { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let mut rng = stream(&[seed, hash_str(name)]);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointData {
    pub meta: serde_json::Value,
    pub tensors: ParamStore,
}

pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, tensors: &ParamStore) -> Result<()> {
    let meta_bytes = serde_json::to_vec(meta)?;
    let values: usize = tensors.params().iter().map(|p| p.value.len()).sum();
    let mut buf = Vec::with_capacity(16 + meta_bytes.len() + values * 8 + tensors.len() * 64);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for p in tensors.params() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(p.kind.code());
        buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<CheckpointData> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()?;
    let mut tensors = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let kind = ParamKind::from_code(r.take(1)?[0])?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(&name, kind, Tensor::from_vec(rows, cols, data));
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(CheckpointData { meta, tensors })
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}
