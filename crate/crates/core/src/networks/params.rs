use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Named parameter tree. Paths look like `denoiser/enc0/conv1/w`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
    init_seed: u64,
}

impl ModelParams {
    pub fn new(init_seed: u64) -> Self {
        ModelParams { tensors: BTreeMap::new(), init_seed }
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// Parameters whose path starts with `prefix`.
    pub fn group<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a String, &'a Tensor)> + 'a {
        self.tensors.iter().filter(move |(k, _)| k.starts_with(prefix))
    }

    pub(crate) fn from_map(tensors: BTreeMap<String, Tensor>, init_seed: u64) -> Self {
        ModelParams { tensors, init_seed }
    }
}

/// Initial value rule for a parameter created on first use.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with standard deviation `gain/√fan_in`.
    FanIn(usize, f64),
    Zeros,
    Const(f64),
}

enum Mode<'a> {
    Use(&'a ModelParams),
    Init(&'a mut ModelParams),
}

/// Resolves parameter names to graph leaves, either reading an existing
/// tree or creating missing entries deterministically.
pub struct Binder<'a> {
    mode: Mode<'a>,
    trainable: bool,
}

impl<'a> Binder<'a> {
    pub fn using(params: &'a ModelParams, trainable: bool) -> Self {
        Binder { mode: Mode::Use(params), trainable }
    }

    pub fn initializing(params: &'a mut ModelParams) -> Self {
        Binder { mode: Mode::Init(params), trainable: false }
    }

    pub fn param(&mut self, g: &mut Graph, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let trainable = self.trainable;
        match &mut self.mode {
            Mode::Use(p) => {
                let t = p
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("parameter '{name}' missing from checkpoint")))?;
                if t.shape() != shape {
                    return Err(Error::Config(format!(
                        "parameter '{name}' has shape {:?}, network expects {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Ok(g.named_leaf(name, || t.clone(), trainable))
            }
            Mode::Init(p) => {
                if let Some(t) = p.get(name) {
                    if t.shape() != shape {
                        return Err(Error::Config(format!("parameter '{name}' reused with a different shape")));
                    }
                } else {
                    let t = initial_value(p.init_seed(), name, shape, init);
                    p.insert(name, t);
                }
                let t = p.get(name).expect("inserted above");
                Ok(g.named_leaf(name, || t.clone(), false))
            }
        }
    }
}

fn initial_value(seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    let n: usize = shape.iter().product();
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Const(v) => Tensor::full(shape, v),
        Init::FanIn(fan_in, gain) => {
            let mut r = rng::stream(seed, name, &[]);
            let dist = Normal::new(0.0, gain / (fan_in.max(1) as f64).sqrt()).expect("finite std");
            Tensor::from_vec(shape, (0..n).map(|_| dist.sample(&mut r)).collect())
        }
    }
}

pub const ARCHIVE_MAGIC: &[u8] = b"PCKPT1\n";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveHeader {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<ArchiveEntry>,
}

/// Versioned container: magic line, JSON header line, 0x00, then raw
/// little-endian f64 arrays in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ArchiveHeader {
            version: ARCHIVE_VERSION,
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| ArchiveEntry { name: k.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_string(&header).expect("archive header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(json.as_bytes());
        out.push(b'\n');
        out.push(0);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(ARCHIVE_MAGIC)
            .ok_or_else(|| Error::format("magic", "not a checkpoint archive"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("header", "missing header terminator"))?;
        let header: ArchiveHeader =
            serde_json::from_slice(&rest[..nl]).map_err(|e| Error::format("header", e.to_string()))?;
        if header.version != ARCHIVE_VERSION {
            return Err(Error::format("version", format!("unsupported checkpoint version {}", header.version)));
        }
        let mut payload = rest[nl + 1..]
            .strip_prefix(&[0u8])
            .ok_or_else(|| Error::format("separator", "missing 0x00 separator"))?;
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>() * 8).sum();
        if payload.len() != expected {
            return Err(Error::format("payload", format!("expected {expected} bytes, found {}", payload.len())));
        }
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let (head, tail) = payload.split_at(n * 8);
            let data: Vec<f64> = head
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(e.name.clone(), "non-finite value"));
            }
            tensors.insert(e.name, Tensor::from_vec(&e.shape, data));
            payload = tail;
        }
        Ok(TensorArchive { meta: header.meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorArchive::from_bytes(&bytes)
    }
}
