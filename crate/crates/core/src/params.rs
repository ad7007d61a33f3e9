//! Named tensor parameter sets, task vectors and weighted merging.
//!
//! A [`ParameterSet`] is an insertion-ordered map of dense `f32` tensors. Two
//! sets share a schema when their names, order and shapes are identical;
//! every binary operation here checks that first and refuses to truncate.
//!
//! Arithmetic is carried out in `f64` and rounded to `f32` once per element.

use std::fs;
use std::io;
use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

/// File magic of the parameter format.
pub const MAGIC: &[u8; 4] = b"ELMP";
/// Only supported format version.
pub const FORMAT_VERSION: u16 = 1;

/// Name prefix carried by every adapter tensor.
pub const ADAPTER_PREFIX: &str = "adapter.";

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("merge requires at least one term")]
    EmptyTerms,
    #[error("tensor `{name}`: shape {shape:?} holds {expected} values but {actual} were given")]
    ShapeDataMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{0}` has an empty or zero-sized shape")]
    InvalidShape(String),
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("non-finite merge weight {0}")]
    NonFiniteLambda(f64),
    #[error("i/o failure: {0}")]
    IoFailure(#[from] io::Error),
    #[error("bad magic bytes {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("corrupt tensor header: {0}")]
    CorruptTensorHeader(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
}

pub type Result<T, E = ParamError> = std::result::Result<T, E>;

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Insertion-ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor, validating shape, length and finiteness.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.is_empty() || shape.contains(&0) {
            return Err(ParamError::InvalidShape(name));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(ParamError::ShapeDataMismatch {
                name,
                shape,
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite(name));
        }
        if self.tensors.contains_key(&name) {
            return Err(ParamError::DuplicateName(name));
        }
        self.tensors.insert(name, Tensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// True when every tensor name carries the adapter prefix.
    pub fn is_adapter(&self) -> bool {
        !self.is_empty() && self.names().all(|n| n.starts_with(ADAPTER_PREFIX))
    }

    /// Same names, order and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: vec![0.0; t.data.len()],
                    },
                )
            })
            .collect();
        Self { tensors }
    }

    /// Checks names, order and shapes against `other`.
    pub fn check_schema(&self, other: &ParameterSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(ParamError::SchemaMismatch(format!(
                "{} tensors vs {} tensors",
                self.len(),
                other.len()
            )));
        }
        for (i, ((na, ta), (nb, tb))) in self.tensors.iter().zip(other.tensors.iter()).enumerate() {
            if na != nb {
                return Err(ParamError::SchemaMismatch(format!(
                    "tensor #{i} is `{na}` vs `{nb}`"
                )));
            }
            if ta.shape != tb.shape {
                return Err(ParamError::SchemaMismatch(format!(
                    "`{na}` has shape {:?} vs {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Ok(())
    }

    pub fn same_schema(&self, other: &ParameterSet) -> bool {
        self.check_schema(other).is_ok()
    }

    /// Bitwise equality of names, shapes and values (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.same_schema(other)
            && self.tensors.values().zip(other.tensors.values()).all(|(a, b)| {
                a.data
                    .iter()
                    .zip(&b.data)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// CRC32 of the serialized form, the value stored in the file trailer.
    pub fn checksum(&self) -> u32 {
        let bytes = self.to_bytes();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("four bytes"))
    }

    /// Serializes to the `ELMP` v1 layout, trailing CRC32 included.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_values() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(ParamError::BadMagic(bytes[..bytes.len().min(4)].to_vec()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(ParamError::VersionUnsupported(version));
        }
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(ParamError::CorruptTensorHeader("file truncated".into()));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(ParamError::ChecksumMismatch { stored, computed });
        }
        r.buf = &bytes[..body_end];

        let count = r.u32("tensor count")? as usize;
        let mut set = ParameterSet::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| ParamError::CorruptTensorHeader(format!("tensor #{i}: name is not UTF-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            if rank == 0 {
                return Err(ParamError::CorruptTensorHeader(format!("`{name}`: rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            if shape.contains(&0) {
                return Err(ParamError::CorruptTensorHeader(format!("`{name}`: zero dimension")));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| {
                    ParamError::CorruptTensorHeader(format!("`{name}`: shape {shape:?} exceeds file size"))
                })?;
            let raw = r.take(n * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            set.insert(name, shape, data).map_err(|e| match e {
                ParamError::DuplicateName(n) => ParamError::CorruptTensorHeader(format!("duplicate name `{n}`")),
                other => other,
            })?;
        }
        if r.remaining() != 0 {
            return Err(ParamError::CorruptTensorHeader(format!(
                "{} trailing bytes after last tensor",
                r.remaining()
            )));
        }
        Ok(set)
    }

    /// Builds a set from tensors already known to be well formed.
    pub(crate) fn from_parts(parts: impl IntoIterator<Item = (String, Vec<usize>, Vec<f32>)>) -> Result<Self> {
        let mut set = ParameterSet::new();
        for (name, shape, data) in parts {
            set.insert(name, shape, data)?;
        }
        Ok(set)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len().saturating_sub(self.pos)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(ParamError::CorruptTensorHeader(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn save_params(params: &ParameterSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, params.to_bytes())?;
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParameterSet> {
    ParameterSet::from_bytes(&fs::read(path)?)
}

/// Difference between fine-tuned and pretrained parameters.
///
/// Shares the schema of the parameter set it was derived against.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector(ParameterSet);

impl TaskVector {
    /// Wraps a parameter set as a displacement against an all-zero baseline.
    ///
    /// This is how adapter experts enter the merging arithmetic: their
    /// trained adapter *is* the displacement.
    pub fn from_displacement(delta: ParameterSet) -> Self {
        Self(delta)
    }

    pub fn as_params(&self) -> &ParameterSet {
        &self.0
    }

    pub fn into_params(self) -> ParameterSet {
        self.0
    }

    /// True when every element is exactly zero.
    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|(_, t)| t.data.iter().all(|&v| v == 0.0))
    }

    /// Euclidean norm over all elements.
    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }
}

/// One weighted task vector in a merge.
#[derive(Debug, Clone)]
pub struct MergeTerm {
    pub lambda: f64,
    pub tau: TaskVector,
}

impl MergeTerm {
    pub fn new(lambda: f64, tau: TaskVector) -> Self {
        Self { lambda, tau }
    }
}

/// `theta_d - theta_pre`, element-wise.
pub fn task_vector(theta_d: &ParameterSet, theta_pre: &ParameterSet) -> Result<TaskVector> {
    theta_d.check_schema(theta_pre)?;
    let parts = theta_d.iter().zip(theta_pre.iter()).map(|((name, d), (_, p))| {
        let data = d
            .data
            .iter()
            .zip(&p.data)
            .map(|(&a, &b)| (a as f64 - b as f64) as f32)
            .collect();
        (name.to_string(), d.shape.clone(), data)
    });
    Ok(TaskVector(ParameterSet::from_parts(parts)?))
}

/// `theta_pre + sum_i lambda_i * tau_i`.
///
/// Terms with a weight of exactly zero are skipped, so an all-zero weighting
/// returns `theta_pre` bit for bit. Weights are not normalized.
pub fn merge(theta_pre: &ParameterSet, terms: &[MergeTerm]) -> Result<ParameterSet> {
    if terms.is_empty() {
        return Err(ParamError::EmptyTerms);
    }
    for term in terms {
        if !term.lambda.is_finite() {
            return Err(ParamError::NonFiniteLambda(term.lambda));
        }
        term.tau.0.check_schema(theta_pre)?;
    }
    let active: Vec<&MergeTerm> = terms.iter().filter(|t| t.lambda != 0.0).collect();
    let mut parts = Vec::with_capacity(theta_pre.len());
    for (idx, (name, base)) in theta_pre.tensors.iter().enumerate() {
        let mut acc: Vec<f64> = base.data.iter().map(|&v| v as f64).collect();
        for term in &active {
            let tau = &term.tau.0.tensors[idx].data;
            for (a, &t) in acc.iter_mut().zip(tau) {
                *a += term.lambda * t as f64;
            }
        }
        let data = if active.is_empty() {
            base.data.clone()
        } else {
            acc.into_iter().map(|v| v as f32).collect()
        };
        parts.push((name.clone(), base.shape.clone(), data));
    }
    ParameterSet::from_parts(parts)
}

/// Merge with every weight set to `1/N`.
pub fn uniform_merge(theta_pre: &ParameterSet, taus: &[TaskVector]) -> Result<ParameterSet> {
    if taus.is_empty() {
        return Err(ParamError::EmptyTerms);
    }
    let lambda = 1.0 / taus.len() as f64;
    let terms: Vec<MergeTerm> = taus.iter().map(|t| MergeTerm::new(lambda, t.clone())).collect();
    merge(theta_pre, &terms)
}
