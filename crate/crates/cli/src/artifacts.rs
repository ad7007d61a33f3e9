//! File plumbing shared by the subcommands: base models and their config
//! sidecars, registry-relative paths, checksums and provenance.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use expert_lm::keys::{load_external_vectors, EmbeddingVector};
use expert_lm::library::{ExpertRecord, LibraryError, Provenance, Registry};
use expert_lm::model::{Model, ModelConfig};
use expert_lm::params::{load_params, ParameterSet};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Model configuration stored next to a base parameter file.
#[derive(Debug, Serialize, Deserialize)]
pub struct BaseSidecar {
    pub config: ModelConfig,
    pub provenance: Provenance,
}

pub fn sidecar_path(params: &Path) -> PathBuf {
    let mut s = params.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub struct Base {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

pub fn load_base(path: &Path) -> Result<Base> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).with_context(|| format!("reading model config {}", side.display()))?;
    let sidecar: BaseSidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
    let params = load_params(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Base {
        config: sidecar.config,
        params,
    })
}

impl Base {
    /// Builds a model from an expert or merged parameter set: adapter sets
    /// ride on this base, full sets replace it.
    pub fn model_for(&self, params: &ParameterSet) -> Result<Model> {
        Ok(if params.is_adapter() {
            Model::new(self.config, &self.params, Some(params))?
        } else {
            Model::new(self.config, params, None)?
        })
    }
}

pub fn checksum_hex(bytes: &[u8]) -> String {
    format!("{:08x}", crc32fast::hash(bytes))
}

/// CRC32 of a file's contents. Parameter files already end in the CRC32 of
/// everything before it, and hashing those whole files would always give
/// the same residue, so for them the stored value is reported.
pub fn file_checksum(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(expert_lm::params::MAGIC) {
        let params = ParameterSet::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))?;
        return Ok(format!("{:08x}", params.checksum()));
    }
    Ok(checksum_hex(&bytes))
}

/// Provenance with checksums of the named input files.
pub fn provenance(seed: u64, inputs: &[(&str, &Path)]) -> Result<Provenance> {
    let mut map = BTreeMap::new();
    for (name, path) in inputs {
        map.insert(name.to_string(), file_checksum(path)?);
    }
    Ok(Provenance {
        seed,
        version: VERSION.to_string(),
        inputs: map,
    })
}

/// Parameter paths in the registry are stored relative to its directory
/// whenever the file lives below it.
pub fn registry_dir(registry: &Path) -> PathBuf {
    match registry.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn relative_to_registry(registry: &Path, file: &Path) -> Result<String> {
    let dir = registry_dir(registry).canonicalize()?;
    let abs = file.canonicalize()?;
    let rel = abs.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(abs);
    Ok(rel.to_string_lossy().into_owned())
}

pub fn resolve_params(registry: &Path, record: &ExpertRecord) -> PathBuf {
    let p = Path::new(&record.params);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        registry_dir(registry).join(p)
    }
}

/// Loads an expert's parameters, reporting a missing file as a dangling id.
pub fn load_expert(registry: &Path, record: &ExpertRecord) -> Result<ParameterSet> {
    let path = resolve_params(registry, record);
    if !path.exists() {
        return Err(LibraryError::DanglingExpertId(record.id.clone()))
            .with_context(|| format!("parameter file {} does not exist", path.display()));
    }
    let params = load_params(&path).with_context(|| format!("loading {}", path.display()))?;
    let is_pe = record.kind == expert_lm::library::ExpertKind::Pe;
    if params.is_adapter() != is_pe {
        bail!("expert `{}` is registered as {} but {} holds the other kind", record.id, record.kind, path.display());
    }
    Ok(params)
}

pub fn load_registry(path: &Path) -> Result<Registry> {
    Registry::load(path).with_context(|| format!("loading registry {}", path.display()))
}

pub fn find_record<'a>(registry: &'a Registry, id: &str) -> Result<&'a ExpertRecord> {
    registry
        .get(id)
        .ok_or_else(|| LibraryError::DanglingExpertId(id.to_string()))
        .with_context(|| "expert is not in the registry".to_string())
}

/// `builtin` or `external:<path>`.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedChoice {
    Builtin,
    External(PathBuf),
}

impl std::str::FromStr for EmbedChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "builtin" => Ok(Self::Builtin),
            Some(("external", path)) if !path.is_empty() => Ok(Self::External(PathBuf::from(path))),
            _ => Err(format!("expected `builtin` or `external:<path>`, got `{s}`")),
        }
    }
}

impl EmbedChoice {
    pub fn external_vectors(&self) -> Result<Option<HashMap<String, EmbeddingVector>>> {
        match self {
            Self::Builtin => Ok(None),
            Self::External(p) => Ok(Some(
                load_external_vectors(p).with_context(|| format!("loading vectors {}", p.display()))?,
            )),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
