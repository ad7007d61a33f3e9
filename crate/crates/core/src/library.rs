//! Expert registry, the instance-embedding expert library, and routing.
//!
//! The library maps sampled training-instance embeddings (keys) to the id of
//! the expert trained on that instance's task. A target task is routed by
//! embedding a handful of its instances, finding each one's maximum inner
//! product key, and taking a vote over the experts that own those keys.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{TaskInstance, TaskSet};
use crate::keys::{EmbedderConfig, Embedder, EmbeddingVector, KeyError, TextFormat};
use crate::tokenizer::fnv1a64;

/// Keys sampled per expert unless configured otherwise.
pub const DEFAULT_SAMPLES_PER_EXPERT: usize = 100;
/// Target instances embedded per routing decision unless configured otherwise.
pub const DEFAULT_QUERIES: usize = 32;

pub const LIBRARY_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LibraryError {
    #[error("duplicate expert id `{0}`")]
    DuplicateExpertId(String),
    #[error("expert `{0}` has an empty task")]
    EmptyTask(String),
    #[error("zero key for instance `{instance}` of expert `{expert}`")]
    ZeroKey { expert: String, instance: String },
    #[error("library is empty")]
    EmptyLibrary,
    #[error("target task is empty")]
    EmptyTarget,
    #[error("no experts to choose from")]
    EmptyExpertSet,
    #[error("{0} must be at least 1")]
    InvalidCount(&'static str),
    #[error("key dimension {found} does not match library dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("entry references unknown expert `{0}`")]
    DanglingExpertId(String),
    #[error("unsupported library version {0}")]
    VersionUnsupported(u32),
    #[error("library uses external vectors; supply them to embed queries")]
    ExternalVectorsRequired,
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Key(#[from] KeyError),
}

pub type Result<T, E = LibraryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    /// Adapter-only expert trained on one prompt.
    Pe,
    /// Fully fine-tuned expert trained on a whole dataset.
    De,
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::Pe => "pe",
            ExpertKind::De => "de",
        })
    }
}

/// What produced an artifact: seed, tool version and input checksums.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub version: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertRecord {
    pub id: String,
    pub kind: ExpertKind,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    pub params: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ExpertRecord {
    /// Name of the task this expert was trained on: `<dataset>__<prompt>` for
    /// prompt experts, the dataset name for dataset experts.
    pub fn task_name(&self) -> String {
        match &self.prompt {
            Some(p) => format!("{}__{p}", self.dataset),
            None => self.dataset.clone(),
        }
    }
}

/// Ordered set of expert records with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    records: Vec<ExpertRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ExpertRecord) -> Result<()> {
        if self.get(&record.id).is_some() {
            return Err(LibraryError::DuplicateExpertId(record.id));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ExpertRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn records(&self) -> &[ExpertRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut reg = Registry::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExpertRecord = serde_json::from_str(line).map_err(|e| LibraryError::ParseError {
                line: i + 1,
                msg: e.to_string(),
            })?;
            reg.push(rec)?;
        }
        Ok(reg)
    }

    /// Missing files load as an empty registry.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        match fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }
}

/// How library keys were embedded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedSource {
    Builtin(EmbedderConfig),
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryHeader {
    pub version: u32,
    pub dim: usize,
    pub format: TextFormat,
    #[serde(rename = "S")]
    pub samples_per_expert: usize,
    pub seed: u64,
    pub embed: EmbedSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// One key and the expert it points to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryEntry {
    pub key: EmbeddingVector,
    #[serde(rename = "expert")]
    pub expert_id: String,
    #[serde(rename = "instance")]
    pub instance_id: String,
}

/// Keys are stored as one contiguous row-major matrix for scanning.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLibrary {
    header: LibraryHeader,
    keys: Vec<f32>,
    experts: Vec<String>,
    instances: Vec<String>,
}

impl ExpertLibrary {
    /// Empty library with the given settings.
    pub fn empty(
        dim: usize,
        format: TextFormat,
        samples_per_expert: usize,
        seed: u64,
        embed: EmbedSource,
    ) -> Result<Self> {
        if samples_per_expert == 0 {
            return Err(LibraryError::InvalidCount("S"));
        }
        if dim == 0 {
            return Err(LibraryError::InvalidCount("dimension"));
        }
        Ok(Self {
            header: LibraryHeader {
                version: LIBRARY_VERSION,
                dim,
                format,
                samples_per_expert,
                seed,
                embed,
                provenance: None,
            },
            keys: Vec::new(),
            experts: Vec::new(),
            instances: Vec::new(),
        })
    }

    pub fn header(&self) -> &LibraryHeader {
        &self.header
    }

    pub fn set_provenance(&mut self, provenance: Provenance) {
        self.header.provenance = Some(provenance);
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn format(&self) -> TextFormat {
        self.header.format
    }

    pub fn samples_per_expert(&self) -> usize {
        self.header.samples_per_expert
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.header.dim..(i + 1) * self.header.dim]
    }

    pub fn expert_of(&self, i: usize) -> &str {
        &self.experts[i]
    }

    pub fn entry(&self, i: usize) -> LibraryEntry {
        LibraryEntry {
            key: EmbeddingVector::from_raw(self.key(i).to_vec()),
            expert_id: self.experts[i].clone(),
            instance_id: self.instances[i].clone(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = LibraryEntry> + '_ {
        (0..self.len()).map(|i| self.entry(i))
    }

    /// Distinct expert ids in first-appearance order.
    pub fn expert_ids(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.experts.iter().filter(|e| seen.insert(e.as_str())).cloned().collect()
    }

    pub fn contains_expert(&self, id: &str) -> bool {
        self.experts.iter().any(|e| e == id)
    }

    /// Embedder matching the library's keys. External libraries need the
    /// query vectors handed in.
    pub fn embedder(&self, external: Option<HashMap<String, EmbeddingVector>>) -> Result<Embedder> {
        match (&self.header.embed, external) {
            (EmbedSource::Builtin(cfg), _) => Ok(Embedder::Builtin(cfg.clone())),
            (EmbedSource::External, Some(map)) => Ok(Embedder::External(map)),
            (EmbedSource::External, None) => Err(LibraryError::ExternalVectorsRequired),
        }
    }

    /// Appends one key. Rejects zero vectors and wrong dimensions.
    pub fn push_entry(&mut self, entry: LibraryEntry) -> Result<()> {
        if entry.key.dim() != self.header.dim {
            return Err(LibraryError::DimensionMismatch {
                expected: self.header.dim,
                found: entry.key.dim(),
            });
        }
        if entry.key.is_zero() {
            return Err(LibraryError::ZeroKey {
                expert: entry.expert_id,
                instance: entry.instance_id,
            });
        }
        self.keys.extend_from_slice(entry.key.values());
        self.experts.push(entry.expert_id);
        self.instances.push(entry.instance_id);
        Ok(())
    }

    /// Appends keys for one expert, exactly as [`build_library`] would.
    pub fn add_expert(&mut self, expert: &ExpertRecord, task: &TaskSet, embedder: &Embedder) -> Result<()> {
        if self.contains_expert(&expert.id) {
            return Err(LibraryError::DuplicateExpertId(expert.id.clone()));
        }
        let entries = self.sample_entries(expert, task, embedder)?;
        for e in entries {
            self.push_entry(e)?;
        }
        Ok(())
    }

    fn sample_entries(&self, expert: &ExpertRecord, task: &TaskSet, embedder: &Embedder) -> Result<Vec<LibraryEntry>> {
        if task.is_empty() {
            return Err(LibraryError::EmptyTask(expert.id.clone()));
        }
        let take = self.header.samples_per_expert.min(task.len());
        let mut rng = ChaCha8Rng::seed_from_u64(self.header.seed ^ fnv1a64(expert.id.as_bytes()));
        index::sample(&mut rng, task.len(), take)
            .into_iter()
            .map(|i| {
                let inst = &task.instances[i];
                Ok(LibraryEntry {
                    key: embedder.embed_instance(inst, self.header.format)?,
                    expert_id: expert.id.clone(),
                    instance_id: inst.id.clone(),
                })
            })
            .collect()
    }

    /// Header line followed by one line per entry.
    pub fn to_jsonl(&self) -> String {
        let mut s = serde_json::to_string(&self.header).expect("header serializes");
        s.push('\n');
        s.push_str(&self.entries_jsonl(0));
        s
    }

    /// Entry lines from index `from` on, for appending to an existing file.
    pub fn entries_jsonl(&self, from: usize) -> String {
        let mut s = String::new();
        for i in from..self.len() {
            s.push_str(&serde_json::to_string(&self.entry(i)).expect("entry serializes"));
            s.push('\n');
        }
        s
    }

    /// Parses a library file. With a registry, every entry's expert must be
    /// registered.
    pub fn parse(text: &str, registry: Option<&Registry>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(LibraryError::ParseError {
            line: 1,
            msg: "missing header".into(),
        })?;
        let header: LibraryHeader = serde_json::from_str(first).map_err(|e| LibraryError::ParseError {
            line: 1,
            msg: e.to_string(),
        })?;
        if header.version != LIBRARY_VERSION {
            return Err(LibraryError::VersionUnsupported(header.version));
        }
        let mut lib = Self::empty(
            header.dim,
            header.format,
            header.samples_per_expert,
            header.seed,
            header.embed.clone(),
        )?;
        lib.header.provenance = header.provenance;
        for (i, line) in lines {
            let entry: LibraryEntry = serde_json::from_str(line).map_err(|e| LibraryError::ParseError {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if let Some(reg) = registry {
                if reg.get(&entry.expert_id).is_none() {
                    return Err(LibraryError::DanglingExpertId(entry.expert_id));
                }
            }
            lib.push_entry(entry)?;
        }
        Ok(lib)
    }
}

/// Per-expert settings shared by build and extension.
#[derive(Debug, Clone)]
pub struct LibrarySettings {
    pub samples_per_expert: usize,
    pub format: TextFormat,
    pub seed: u64,
}

impl Default for LibrarySettings {
    fn default() -> Self {
        Self {
            samples_per_expert: DEFAULT_SAMPLES_PER_EXPERT,
            format: TextFormat::default(),
            seed: 0,
        }
    }
}

/// Samples `min(S, |task|)` instances per expert without replacement and
/// stores their embedded keys, in expert order then sample order.
pub fn build_library(
    experts: &[(ExpertRecord, TaskSet)],
    settings: &LibrarySettings,
    embedder: &Embedder,
) -> Result<ExpertLibrary> {
    let mut ids = HashSet::new();
    for (rec, task) in experts {
        if !ids.insert(rec.id.as_str()) {
            return Err(LibraryError::DuplicateExpertId(rec.id.clone()));
        }
        if task.is_empty() {
            return Err(LibraryError::EmptyTask(rec.id.clone()));
        }
    }
    let dim = match embedder.dim() {
        Some(d) => d,
        None => return Err(LibraryError::Key(KeyError::InvalidConfig("no external vectors".into()))),
    };
    let source = match embedder {
        Embedder::Builtin(cfg) => {
            cfg.validate()?;
            EmbedSource::Builtin(cfg.clone())
        }
        Embedder::External(_) => EmbedSource::External,
    };
    let mut lib = ExpertLibrary::empty(dim, settings.format, settings.samples_per_expert, settings.seed, source)?;
    for (rec, task) in experts {
        lib.add_expert(rec, task, embedder)?;
    }
    Ok(lib)
}

pub fn save_library(library: &ExpertLibrary, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, library.to_jsonl())?;
    Ok(())
}

pub fn load_library(path: impl AsRef<Path>, registry: Option<&Registry>) -> Result<ExpertLibrary> {
    ExpertLibrary::parse(&fs::read_to_string(path)?, registry)
}

/// Dot product with eight independent lanes, summed in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Best-matching key for a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub score: f32,
}

/// Exact maximum inner product over all entries; ties go to the lowest index.
pub fn nearest(library: &ExpertLibrary, query: &EmbeddingVector) -> Result<Hit> {
    if library.is_empty() {
        return Err(LibraryError::EmptyLibrary);
    }
    let dim = library.dim();
    if query.dim() != dim {
        return Err(LibraryError::DimensionMismatch {
            expected: dim,
            found: query.dim(),
        });
    }
    let q = query.values();
    let mut best = Hit {
        index: 0,
        score: f32::NEG_INFINITY,
    };
    for (i, key) in library.keys.chunks_exact(dim).enumerate() {
        let s = dot(q, key);
        if s > best.score {
            best = Hit { index: i, score: s };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMatch {
    pub instance: String,
    pub entry: usize,
    pub expert: String,
    pub key_instance: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub chosen_expert: String,
    pub votes: BTreeMap<String, usize>,
    pub per_query: Vec<QueryMatch>,
    pub seed: u64,
}

/// Picks the expert with the most votes, then the highest summed score,
/// then the smallest id.
pub fn tally(per_query: &[QueryMatch]) -> Option<(String, BTreeMap<String, usize>)> {
    let mut votes: BTreeMap<String, usize> = BTreeMap::new();
    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for m in per_query {
        *votes.entry(m.expert.clone()).or_default() += 1;
        *sums.entry(m.expert.as_str()).or_default() += m.score as f64;
    }
    let mut best: Option<(&str, usize, f64)> = None;
    // BTreeMap iterates ids in ascending order, so strict comparisons keep
    // the smallest id on a full tie.
    for (id, &count) in &votes {
        let sum = sums[id.as_str()];
        let better = match best {
            None => true,
            Some((_, c, s)) => count > c || (count == c && sum > s),
        };
        if better {
            best = Some((id, count, sum));
        }
    }
    let chosen = best?.0.to_string();
    Some((chosen, votes))
}

/// Routes pre-embedded queries.
pub fn route_embedded(library: &ExpertLibrary, queries: &[(String, EmbeddingVector)], seed: u64) -> Result<RoutingDecision> {
    if library.is_empty() {
        return Err(LibraryError::EmptyLibrary);
    }
    if queries.is_empty() {
        return Err(LibraryError::EmptyTarget);
    }
    let per_query = queries
        .iter()
        .map(|(id, q)| {
            let hit = nearest(library, q)?;
            Ok(QueryMatch {
                instance: id.clone(),
                entry: hit.index,
                expert: library.experts[hit.index].clone(),
                key_instance: library.instances[hit.index].clone(),
                score: hit.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (chosen_expert, votes) = tally(&per_query).expect("at least one query");
    Ok(RoutingDecision {
        chosen_expert,
        votes,
        per_query,
        seed,
    })
}

/// Draws `min(q, |target|)` instances without replacement.
pub fn sample_queries(target: &[TaskInstance], q: usize, seed: u64) -> Vec<&TaskInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, target.len(), q.min(target.len()))
        .into_iter()
        .map(|i| &target[i])
        .collect()
}

/// Samples `Q` target instances, renders them in the library's format, and
/// votes over their nearest keys.
pub fn route(
    library: &ExpertLibrary,
    target: &[TaskInstance],
    q: usize,
    embedder: &Embedder,
    seed: u64,
) -> Result<RoutingDecision> {
    if library.is_empty() {
        return Err(LibraryError::EmptyLibrary);
    }
    if target.is_empty() {
        return Err(LibraryError::EmptyTarget);
    }
    if q == 0 {
        return Err(LibraryError::InvalidCount("Q"));
    }
    let queries = sample_queries(target, q, seed)
        .into_iter()
        .map(|inst| Ok((inst.id.clone(), embedder.embed_instance(inst, library.format())?)))
        .collect::<Result<Vec<_>>>()?;
    route_embedded(library, &queries, seed)
}

/// Evaluates every expert on the target and returns the best; equal scores
/// go to the smallest id.
pub fn oracle_route<E>(
    experts: &[ExpertRecord],
    target: &TaskSet,
    mut evaluator: impl FnMut(&ExpertRecord, &TaskSet) -> std::result::Result<f64, E>,
) -> std::result::Result<(String, f64), E>
where
    E: From<LibraryError>,
{
    if experts.is_empty() {
        return Err(LibraryError::EmptyExpertSet.into());
    }
    let mut best: Option<(&str, f64)> = None;
    for rec in experts {
        let score = evaluator(rec, target)?;
        let better = match best {
            None => true,
            Some((id, s)) => score > s || (score == s && rec.id.as_str() < id),
        };
        if better {
            best = Some((&rec.id, score));
        }
    }
    let (id, score) = best.expect("nonempty");
    Ok((id.to_string(), score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Split;
    use crate::keys::embed;

    fn record(id: &str) -> ExpertRecord {
        ExpertRecord {
            id: id.into(),
            kind: ExpertKind::Pe,
            dataset: id.into(),
            prompt: Some("p0".into()),
            params: format!("{id}.elmp"),
            provenance: None,
        }
    }

    fn task(name: &str, n: usize) -> TaskSet {
        let instances = (0..n)
            .map(|i| TaskInstance {
                id: format!("{name}-{i}"),
                input: format!("{name} instance number {i}"),
                choices: vec!["yes".into(), "no".into()],
                target: "yes".into(),
            })
            .collect();
        TaskSet::new(name, Split::Train, instances).unwrap()
    }

    fn builtin() -> Embedder {
        Embedder::Builtin(EmbedderConfig::default())
    }

    fn settings(s: usize) -> LibrarySettings {
        LibrarySettings {
            samples_per_expert: s,
            ..LibrarySettings::default()
        }
    }

    #[test]
    fn defaults() {
        assert_eq!(DEFAULT_SAMPLES_PER_EXPERT, 100);
        assert_eq!(DEFAULT_QUERIES, 32);
        assert_eq!(LibrarySettings::default().format, TextFormat::E);
    }

    #[test]
    fn entry_count_is_capped() {
        let experts: Vec<_> = ["a", "b", "c", "d"].iter().map(|id| (record(id), task(id, 5))).collect();
        assert_eq!(build_library(&experts, &settings(3), &builtin()).unwrap().len(), 12);
        let small = vec![(record("a"), task("a", 2))];
        assert_eq!(build_library(&small, &settings(100), &builtin()).unwrap().len(), 2);
    }

    #[test]
    fn build_errors() {
        let dup = vec![(record("a"), task("a", 2)), (record("a"), task("b", 2))];
        assert!(matches!(
            build_library(&dup, &settings(1), &builtin()),
            Err(LibraryError::DuplicateExpertId(_))
        ));
        let mut empty = task("a", 1);
        empty.instances.clear();
        assert!(matches!(
            build_library(&[(record("a"), empty)], &settings(1), &builtin()),
            Err(LibraryError::EmptyTask(_))
        ));
        let mut blank = task("a", 1);
        blank.instances[0].input = String::new();
        let zero = Embedder::Builtin(EmbedderConfig::default());
        let mut lib = ExpertLibrary::empty(256, TextFormat::F, 5, 0, EmbedSource::Builtin(EmbedderConfig::default())).unwrap();
        assert!(matches!(
            lib.add_expert(&record("a"), &blank, &zero),
            Err(LibraryError::ZeroKey { .. })
        ));
        assert!(matches!(
            build_library(&[(record("a"), task("a", 1))], &settings(0), &builtin()),
            Err(LibraryError::InvalidCount("S"))
        ));
    }

    #[test]
    fn add_to_empty_equals_build() {
        let built = build_library(&[(record("a"), task("a", 9))], &settings(4), &builtin()).unwrap();
        let mut lib = build_library(&[], &settings(4), &builtin()).unwrap();
        lib.add_expert(&record("a"), &task("a", 9), &builtin()).unwrap();
        assert_eq!(lib, built);
        assert!(matches!(
            lib.add_expert(&record("a"), &task("a", 9), &builtin()),
            Err(LibraryError::DuplicateExpertId(_))
        ));
    }

    #[test]
    fn nearest_self_match_and_ties() {
        let experts: Vec<_> = ["a", "b"].iter().map(|id| (record(id), task(id, 4))).collect();
        let lib = build_library(&experts, &settings(4), &builtin()).unwrap();
        for i in 0..lib.len() {
            let q = EmbeddingVector::from_raw(lib.key(i).to_vec());
            let hit = nearest(&lib, &q).unwrap();
            assert!((hit.score - 1.0).abs() < 1e-6);
            assert_eq!(lib.key(hit.index), lib.key(i));
        }

        let cfg = EmbedderConfig::default();
        let k = embed("same text", &cfg);
        let mut lib = ExpertLibrary::empty(256, TextFormat::E, 1, 0, EmbedSource::Builtin(cfg)).unwrap();
        for (e, i) in [("z", "z0"), ("a", "a0")] {
            lib.push_entry(LibraryEntry {
                key: k.clone(),
                expert_id: e.into(),
                instance_id: i.into(),
            })
            .unwrap();
        }
        assert_eq!(nearest(&lib, &k).unwrap().index, 0);
    }

    #[test]
    fn empty_library_and_target() {
        let lib = build_library(&[], &settings(1), &builtin()).unwrap();
        let q = embed("x", &EmbedderConfig::default());
        assert!(matches!(nearest(&lib, &q), Err(LibraryError::EmptyLibrary)));
        let full = build_library(&[(record("a"), task("a", 3))], &settings(1), &builtin()).unwrap();
        assert!(matches!(route(&full, &[], 4, &builtin(), 0), Err(LibraryError::EmptyTarget)));
    }

    fn qm(expert: &str, score: f32) -> QueryMatch {
        QueryMatch {
            instance: "q".into(),
            entry: 0,
            expert: expert.into(),
            key_instance: "k".into(),
            score,
        }
    }

    #[test]
    fn tally_tie_rules() {
        let v = [qm("A", 0.5), qm("B", 0.9), qm("A", 0.5), qm("B", 0.9), qm("A", 0.5)];
        assert_eq!(tally(&v).unwrap().0, "A");
        let v = [qm("A", 0.8), qm("A", 0.9), qm("B", 0.9), qm("B", 1.0)];
        assert_eq!(tally(&v).unwrap().0, "B");
        let v = [qm("B", 0.5), qm("A", 0.5)];
        assert_eq!(tally(&v).unwrap().0, "A");
        assert!(tally(&[]).is_none());
    }

    #[test]
    fn single_expert_gets_every_vote() {
        let lib = build_library(&[(record("solo"), task("solo", 10))], &settings(5), &builtin()).unwrap();
        let d = route(&lib, &task("other", 40).instances, 32, &builtin(), 3).unwrap();
        assert_eq!(d.chosen_expert, "solo");
        assert_eq!(d.votes["solo"], 32);
        assert_eq!(d.per_query.len(), 32);
    }

    #[test]
    fn library_round_trip_and_strict_load() {
        let experts: Vec<_> = ["a", "b"].iter().map(|id| (record(id), task(id, 6))).collect();
        let lib = build_library(&experts, &settings(3), &builtin()).unwrap();
        let text = lib.to_jsonl();
        assert!(text.starts_with("{\"version\":1,\"dim\":256,\"format\":\"e\",\"S\":3,\"seed\":0,"));
        let back = ExpertLibrary::parse(&text, None).unwrap();
        assert_eq!(back, lib);
        assert_eq!(back.to_jsonl(), text);

        let mut reg = Registry::new();
        reg.push(record("a")).unwrap();
        assert!(matches!(
            ExpertLibrary::parse(&text, Some(&reg)),
            Err(LibraryError::DanglingExpertId(id)) if id == "b"
        ));
        reg.push(record("b")).unwrap();
        assert!(ExpertLibrary::parse(&text, Some(&reg)).is_ok());
        assert!(matches!(
            ExpertLibrary::parse("garbage\n", None),
            Err(LibraryError::ParseError { line: 1, .. })
        ));
    }

    #[test]
    fn registry_round_trip() {
        let mut reg = Registry::new();
        reg.push(record("a")).unwrap();
        let mut de = record("b");
        de.kind = ExpertKind::De;
        de.prompt = None;
        reg.push(de).unwrap();
        assert!(matches!(reg.push(record("a")), Err(LibraryError::DuplicateExpertId(_))));
        let back = Registry::parse(&reg.to_jsonl()).unwrap();
        assert_eq!(back, reg);
        assert_eq!(back.get("a").unwrap().task_name(), "a__p0");
        assert_eq!(back.get("b").unwrap().task_name(), "b");
    }

    #[test]
    fn oracle_picks_best_then_smallest_id() {
        let experts = vec![record("b"), record("a"), record("c")];
        let t = task("t", 1);
        let scores: HashMap<&str, f64> = [("a", 0.5), ("b", 0.7), ("c", 0.7)].into_iter().collect();
        let got = oracle_route::<LibraryError>(&experts, &t, |r, _| Ok(scores[r.id.as_str()])).unwrap();
        assert_eq!(got, ("b".to_string(), 0.7));
        let single = oracle_route::<LibraryError>(&experts[1..2], &t, |_, _| Ok(0.0)).unwrap();
        assert_eq!(single.0, "a");
        assert!(matches!(
            oracle_route::<LibraryError>(&[], &t, |_, _| Ok(0.0)),
            Err(LibraryError::EmptyExpertSet)
        ));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..19).map(|i| i as f32 * 0.25 - 2.0).collect();
        let b: Vec<f32> = (0..19).map(|i| 1.0 - i as f32 * 0.125).collect();
        let naive: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-5);
    }
}
