//! Library key texts and their embeddings.
//!
//! Keys are rendered from an instance with one of ten text formats and
//! embedded either with the built-in feature-hashing embedder or looked up in
//! a file of externally computed vectors.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::TaskInstance;
use crate::tokenizer::{fnv1a64, fnv1a64_from};

#[derive(Debug, Error)]
pub enum KeyError {
    #[error("vector dimension {found} does not match {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("zero vector for `{0}`")]
    ZeroVector(String),
    #[error("no external vector for instance `{0}`")]
    MissingVector(String),
    #[error("duplicate vector id `{0}`")]
    DuplicateId(String),
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error("unknown text format `{0}` (expected a..j)")]
    UnknownFormat(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = KeyError> = std::result::Result<T, E>;

/// The ten key text layouts, `a` through `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TextFormat {
    /// `Instance: {instance}`
    A,
    /// `Answer Choices: {label list}`
    B,
    /// `Answer Choices: {answer choice}`
    C,
    /// `Answer Choices: {label list}, Instance: {instance}`
    D,
    /// `Answer Choices: {answer choice}, Instance: {instance}`
    #[default]
    E,
    /// `{instance}`
    F,
    /// `{label list}`
    G,
    /// `{answer choice}`
    H,
    /// `{label list}</s>{instance}`
    I,
    /// `{answer choice}</s>{instance}`
    J,
}

impl TextFormat {
    pub const ALL: [TextFormat; 10] = [
        TextFormat::A,
        TextFormat::B,
        TextFormat::C,
        TextFormat::D,
        TextFormat::E,
        TextFormat::F,
        TextFormat::G,
        TextFormat::H,
        TextFormat::I,
        TextFormat::J,
    ];

    pub fn letter(&self) -> char {
        (b'a' + Self::ALL.iter().position(|f| f == self).unwrap() as u8) as char
    }
}

impl fmt::Display for TextFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for TextFormat {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c @ 'a'..='j'), None) => Ok(Self::ALL[(c as u8 - b'a') as usize]),
            _ => Err(KeyError::UnknownFormat(s.to_string())),
        }
    }
}

impl Serialize for TextFormat {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TextFormat {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn answer_choice(choices: &[String]) -> String {
    if choices.is_empty() {
        "None".to_string()
    } else {
        choices.join("|")
    }
}

fn label_list(choices: &[String]) -> String {
    if choices.is_empty() {
        return "None".to_string();
    }
    let quoted: Vec<String> = choices.iter().map(|c| format!("'{c}'")).collect();
    format!("[{}]", quoted.join(", "))
}

/// Renders the key text of an instance.
pub fn render_key(instance: &TaskInstance, format: TextFormat) -> String {
    let inst = &instance.input;
    let ac = || answer_choice(&instance.choices);
    let ll = || label_list(&instance.choices);
    match format {
        TextFormat::A => format!("Instance: {inst}"),
        TextFormat::B => format!("Answer Choices: {}", ll()),
        TextFormat::C => format!("Answer Choices: {}", ac()),
        TextFormat::D => format!("Answer Choices: {}, Instance: {inst}", ll()),
        TextFormat::E => format!("Answer Choices: {}, Instance: {inst}", ac()),
        TextFormat::F => inst.clone(),
        TextFormat::G => ll(),
        TextFormat::H => ac(),
        TextFormat::I => format!("{}</s>{inst}", ll()),
        TextFormat::J => format!("{}</s>{inst}", ac()),
    }
}

/// Settings of the feature-hashing embedder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub ngrams: Vec<usize>,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            ngrams: vec![3, 4, 5],
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 8 {
            return Err(KeyError::InvalidConfig("dimension must be at least 8".into()));
        }
        if self.ngrams.is_empty() || self.ngrams.contains(&0) {
            return Err(KeyError::InvalidConfig("n-gram sizes must be nonempty and positive".into()));
        }
        Ok(())
    }

    /// Bucket and sign of one n-gram.
    pub fn slot(&self, gram: &str) -> (usize, f32) {
        let h = fnv1a64_from(fnv1a64(&self.seed.to_le_bytes()), gram.as_bytes());
        let sign = if h & 1 == 1 { -1.0 } else { 1.0 };
        (((h >> 1) % self.dim as u64) as usize, sign)
    }
}

/// Unit-norm embedding (or all zeros for empty text).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `values` to unit length.
    pub fn normalized(mut values: Vec<f32>) -> Option<Self> {
        let norm = values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        for v in &mut values {
            *v = (*v as f64 / norm) as f32;
        }
        Some(Self(values))
    }

    /// Wraps values as-is; callers are responsible for the norm.
    pub fn from_raw(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(&a, &b)| a as f64 * b as f64).sum()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        let denom = self.norm() * other.norm();
        if denom == 0.0 {
            0.0
        } else {
            (self.dot(other) / denom).clamp(-1.0, 1.0)
        }
    }
}

/// Signed character n-gram counts hashed into `dim` buckets, L2-normalized.
///
/// Text shorter than an n-gram size contributes itself as a single gram of
/// that size, so any nonempty text has at least one feature.
pub fn embed(text: &str, cfg: &EmbedderConfig) -> EmbeddingVector {
    let mut counts = vec![0.0f64; cfg.dim];
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    if chars.is_empty() {
        return EmbeddingVector(vec![0.0; cfg.dim]);
    }
    for &n in &cfg.ngrams {
        if chars.len() < n {
            let (b, s) = cfg.slot(text);
            counts[b] += s as f64;
            continue;
        }
        for start in 0..=chars.len() - n {
            let from = chars[start].0;
            let to = chars.get(start + n).map_or(text.len(), |c| c.0);
            let (b, s) = cfg.slot(&text[from..to]);
            counts[b] += s as f64;
        }
    }
    let norm = counts.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // Every gram cancelled out against another.
        return EmbeddingVector(vec![0.0; cfg.dim]);
    }
    EmbeddingVector(counts.iter().map(|v| (v / norm) as f32).collect())
}

#[derive(Deserialize)]
struct VectorRecord {
    id: String,
    vector: Vec<f32>,
}

/// Parses JSON-lines `{"id": ..., "vector": [...]}` records, normalizing each.
pub fn parse_external_vectors(text: &str) -> Result<HashMap<String, EmbeddingVector>> {
    let mut out = HashMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: VectorRecord = serde_json::from_str(line).map_err(|e| KeyError::ParseError {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match dim {
            None => dim = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(KeyError::DimensionMismatch {
                    expected: d,
                    found: rec.vector.len(),
                })
            }
            _ => {}
        }
        let v = EmbeddingVector::normalized(rec.vector).ok_or_else(|| KeyError::ZeroVector(rec.id.clone()))?;
        if out.insert(rec.id.clone(), v).is_some() {
            return Err(KeyError::DuplicateId(rec.id));
        }
    }
    Ok(out)
}

pub fn load_external_vectors(path: impl AsRef<Path>) -> Result<HashMap<String, EmbeddingVector>> {
    parse_external_vectors(&fs::read_to_string(path)?)
}

/// Where key and query embeddings come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    Builtin(EmbedderConfig),
    External(HashMap<String, EmbeddingVector>),
}

impl Embedder {
    /// Embedding of `instance` rendered with `format`.
    pub fn embed_instance(&self, instance: &TaskInstance, format: TextFormat) -> Result<EmbeddingVector> {
        match self {
            Embedder::Builtin(cfg) => Ok(embed(&render_key(instance, format), cfg)),
            Embedder::External(map) => map
                .get(&instance.id)
                .cloned()
                .ok_or_else(|| KeyError::MissingVector(instance.id.clone())),
        }
    }

    /// Dimension of produced vectors, when known.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Embedder::Builtin(cfg) => Some(cfg.dim),
            Embedder::External(map) => map.values().next().map(EmbeddingVector::dim),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance(input: &str, choices: &[&str]) -> TaskInstance {
        TaskInstance {
            id: "x".into(),
            input: input.into(),
            choices: choices.iter().map(|s| s.to_string()).collect(),
            target: choices.first().map_or("t", |s| *s).into(),
        }
    }

    #[test]
    fn renders_answer_choices_and_instance() {
        let i = instance("Does A entail B?", &["Yes", "No"]);
        assert_eq!(
            render_key(&i, TextFormat::E),
            "Answer Choices: Yes|No, Instance: Does A entail B?"
        );
        let g = instance("summarize this", &[]);
        assert_eq!(
            render_key(&g, TextFormat::E),
            "Answer Choices: None, Instance: summarize this"
        );
    }

    #[test]
    fn renders_label_list() {
        let i = instance("q", &["swim", "fly", "walk", "run"]);
        assert_eq!(
            render_key(&i, TextFormat::B),
            "Answer Choices: ['swim', 'fly', 'walk', 'run']"
        );
        assert_eq!(render_key(&i, TextFormat::G), "['swim', 'fly', 'walk', 'run']");
        assert_eq!(render_key(&i, TextFormat::I), "['swim', 'fly', 'walk', 'run']</s>q");
    }

    #[test]
    fn renders_remaining_formats() {
        let i = instance("q", &["A", "B"]);
        let got: Vec<String> = TextFormat::ALL.iter().map(|f| render_key(&i, *f)).collect();
        assert_eq!(
            got,
            [
                "Instance: q",
                "Answer Choices: ['A', 'B']",
                "Answer Choices: A|B",
                "Answer Choices: ['A', 'B'], Instance: q",
                "Answer Choices: A|B, Instance: q",
                "q",
                "['A', 'B']",
                "A|B",
                "['A', 'B']</s>q",
                "A|B</s>q",
            ]
        );
    }

    #[test]
    fn format_letters_round_trip() {
        for f in TextFormat::ALL {
            assert_eq!(f.to_string().parse::<TextFormat>().unwrap(), f);
        }
        assert!("k".parse::<TextFormat>().is_err());
        assert!("ab".parse::<TextFormat>().is_err());
        assert_eq!(TextFormat::default(), TextFormat::E);
    }

    #[test]
    fn embed_deterministic_and_unit() {
        let cfg = EmbedderConfig::default();
        let a = embed("Answer Choices: Yes|No, Instance: hi", &cfg);
        let b = embed("Answer Choices: Yes|No, Instance: hi", &cfg);
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
        assert!((embed("ab", &cfg).norm() - 1.0).abs() < 1e-6);
        assert!(embed("", &cfg).is_zero());
    }

    #[test]
    fn distinct_single_gram_texts_are_nearly_orthogonal() {
        let cfg = EmbedderConfig {
            dim: 256,
            ngrams: vec![3],
            seed: 0,
        };
        // Each text has exactly one distinct trigram, so each embedding is a
        // signed basis vector; the cosine is +-1 only on a bucket collision.
        let (ba, _) = cfg.slot("aaa");
        let (bz, _) = cfg.slot("zzz");
        let a = embed("aaaa", &cfg);
        let z = embed("zzzz", &cfg);
        let expected = if ba == bz { 1.0 } else { 0.0 };
        assert!((a.cosine(&z).abs() - expected).abs() < 1e-6);
        assert!(a.cosine(&z).abs() < 0.2);
    }

    #[test]
    fn external_vectors() {
        let m = parse_external_vectors(
            "{\"id\":\"a\",\"vector\":[3,4]}\n{\"id\":\"b\",\"vector\":[0,2]}\n",
        )
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m["a"].values(), &[0.6, 0.8]);
        assert!(m.values().all(|v| (v.norm() - 1.0).abs() < 1e-6));

        let four = parse_external_vectors(
            "{\"id\":\"a\",\"vector\":[1,2,3,4]}\n{\"id\":\"b\",\"vector\":[1,0,0,0]}\n",
        )
        .unwrap();
        assert_eq!(four.len(), 2);

        assert!(matches!(
            parse_external_vectors(
                "{\"id\":\"a\",\"vector\":[1,2,3,4]}\n{\"id\":\"b\",\"vector\":[1,2,3,4,5,6,7,8]}\n"
            ),
            Err(KeyError::DimensionMismatch { expected: 4, found: 8 })
        ));
        assert!(matches!(
            parse_external_vectors("{\"id\":\"a\",\"vector\":[0,0]}\n"),
            Err(KeyError::ZeroVector(_))
        ));
        assert!(matches!(
            parse_external_vectors("nope\n"),
            Err(KeyError::ParseError { line: 1, .. })
        ));
    }

    #[test]
    fn external_embedder_looks_up_by_id() {
        let map = parse_external_vectors("{\"id\":\"x\",\"vector\":[1,1]}\n").unwrap();
        let e = Embedder::External(map);
        let v = e.embed_instance(&instance("q", &[]), TextFormat::E).unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-6);
        let mut other = instance("q", &[]);
        other.id = "y".into();
        assert!(matches!(e.embed_instance(&other, TextFormat::E), Err(KeyError::MissingVector(_))));
    }
}
