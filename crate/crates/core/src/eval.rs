//! Task data, rank-classification and ROUGE-L scoring, and expert rankings.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{argmax, Model, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("task is not a classification task")]
    NotClassification,
    #[error("reference sequence is empty")]
    EmptyReference,
    #[error("task set is empty")]
    EmptyTaskSet,
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("task mixes classification and generative instances (first at `{0}`)")]
    MixedKind(String),
    #[error("instance `{0}`: target is not one of the answer choices")]
    TargetNotInChoices(String),
    #[error("instance `{0}`: empty target")]
    EmptyTarget(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// One prompted example. Empty `choices` marks a generative instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub input: String,
    #[serde(default)]
    pub choices: Vec<String>,
    pub target: String,
}

impl TaskInstance {
    pub fn is_generative(&self) -> bool {
        self.choices.is_empty()
    }

    /// Index of the target among the choices.
    pub fn target_index(&self) -> Option<usize> {
        self.choices.iter().position(|c| c == &self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Generative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSet {
    pub name: String,
    pub kind: TaskKind,
    pub split: Split,
    pub instances: Vec<TaskInstance>,
}

impl TaskSet {
    /// Validates the instances and infers the task kind.
    pub fn new(name: impl Into<String>, split: Split, instances: Vec<TaskInstance>) -> Result<Self> {
        let first = instances.first().ok_or(EvalError::EmptyTaskSet)?;
        let kind = if first.is_generative() {
            TaskKind::Generative
        } else {
            TaskKind::Classification
        };
        for inst in &instances {
            if inst.target.trim().is_empty() {
                return Err(EvalError::EmptyTarget(inst.id.clone()));
            }
            if inst.is_generative() != (kind == TaskKind::Generative) {
                return Err(EvalError::MixedKind(inst.id.clone()));
            }
            if !inst.is_generative() && inst.target_index().is_none() {
                return Err(EvalError::TargetNotInChoices(inst.id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            kind,
            split,
            instances,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// JSON-lines body, one instance per line.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for inst in &self.instances {
            s.push_str(&serde_json::to_string(inst).expect("instances serialize"));
            s.push('\n');
        }
        s
    }

    /// File name `<name>.<split>.jsonl`.
    pub fn file_name(&self) -> String {
        format!("{}.{}.jsonl", self.name, self.split.as_str())
    }

    /// Concatenates several task sets of the same kind under a new name.
    pub fn union(name: impl Into<String>, split: Split, sets: &[&TaskSet]) -> Result<Self> {
        let instances = sets.iter().flat_map(|s| s.instances.iter().cloned()).collect();
        Self::new(name, split, instances)
    }
}

/// Splits `<name>.<split>.jsonl` into its parts; other names map to the test split.
pub fn parse_task_file_name(path: &Path) -> (String, Split) {
    let file = path.file_name().and_then(|s| s.to_str()).unwrap_or("task");
    let stem = file.strip_suffix(".jsonl").unwrap_or(file);
    match stem.rsplit_once('.') {
        Some((name, split)) => match Split::parse(split) {
            Some(sp) => (name.to_string(), sp),
            None => (stem.to_string(), Split::Test),
        },
        None => (stem.to_string(), Split::Test),
    }
}

pub fn parse_taskset(name: &str, split: Split, text: &str) -> Result<TaskSet> {
    let mut instances = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: TaskInstance = serde_json::from_str(line).map_err(|e| EvalError::ParseError {
            line: i + 1,
            msg: e.to_string(),
        })?;
        instances.push(inst);
    }
    TaskSet::new(name, split, instances)
}

pub fn load_taskset(path: impl AsRef<Path>) -> Result<TaskSet> {
    let path = path.as_ref();
    let (name, split) = parse_task_file_name(path);
    parse_taskset(&name, split, &fs::read_to_string(path)?)
}

pub fn save_taskset(task: &TaskSet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, task.to_jsonl())?;
    Ok(())
}

/// Scores a target continuation of an input.
pub trait Scorer {
    fn log_likelihood(&self, input: &str, target: &str) -> Result<f64>;
}

/// Produces continuations for generative tasks, in token space.
pub trait Generator {
    fn tokenize(&self, text: &str) -> Vec<u32>;
    fn generate(&self, input: &str, max_len: usize) -> Result<Vec<u32>>;
}

pub trait Predictor: Scorer + Generator {}
impl<T: Scorer + Generator> Predictor for T {}

impl Scorer for Model {
    fn log_likelihood(&self, input: &str, target: &str) -> Result<f64> {
        let cfg = self.config();
        let seq = cfg.tokenizer().encode_pair(input, target, cfg.max_tokens)?;
        Ok(Model::log_likelihood(self, &seq)?)
    }
}

impl Generator for Model {
    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.config().tokenizer().tokenize(text)
    }

    fn generate(&self, input: &str, max_len: usize) -> Result<Vec<u32>> {
        let prompt = self.config().tokenizer().encode_prompt(input);
        Ok(self.greedy_decode(&prompt, max_len)?)
    }
}

/// Picks the choice with the highest target log-likelihood; ties go to the
/// lowest index.
pub fn rank_classify<S: Scorer + ?Sized>(scorer: &S, instance: &TaskInstance) -> Result<usize> {
    if instance.choices.is_empty() {
        return Err(EvalError::NotClassification);
    }
    let scores = instance
        .choices
        .iter()
        .map(|c| scorer.log_likelihood(&instance.input, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmax(&scores))
}

/// Fraction of instances whose rank-classified choice is the target.
pub fn accuracy<S: Scorer + ?Sized>(scorer: &S, task: &TaskSet) -> Result<f64> {
    if task.kind != TaskKind::Classification {
        return Err(EvalError::NotClassification);
    }
    if task.is_empty() {
        return Err(EvalError::EmptyTaskSet);
    }
    let mut correct = 0usize;
    for inst in &task.instances {
        if Some(rank_classify(scorer, inst)?) == inst.target_index() {
            correct += 1;
        }
    }
    Ok(correct as f64 / task.len() as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Sentence-level ROUGE-L F1 (beta = 1).
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * p * r / (p + r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    RougeL,
    Mixed,
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "classification",
            MetricKind::RougeL => "generative",
            MetricKind::Mixed => "mixed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: String,
    pub metric: MetricKind,
    pub value: f64,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub expert: String,
    pub seed: u64,
    pub metric: MetricKind,
    pub rows: Vec<TaskScore>,
    pub mean: f64,
}

impl EvalReport {
    fn from_rows(expert: &str, seed: u64, rows: Vec<TaskScore>) -> Self {
        let mean = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
        let metric = match (
            rows.iter().all(|r| r.metric == MetricKind::Accuracy),
            rows.iter().all(|r| r.metric == MetricKind::RougeL),
        ) {
            (true, _) => MetricKind::Accuracy,
            (_, true) => MetricKind::RougeL,
            _ => MetricKind::Mixed,
        };
        Self {
            expert: expert.to_string(),
            seed,
            metric,
            rows,
            mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalOptions {
    /// Evaluate at most this many instances per task, sampled with `seed`.
    pub limit: Option<usize>,
    pub seed: u64,
}

fn subsample<'a>(task: &'a TaskSet, opts: &EvalOptions) -> Vec<&'a TaskInstance> {
    match opts.limit {
        Some(limit) if limit < task.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let mut idx = index::sample(&mut rng, task.len(), limit).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| &task.instances[i]).collect()
        }
        _ => task.instances.iter().collect(),
    }
}

/// Accuracy for classification tasks, mean ROUGE-L of greedy decodes
/// (budget `2 x |reference|` tokens) for generative ones.
pub fn evaluate_task<P: Predictor + ?Sized>(predictor: &P, task: &TaskSet, opts: &EvalOptions) -> Result<TaskScore> {
    let picked = subsample(task, opts);
    if picked.is_empty() {
        return Err(EvalError::EmptyTaskSet);
    }
    let (metric, total) = match task.kind {
        TaskKind::Classification => {
            let mut correct = 0usize;
            for inst in &picked {
                if Some(rank_classify(predictor, inst)?) == inst.target_index() {
                    correct += 1;
                }
            }
            (MetricKind::Accuracy, correct as f64)
        }
        TaskKind::Generative => {
            let mut sum = 0.0;
            for inst in &picked {
                let reference = predictor.tokenize(&inst.target);
                let candidate = predictor.generate(&inst.input, 2 * reference.len())?;
                sum += rouge_l(&candidate, &reference)?;
            }
            (MetricKind::RougeL, sum)
        }
    };
    Ok(TaskScore {
        task: task.name.clone(),
        metric,
        value: total / picked.len() as f64,
        instances: picked.len(),
    })
}

/// Evaluates one expert over several task sets.
pub fn evaluate<P: Predictor + ?Sized>(
    expert: &str,
    predictor: &P,
    tasks: &[TaskSet],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(EvalError::EmptyTaskSet);
    }
    let rows = tasks
        .iter()
        .map(|t| evaluate_task(predictor, t, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(expert, opts.seed, rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub expert: String,
    pub mean: f64,
    pub category: MetricKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub rows: Vec<RankRow>,
    pub reports: Vec<EvalReport>,
}

impl Ranking {
    /// Sorts reports by mean, descending; equal means order by expert id.
    pub fn from_reports(mut reports: Vec<EvalReport>) -> Self {
        reports.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.expert.cmp(&b.expert)));
        let rows = reports
            .iter()
            .map(|r| RankRow {
                expert: r.expert.clone(),
                mean: r.mean,
                category: r.metric,
            })
            .collect();
        Self { rows, reports }
    }

    /// Plain-text table with rank, expert, mean and category columns.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.expert.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:>4}  {:<width$}  {:>8}  {}\n", "rank", "expert", "mean", "category");
        for (i, r) in self.rows.iter().enumerate() {
            s.push_str(&format!(
                "{:>4}  {:<width$}  {:>8.2}  {}\n",
                i + 1,
                r.expert,
                100.0 * r.mean,
                r.category
            ));
        }
        s
    }
}

/// Evaluates every expert on every task set and ranks them.
pub fn rank_experts<P: Predictor>(experts: &[(String, P)], tasks: &[TaskSet], opts: &EvalOptions) -> Result<Ranking> {
    if experts.is_empty() {
        return Err(EvalError::EmptyTaskSet);
    }
    let reports = experts
        .iter()
        .map(|(id, p)| evaluate(id, p, tasks, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ranking::from_reports(reports))
}
