//! Validation-driven search over merge coefficients, and two-expert
//! composition.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::TaskSet;
use crate::params::{merge, ParamError, ParameterSet, MergeTerm, TaskVector};

#[derive(Debug, Error)]
pub enum TunerError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("no task vectors to merge")]
    EmptyTaus,
    #[error("lambda grid contains a non-finite value")]
    NonFiniteGrid,
    #[error(transparent)]
    Params(#[from] ParamError),
}

pub type Result<T, E = TunerError> = std::result::Result<T, E>;

/// Candidate values for each merge coefficient, ascending and deduplicated.
///
/// Always contains `0`, `1` and `1/N`, so the single-expert corners and the
/// uniform merge are reachable.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub const DEFAULT_VALUES: [f64; 9] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0];

    pub fn new(values: &[f64], num_terms: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TunerError::NonFiniteGrid);
        }
        let mut v = values.to_vec();
        v.push(0.0);
        v.push(1.0);
        if num_terms > 0 {
            v.push(1.0 / num_terms as f64);
        }
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| a.to_bits() == b.to_bits() || *a == *b);
        Ok(Self { values: v })
    }

    pub fn default_for(num_terms: usize) -> Self {
        Self::new(&Self::DEFAULT_VALUES, num_terms).expect("default grid is finite")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchPoint {
    pub lambdas: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeSearchResult {
    pub lambdas: Vec<f64>,
    pub score: f64,
    pub evaluated: usize,
    pub log: Vec<SearchPoint>,
}

impl MergeSearchResult {
    /// One record per evaluated point, then the chosen point flagged with
    /// `"chosen":true`.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for p in &self.log {
            writeln!(s, "{}", serde_json::to_string(p).expect("point serializes")).unwrap();
        }
        let chosen = serde_json::json!({"lambdas": self.lambdas, "score": self.score, "chosen": true});
        writeln!(s, "{chosen}").unwrap();
        s
    }
}

/// Scores a merged parameter set on a validation split. Higher is better.
pub trait MergeEvaluator {
    type Error: From<TunerError>;

    fn score(&mut self, merged: &ParameterSet, validation: &TaskSet) -> Result<f64, Self::Error>;
}

impl<F, E> MergeEvaluator for F
where
    F: FnMut(&ParameterSet, &TaskSet) -> Result<f64, E>,
    E: From<TunerError>,
{
    type Error = E;

    fn score(&mut self, merged: &ParameterSet, validation: &TaskSet) -> Result<f64, E> {
        self(merged, validation)
    }
}

struct Search<'a, V: MergeEvaluator> {
    theta_pre: &'a ParameterSet,
    taus: &'a [TaskVector],
    validation: &'a TaskSet,
    evaluator: V,
    seen: HashMap<Vec<u64>, f64>,
    log: Vec<SearchPoint>,
}

impl<V: MergeEvaluator> Search<'_, V> {
    fn eval(&mut self, lambdas: &[f64]) -> Result<f64, V::Error> {
        let key: Vec<u64> = lambdas.iter().map(|l| l.to_bits()).collect();
        if let Some(&s) = self.seen.get(&key) {
            return Ok(s);
        }
        let terms: Vec<MergeTerm> = lambdas
            .iter()
            .zip(self.taus)
            .map(|(&l, t)| MergeTerm::new(l, t.clone()))
            .collect();
        let merged = merge(self.theta_pre, &terms).map_err(TunerError::from)?;
        let score = self.evaluator.score(&merged, self.validation)?;
        self.seen.insert(key, score);
        self.log.push(SearchPoint {
            lambdas: lambdas.to_vec(),
            score,
        });
        Ok(score)
    }
}

/// Searches merge coefficients on a validation split.
///
/// Two or fewer terms are searched exhaustively in lexicographic grid order.
/// More terms start from the best of the single-expert corners and the
/// uniform point, then run two coordinate-ascent sweeps. The returned point
/// is the best evaluated one; ties go to the earliest evaluated.
pub fn search_lambdas<V: MergeEvaluator>(
    theta_pre: &ParameterSet,
    taus: &[TaskVector],
    validation: &TaskSet,
    evaluator: V,
    grid: &LambdaGrid,
) -> Result<MergeSearchResult, V::Error> {
    if taus.is_empty() {
        return Err(TunerError::EmptyTaus.into());
    }
    if validation.is_empty() {
        return Err(TunerError::EmptyValidation.into());
    }
    let n = taus.len();
    let values = grid.values();
    let mut search = Search {
        theta_pre,
        taus,
        validation,
        evaluator,
        seen: HashMap::new(),
        log: Vec::new(),
    };

    if n <= 2 {
        let mut idx = vec![0usize; n];
        loop {
            let point: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
            search.eval(&point)?;
            // Odometer increment, last term fastest.
            let mut k = n;
            loop {
                if k == 0 {
                    return Ok(finish(search.log));
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < values.len() {
                    break;
                }
                idx[k] = 0;
            }
        }
    }

    let uniform = vec![1.0 / n as f64; n];
    let mut current = uniform.clone();
    let mut best = search.eval(&uniform)?;
    for i in 0..n {
        let mut corner = vec![0.0; n];
        corner[i] = 1.0;
        let s = search.eval(&corner)?;
        if s > best {
            best = s;
            current = corner;
        }
    }
    for _sweep in 0..2 {
        for i in 0..n {
            let mut pick = current[i];
            let mut pick_score = best;
            for &v in values {
                let mut point = current.clone();
                point[i] = v;
                let s = search.eval(&point)?;
                if s > pick_score {
                    pick = v;
                    pick_score = s;
                }
            }
            current[i] = pick;
            best = pick_score;
        }
    }
    Ok(finish(search.log))
}

fn finish(log: Vec<SearchPoint>) -> MergeSearchResult {
    let mut best = 0;
    for (i, p) in log.iter().enumerate() {
        if p.score > log[best].score {
            best = i;
        }
    }
    MergeSearchResult {
        lambdas: log[best].lambdas.clone(),
        score: log[best].score,
        evaluated: log.len(),
        log,
    }
}

/// Record of how a composed expert was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionRecord {
    pub experts: [String; 2],
    pub lambdas: [f64; 2],
    pub base_checksum: u32,
}

/// `θ_pre + λ_a τ_a + λ_b τ_b`, with a provenance record.
pub fn compose_experts(
    theta_pre: &ParameterSet,
    a: (&str, &TaskVector),
    b: (&str, &TaskVector),
    lambdas: (f64, f64),
) -> Result<(ParameterSet, CompositionRecord)> {
    let merged = merge(
        theta_pre,
        &[MergeTerm::new(lambdas.0, a.1.clone()), MergeTerm::new(lambdas.1, b.1.clone())],
    )?;
    let record = CompositionRecord {
        experts: [a.0.to_string(), b.0.to_string()],
        lambdas: [lambdas.0, lambdas.1],
        base_checksum: theta_pre.checksum(),
    };
    Ok((merged, record))
}
