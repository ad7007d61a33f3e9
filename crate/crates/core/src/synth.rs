//! Deterministic synthetic task suites.
//!
//! Every family owns a private vocabulary of made-up words. Classification
//! families map a key word (always the last input word) to one of the
//! family's label words; generative families copy or reverse a short word
//! sequence. Prompt variants within a family differ only in their
//! instruction words. `overlap` is the probability that an instruction or
//! filler word is drawn from a pool shared by all families instead.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{Split, TaskInstance, TaskSet};
use crate::tokenizer::Tokenizer;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const SHARED_POOL: usize = 8;
const INSTRUCTION_WORDS: usize = 4;
const FILLER_WORDS: usize = 4;
const PROMPT_WORDS: usize = 2;
const CONTENT_WORDS: usize = 6;
const CONTENT_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthTaskSpec {
    pub families: usize,
    pub prompts_per_family: usize,
    /// Training instances per task; validation and test get a quarter each.
    pub instances: usize,
    pub overlap: f64,
    pub seed: u64,
    /// How many of the families (the last ones) are generative.
    pub generative_families: usize,
    pub vocab_size: usize,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self {
            families: 12,
            prompts_per_family: 4,
            instances: 200,
            overlap: 0.1,
            seed: 0,
            generative_families: 0,
            vocab_size: 512,
        }
    }
}

impl SynthTaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.families == 0 || self.prompts_per_family == 0 || self.instances == 0 {
            return Err("family, prompt and instance counts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err("overlap must lie in [0, 1]".into());
        }
        if self.generative_families > self.families {
            return Err("more generative families than families".into());
        }
        if self.vocab_size < 64 {
            return Err("vocab_size must be at least 64".into());
        }
        Ok(())
    }

    pub fn held_out_size(&self) -> usize {
        (self.instances / 4).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Mapping,
    Copy,
    Reverse,
}

/// One (family, prompt) task with its three splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub family: String,
    pub kind: FamilyKind,
    pub prompt: usize,
    pub train: TaskSet,
    pub validation: TaskSet,
    pub test: TaskSet,
}

impl SynthTask {
    pub fn name(&self) -> &str {
        &self.train.name
    }

    pub fn split(&self, split: Split) -> &TaskSet {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// Hands out globally unique made-up words.
struct WordSource {
    rng: ChaCha8Rng,
    used: HashSet<String>,
    tokenizer: Tokenizer,
}

impl WordSource {
    fn new(seed: u64, vocab_size: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_0001),
            used: HashSet::new(),
            tokenizer: Tokenizer::new(vocab_size),
        }
    }

    fn word(&mut self) -> String {
        loop {
            let syllables = self.rng.gen_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push(CONSONANTS[self.rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[self.rng.gen_range(0..VOWELS.len())] as char);
            }
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }

    /// Words whose token ids are pairwise distinct.
    fn distinct_ids(&mut self, n: usize) -> Vec<String> {
        let mut ids = HashSet::new();
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w = self.word();
            if ids.insert(self.tokenizer.word_id(&w)) {
                out.push(w);
            }
        }
        out
    }
}

struct Family {
    name: String,
    kind: FamilyKind,
    labels: Vec<String>,
    keys: Vec<String>,
    content: Vec<String>,
    filler: Vec<String>,
    templates: Vec<Vec<String>>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, own: &'a [String], shared: &'a [String], overlap: f64) -> &'a str {
    if rng.gen_bool(overlap) {
        &shared[rng.gen_range(0..shared.len())]
    } else {
        &own[rng.gen_range(0..own.len())]
    }
}

fn build_family(index: usize, spec: &SynthTaskSpec, words: &mut WordSource, shared: &[String]) -> Family {
    let first_generative = spec.families - spec.generative_families;
    let kind = if index < first_generative {
        FamilyKind::Mapping
    } else if (index - first_generative).is_multiple_of(2) {
        FamilyKind::Copy
    } else {
        FamilyKind::Reverse
    };
    let name = match kind {
        FamilyKind::Mapping => format!("map{index:02}"),
        FamilyKind::Copy => format!("copy{index:02}"),
        FamilyKind::Reverse => format!("rev{index:02}"),
    };
    let num_labels = 2 + index % 3;
    let (labels, keys, content) = match kind {
        FamilyKind::Mapping => {
            let v = words.distinct_ids(3 * num_labels);
            (v[..num_labels].to_vec(), v[num_labels..].to_vec(), Vec::new())
        }
        _ => (Vec::new(), Vec::new(), words.distinct_ids(CONTENT_WORDS)),
    };
    let filler = words.words(FILLER_WORDS);
    let instruction = words.words(INSTRUCTION_WORDS);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x7e3a_0000 + index as u64));
    let templates = (0..spec.prompts_per_family)
        .map(|_| {
            let own = words.words(PROMPT_WORDS);
            let mut slots: Vec<String> = vec![
                pick(&mut rng, &instruction, shared, spec.overlap).to_string(),
                own[0].clone(),
                pick(&mut rng, &instruction, shared, spec.overlap).to_string(),
                own[1].clone(),
            ];
            slots[1..].shuffle(&mut rng);
            slots
        })
        .collect();
    Family {
        name,
        kind,
        labels,
        keys,
        content,
        filler,
        templates,
    }
}

fn make_instance(
    family: &Family,
    prompt: usize,
    rng: &mut ChaCha8Rng,
    shared: &[String],
    overlap: f64,
    id: String,
) -> TaskInstance {
    let mut input: Vec<&str> = family.templates[prompt].iter().map(String::as_str).collect();
    match family.kind {
        FamilyKind::Mapping => {
            for _ in 0..rng.gen_range(1..=2) {
                input.push(pick(rng, &family.filler, shared, overlap));
            }
            let k = rng.gen_range(0..family.keys.len());
            input.push(&family.keys[k]);
            TaskInstance {
                id,
                input: input.join(" "),
                choices: family.labels.clone(),
                target: family.labels[k % family.labels.len()].clone(),
            }
        }
        FamilyKind::Copy | FamilyKind::Reverse => {
            let mut seq: Vec<&str> = family
                .content
                .choose_multiple(rng, CONTENT_LEN)
                .map(String::as_str)
                .collect();
            input.extend(&seq);
            if family.kind == FamilyKind::Reverse {
                seq.reverse();
            }
            TaskInstance {
                id,
                input: input.join(" "),
                choices: Vec::new(),
                target: seq.join(" "),
            }
        }
    }
}

/// Generates `families x prompts_per_family` tasks. Earlier families do not
/// depend on how many families follow them.
pub fn generate_synth_tasks(spec: &SynthTaskSpec) -> Result<Vec<SynthTask>, String> {
    spec.validate()?;
    let mut words = WordSource::new(spec.seed, spec.vocab_size);
    let shared = words.words(SHARED_POOL);
    let mut tasks = Vec::with_capacity(spec.families * spec.prompts_per_family);
    for f in 0..spec.families {
        let family = build_family(f, spec, &mut words, &shared);
        for p in 0..spec.prompts_per_family {
            let name = format!("{}__p{p}", family.name);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((f as u64) << 20 | p as u64));
            let mut split = |split: Split, n: usize| {
                let instances = (0..n)
                    .map(|i| {
                        let id = format!("{name}-{}-{i}", split.as_str());
                        make_instance(&family, p, &mut rng, &shared, spec.overlap, id)
                    })
                    .collect();
                TaskSet::new(name.clone(), split, instances).map_err(|e| e.to_string())
            };
            let train = split(Split::Train, spec.instances)?;
            let validation = split(Split::Validation, spec.held_out_size())?;
            let test = split(Split::Test, spec.held_out_size())?;
            tasks.push(SynthTask {
                family: family.name.clone(),
                kind: family.kind,
                prompt: p,
                train,
                validation,
                test,
            });
        }
    }
    Ok(tasks)
}

/// Classification task: the answer is whichever choice ends the input.
pub fn copy_token_task(name: &str, split: Split, n: usize, seed: u64, vocab_size: usize) -> TaskSet {
    let mut words = WordSource::new(seed ^ 0xc0b7, vocab_size);
    let pool = words.distinct_ids(8);
    let instruction = words.words(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split as u64);
    let instances = (0..n)
        .map(|i| {
            let choices: Vec<String> = pool.choose_multiple(&mut rng, 4).cloned().collect();
            let target = choices[rng.gen_range(0..choices.len())].clone();
            TaskInstance {
                id: format!("{name}-{i}"),
                input: format!("{} {} {target}", instruction[0], instruction[1]),
                choices,
                target,
            }
        })
        .collect();
    TaskSet::new(name, split, instances).expect("well-formed copy-token task")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceOp {
    Copy,
    Reverse,
    /// The sequence followed by its reversal.
    CopyThenReverse,
}

/// Generative word-sequence tasks sharing one content vocabulary per seed,
/// so experts for different operations can be composed.
pub fn sequence_task(op: SequenceOp, split: Split, n: usize, len: usize, seed: u64, vocab_size: usize) -> TaskSet {
    let mut words = WordSource::new(seed ^ 0x5e9, vocab_size);
    let pool = words.distinct_ids(8);
    let copy_instr = words.words(2);
    let rev_instr = words.words(2);
    let instruction = match op {
        SequenceOp::Copy => copy_instr.join(" "),
        SequenceOp::Reverse => rev_instr.join(" "),
        SequenceOp::CopyThenReverse => format!("{} {}", copy_instr.join(" "), rev_instr.join(" ")),
    };
    let name = match op {
        SequenceOp::Copy => "copy",
        SequenceOp::Reverse => "reverse",
        SequenceOp::CopyThenReverse => "copy_then_reverse",
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((op as u64) << 8) ^ split as u64);
    let instances = (0..n)
        .map(|i| {
            let seq: Vec<&str> = pool.choose_multiple(&mut rng, len).map(String::as_str).collect();
            let mut rev = seq.clone();
            rev.reverse();
            let target = match op {
                SequenceOp::Copy => seq.join(" "),
                SequenceOp::Reverse => rev.join(" "),
                SequenceOp::CopyThenReverse => format!("{} {}", seq.join(" "), rev.join(" ")),
            };
            TaskInstance {
                id: format!("{name}-{}-{i}", split.as_str()),
                input: format!("{instruction} {}", seq.join(" ")),
                choices: Vec::new(),
                target,
            }
        })
        .collect();
    TaskSet::new(name, split, instances).expect("well-formed sequence task")
}
