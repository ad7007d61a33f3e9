use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use expert_lm::eval::{
    evaluate, evaluate_task, load_taskset, save_taskset, EvalOptions, EvalReport, Ranking, Split, TaskKind, TaskSet,
};
use expert_lm::keys::Embedder;
use expert_lm::library::{
    self, load_library, save_library, EmbedSource, ExpertKind, ExpertLibrary, ExpertRecord, LibraryError,
    LibrarySettings, Provenance, RoutingDecision,
};
use expert_lm::keys::EmbedderConfig;
use expert_lm::model::{self, ModelConfig, TrainConfig};
use expert_lm::params::{merge as merge_params, save_params, task_vector, MergeTerm, ParameterSet, TaskVector};
use expert_lm::synth::{generate_synth_tasks, sequence_task, SequenceOp, SynthTaskSpec};
use expert_lm::tuner::{search_lambdas, LambdaGrid};
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, load_base, load_expert, load_registry, provenance, write_json, BaseSidecar};
use crate::{AddExpert, BuildLibrary, Eval, GenTasks, InitBase, Merge, RankExperts, Route, TrainExpert};

/// Sequence length of the optional copy and reverse tasks.
const SEQUENCE_LEN: usize = 3;

pub fn gen_tasks(a: GenTasks) -> Result<()> {
    let spec = SynthTaskSpec {
        families: a.families,
        prompts_per_family: a.prompts,
        instances: a.instances,
        overlap: a.overlap,
        seed: a.seed,
        generative_families: a.generative_families,
        vocab_size: a.vocab,
    };
    let tasks = generate_synth_tasks(&spec).map_err(|m| anyhow!("invalid task spec: {m}"))?;
    fs::create_dir_all(&a.out_dir)?;
    let mut written = 0;
    for t in &tasks {
        for split in [Split::Train, Split::Validation, Split::Test] {
            let set = t.split(split);
            save_taskset(set, a.out_dir.join(set.file_name()))?;
            written += 1;
        }
    }
    if a.sequence_tasks {
        let held_out = spec.held_out_size();
        for op in [SequenceOp::Copy, SequenceOp::Reverse, SequenceOp::CopyThenReverse] {
            for (split, n) in [(Split::Train, a.instances), (Split::Validation, held_out), (Split::Test, held_out)] {
                let set = sequence_task(op, split, n, SEQUENCE_LEN, a.seed, a.vocab);
                save_taskset(&set, a.out_dir.join(set.file_name()))?;
                written += 1;
            }
        }
    }
    println!("wrote {written} task files to {}", a.out_dir.display());
    Ok(())
}

pub fn init_base(a: InitBase) -> Result<()> {
    let config = ModelConfig {
        num_layers: a.layers,
        hidden_dim: a.hidden,
        adapter_dim: a.adapter_dim,
        num_heads: a.heads,
        vocab_size: a.vocab,
        max_tokens: a.max_tokens,
    };
    let params = model::init_base(&config, a.seed)?;
    save_params(&params, &a.out)?;
    let sidecar = BaseSidecar {
        config,
        provenance: Provenance {
            seed: a.seed,
            version: artifacts::VERSION.to_string(),
            inputs: [("params".to_string(), format!("{:08x}", params.checksum()))].into(),
        },
    };
    write_json(&artifacts::sidecar_path(&a.out), &sidecar)?;
    println!("base model with {} values written to {}", params.num_values(), a.out.display());
    Ok(())
}

pub fn train_expert(a: TrainExpert) -> Result<()> {
    let base = load_base(&a.base)?;
    let task = load_taskset(&a.task).with_context(|| format!("loading {}", a.task.display()))?;
    let cap = a.sample_cap.unwrap_or(match task.kind {
        TaskKind::Classification => TrainConfig::default().sample_cap,
        TaskKind::Generative => TrainConfig::GENERATIVE_SAMPLE_CAP,
    });
    let cfg = TrainConfig {
        sample_cap: cap,
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
    };
    let trained = match a.kind {
        ExpertKind::Pe => model::train_pe(&base.config, &base.params, &task, &cfg)?,
        ExpertKind::De => model::train_de(&base.config, &base.params, &task, &cfg)?,
    };
    for entry in &trained.log {
        println!("{entry}");
    }
    save_params(&trained.params, &a.out)?;

    let (dataset, prompt) = match task.name.split_once("__") {
        Some((d, p)) => (d.to_string(), Some(p.to_string())),
        None => (task.name.clone(), None),
    };
    let mut prov = provenance(a.seed, &[("task", &a.task), ("base", &a.base)])?;
    prov.inputs.insert("train".into(), serde_json::to_string(&cfg)?);
    prov.inputs.insert("params".into(), format!("{:08x}", trained.params.checksum()));
    let record = ExpertRecord {
        id: a.id.unwrap_or_else(|| task.name.clone()),
        kind: a.kind,
        dataset,
        prompt,
        params: artifacts::relative_to_registry(&a.registry, &a.out)?,
        provenance: Some(prov),
    };
    let mut registry = load_registry(&a.registry)?;
    match registry.get(&record.id) {
        Some(existing) if *existing == record => {}
        Some(_) => {
            return Err(LibraryError::DuplicateExpertId(record.id))
                .context("a different expert with this id is already registered")
        }
        None => {
            registry.push(record.clone())?;
            registry.save(&a.registry)?;
        }
    }
    println!("expert {} ({}) written to {}", record.id, record.kind, a.out.display());
    Ok(())
}

fn embedder_for(choice: &artifacts::EmbedChoice) -> Result<Embedder> {
    Ok(match choice.external_vectors()? {
        Some(map) => Embedder::External(map),
        None => Embedder::Builtin(EmbedderConfig::default()),
    })
}

fn train_file(dir: &Path, record: &ExpertRecord) -> PathBuf {
    dir.join(format!("{}.{}.jsonl", record.task_name(), Split::Train.as_str()))
}

pub fn build_library(a: BuildLibrary) -> Result<()> {
    let registry = load_registry(&a.registry)?;
    let mut experts = Vec::with_capacity(registry.len());
    let mut inputs: Vec<(String, PathBuf)> = vec![("registry".into(), a.registry.clone())];
    for rec in registry.records() {
        let params = artifacts::resolve_params(&a.registry, rec);
        if !params.exists() {
            return Err(LibraryError::DanglingExpertId(rec.id.clone()))
                .with_context(|| format!("parameter file {} does not exist", params.display()));
        }
        let path = train_file(&a.tasks_dir, rec);
        let task = load_taskset(&path).with_context(|| format!("loading {} for expert {}", path.display(), rec.id))?;
        inputs.push((format!("task:{}", rec.id), path));
        experts.push((rec.clone(), task));
    }
    let embedder = embedder_for(&a.embed)?;
    let settings = LibrarySettings {
        samples_per_expert: a.samples,
        format: a.format,
        seed: a.seed,
    };
    let mut lib = library::build_library(&experts, &settings, &embedder)?;
    let named: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (n.as_str(), p.as_path())).collect();
    lib.set_provenance(provenance(a.seed, &named)?);
    save_library(&lib, &a.out)?;
    println!(
        "library with {} entries from {} experts written to {}",
        lib.len(),
        experts.len(),
        a.out.display()
    );
    Ok(())
}

fn library_embedder(lib: &ExpertLibrary, choice: &artifacts::EmbedChoice) -> Result<Embedder> {
    match (&lib.header().embed, choice) {
        (EmbedSource::External, artifacts::EmbedChoice::Builtin) => {
            Err(LibraryError::ExternalVectorsRequired).context("pass --embed external:<path>")
        }
        _ => Ok(lib.embedder(choice.external_vectors()?)?),
    }
}

pub fn add_expert(a: AddExpert) -> Result<()> {
    let registry = load_registry(&a.registry)?;
    let record = artifacts::find_record(&registry, &a.expert)?;
    let mut lib = load_library(&a.library, Some(&registry))?;
    let task = load_taskset(&a.task).with_context(|| format!("loading {}", a.task.display()))?;
    let embedder = library_embedder(&lib, &a.embed)?;
    let before = lib.len();
    lib.add_expert(record, &task, &embedder)?;
    let mut file = OpenOptions::new().append(true).open(&a.library)?;
    file.write_all(lib.entries_jsonl(before).as_bytes())?;
    println!("appended {} entries for {}", lib.len() - before, record.id);
    Ok(())
}

/// A routing decision together with what produced it.
#[derive(Debug, Serialize, Deserialize)]
pub struct DecisionFile {
    #[serde(flatten)]
    pub decision: RoutingDecision,
    pub provenance: Provenance,
}

pub fn route(a: Route) -> Result<()> {
    let registry = a.registry.as_deref().map(load_registry).transpose()?;
    let lib = load_library(&a.library, registry.as_ref())?;
    let target = load_taskset(&a.target).with_context(|| format!("loading {}", a.target.display()))?;
    let embedder = library_embedder(&lib, &a.embed)?;
    let decision = library::route(&lib, &target.instances, a.queries, &embedder, a.seed)?;
    let out = DecisionFile {
        decision,
        provenance: provenance(a.seed, &[("library", &a.library), ("target", &a.target)])?,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Debug, Serialize)]
struct SearchSummary {
    score: f64,
    evaluated: usize,
    log: String,
}

#[derive(Debug, Serialize)]
struct MergeRecord {
    experts: Vec<String>,
    lambdas: Vec<f64>,
    base_checksum: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    search: Option<SearchSummary>,
    provenance: Provenance,
}

pub fn merge(a: Merge) -> Result<()> {
    let base = load_base(&a.base)?;
    let registry = load_registry(&a.registry)?;
    let records: Vec<&ExpertRecord> = a
        .experts
        .iter()
        .map(|id| artifacts::find_record(&registry, id))
        .collect::<Result<_>>()?;
    let kind = records[0].kind;
    if records.iter().any(|r| r.kind != kind) {
        bail!("cannot merge adapter experts with fully fine-tuned experts");
    }
    let expert_params: Vec<ParameterSet> = records
        .iter()
        .map(|r| load_expert(&a.registry, r))
        .collect::<Result<_>>()?;
    // Adapters are displacements from a zero adapter; full experts from the base.
    let (theta_pre, taus): (ParameterSet, Vec<TaskVector>) = match kind {
        ExpertKind::Pe => (
            expert_params[0].zeros_like(),
            expert_params.into_iter().map(TaskVector::from_displacement).collect(),
        ),
        ExpertKind::De => {
            let taus = expert_params
                .iter()
                .map(|p| task_vector(p, &base.params))
                .collect::<Result<_, _>>()?;
            (base.params.clone(), taus)
        }
    };

    let n = taus.len();
    let (lambdas, search) = if let Some(val_path) = &a.search {
        let validation = load_taskset(val_path).with_context(|| format!("loading {}", val_path.display()))?;
        let grid = match &a.grid {
            Some(g) => LambdaGrid::new(g, n)?,
            None => LambdaGrid::default_for(n),
        };
        let opts = EvalOptions {
            limit: a.limit,
            seed: a.seed,
        };
        let evaluator = |merged: &ParameterSet, val: &TaskSet| -> Result<f64> {
            let model = base.model_for(merged)?;
            Ok(evaluate_task(&model, val, &opts)?.value)
        };
        let result = search_lambdas(&theta_pre, &taus, &validation, evaluator, &grid)?;
        let log_path = a.log.clone().unwrap_or_else(|| suffixed(&a.out, ".search.jsonl"));
        fs::write(&log_path, result.to_jsonl())?;
        let summary = SearchSummary {
            score: result.score,
            evaluated: result.evaluated,
            log: log_path.display().to_string(),
        };
        (result.lambdas, Some(summary))
    } else if let Some(l) = &a.lambdas {
        if l.len() != n {
            bail!("{} lambdas given for {} experts", l.len(), n);
        }
        (l.clone(), None)
    } else {
        (vec![1.0 / n as f64; n], None)
    };

    let terms: Vec<MergeTerm> = lambdas.iter().zip(&taus).map(|(&l, t)| MergeTerm::new(l, t.clone())).collect();
    let merged = merge_params(&theta_pre, &terms)?;
    save_params(&merged, &a.out)?;
    let mut inputs: Vec<(String, PathBuf)> = vec![("base".into(), a.base.clone())];
    for r in &records {
        inputs.push((format!("expert:{}", r.id), artifacts::resolve_params(&a.registry, r)));
    }
    if let Some(v) = &a.search {
        inputs.push(("validation".into(), v.clone()));
    }
    let named: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (n.as_str(), p.as_path())).collect();
    let record = MergeRecord {
        experts: a.experts.clone(),
        lambdas: lambdas.clone(),
        base_checksum: format!("{:08x}", base.params.checksum()),
        search,
        provenance: provenance(a.seed, &named)?,
    };
    write_json(&suffixed(&a.out, ".json"), &record)?;
    println!("merged {} experts with lambdas {:?} into {}", n, lambdas, a.out.display());
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// An evaluation report together with what produced it.
#[derive(Debug, Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    report: &'a EvalReport,
    provenance: Provenance,
}

fn load_tasks(paths: &[PathBuf]) -> Result<Vec<TaskSet>> {
    paths
        .iter()
        .map(|p| load_taskset(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

pub fn eval(a: Eval) -> Result<()> {
    let base = load_base(&a.base)?;
    let (name, params_path, params) = match (&a.params, &a.decision) {
        (Some(p), _) => {
            let params = expert_lm::params::load_params(p).with_context(|| format!("loading {}", p.display()))?;
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (stem, p.clone(), params)
        }
        (None, Some(d)) => {
            let reg_path = a.registry.as_ref().expect("clap enforces --registry");
            let text = fs::read_to_string(d).with_context(|| format!("reading {}", d.display()))?;
            let decision: DecisionFile = serde_json::from_str(&text).with_context(|| format!("parsing {}", d.display()))?;
            let registry = load_registry(reg_path)?;
            let record = artifacts::find_record(&registry, &decision.decision.chosen_expert)?;
            let params = load_expert(reg_path, record)?;
            (record.id.clone(), artifacts::resolve_params(reg_path, record), params)
        }
        (None, None) => bail!("pass --params or --decision"),
    };
    let model = base.model_for(&params)?;
    let tasks = load_tasks(&a.tasks)?;
    let opts = EvalOptions {
        limit: a.limit,
        seed: a.seed,
    };
    let report = evaluate(&name, &model, &tasks, &opts)?;
    let mut inputs: Vec<(String, PathBuf)> = vec![("base".into(), a.base.clone()), ("params".into(), params_path)];
    for p in &a.tasks {
        inputs.push((format!("task:{}", p.display()), p.clone()));
    }
    let named: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (n.as_str(), p.as_path())).collect();
    let file = ReportFile {
        report: &report,
        provenance: provenance(a.seed, &named)?,
    };
    let text = serde_json::to_string_pretty(&file)?;
    println!("{text}");
    if let Some(path) = &a.report {
        fs::write(path, text + "\n")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct RankingFile<'a> {
    #[serde(flatten)]
    ranking: &'a Ranking,
    provenance: Provenance,
}

pub fn rank_experts(a: RankExperts) -> Result<()> {
    let base = load_base(&a.base)?;
    let registry = load_registry(&a.registry)?;
    if registry.is_empty() {
        return Err(LibraryError::EmptyExpertSet.into());
    }
    let tasks = load_tasks(&a.tasks)?;
    let opts = EvalOptions {
        limit: a.limit,
        seed: a.seed,
    };
    let mut reports = Vec::with_capacity(registry.len());
    for rec in registry.records() {
        let params = load_expert(&a.registry, rec)?;
        let model = base.model_for(&params)?;
        reports.push(evaluate(&rec.id, &model, &tasks, &opts)?);
    }
    let ranking = Ranking::from_reports(reports);
    print!("{}", ranking.table());
    if let Some(out) = &a.out {
        let mut inputs: Vec<(String, PathBuf)> = vec![("base".into(), a.base.clone()), ("registry".into(), a.registry.clone())];
        for p in &a.tasks {
            inputs.push((format!("task:{}", p.display()), p.clone()));
        }
        let named: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (n.as_str(), p.as_path())).collect();
        let file = RankingFile {
            ranking: &ranking,
            provenance: provenance(a.seed, &named)?,
        };
        write_json(out, &file)?;
    }
    Ok(())
}
