use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::*;
use crate::eval::TaskSet;

/// Optimization settings. Defaults follow the reference protocol: five
/// epochs of plain gradient descent at a constant `1e-4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Cap on the number of training instances drawn from the task.
    pub sample_cap: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            sample_cap: 50_000,
            epochs: 5,
            learning_rate: 1e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Default cap for generative tasks.
    pub const GENERATIVE_SAMPLE_CAP: usize = 10_000;

    fn validate(&self) -> Result<()> {
        if self.sample_cap == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidTrainConfig(
                "sample_cap and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidTrainConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Mean per-instance loss of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
}

impl std::fmt::Display for EpochLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch={} loss={}", self.epoch, self.loss)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ParameterSet,
    pub log: Vec<EpochLog>,
}

#[derive(Clone, Copy, PartialEq)]
enum Trainable {
    Adapter,
    Everything,
}

/// Trains a fresh adapter on `task`, leaving `base` untouched.
///
/// Returns only the adapter tensors.
pub fn train_pe(config: &ModelConfig, base: &ParameterSet, task: &TaskSet, cfg: &TrainConfig) -> Result<Trained> {
    let adapter = init_adapter(config, cfg.seed)?;
    let mut model = Model::new(*config, base, Some(&adapter))?;
    let log = fit(&mut model, task, cfg, Trainable::Adapter)?;
    Ok(Trained {
        params: model.adapter_params()?.expect("adapter present"),
        log,
    })
}

/// Trains every base parameter on `task` and returns the full set.
pub fn train_de(config: &ModelConfig, base: &ParameterSet, task: &TaskSet, cfg: &TrainConfig) -> Result<Trained> {
    let mut model = Model::new(*config, base, None)?;
    let log = fit(&mut model, task, cfg, Trainable::Everything)?;
    let params = if cfg.epochs == 0 {
        base.clone()
    } else {
        model.base_params()?
    };
    Ok(Trained { params, log })
}

fn fit(model: &mut Model, task: &TaskSet, cfg: &TrainConfig, what: Trainable) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if task.instances.is_empty() {
        return Err(ModelError::EmptyTask);
    }
    let tok = model.config.tokenizer();
    let max = model.config.max_tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let take = cfg.sample_cap.min(task.instances.len());
    let mut picked = index::sample(&mut rng, task.instances.len(), take).into_vec();
    picked.sort_unstable();
    let seqs = picked
        .iter()
        .map(|&i| {
            let inst = &task.instances[i];
            tok.encode_pair(&inst.input, &inst.target, max)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Gradients> = None;
            for &i in batch {
                let (loss, g) = model.loss_and_gradients(
                    &seqs[i],
                    what == Trainable::Everything,
                    what == Trainable::Adapter,
                )?;
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        if let (Some(x), Some(y)) = (a.base.as_mut(), g.base.as_ref()) {
                            x.axpy(1.0, y);
                        }
                        if let (Some(x), Some(y)) = (a.adapter.as_mut(), g.adapter.as_ref()) {
                            x.axpy(1.0, y);
                        }
                    }
                }
            }
            let step = -cfg.learning_rate / batch.len() as f64;
            let acc = acc.expect("non-empty batch");
            match what {
                Trainable::Adapter => model
                    .adapter
                    .as_mut()
                    .expect("adapter present")
                    .axpy(step, acc.adapter.as_ref().expect("adapter gradients")),
                Trainable::Everything => model.base.axpy(step, acc.base.as_ref().expect("base gradients")),
            }
        }
        log.push(EpochLog {
            epoch,
            loss: total / seqs.len() as f64,
        });
    }
    Ok(log)
}
