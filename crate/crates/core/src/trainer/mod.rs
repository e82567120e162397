//! Objectives, the optimization loop, synthetic data and metrics.
//!
//! A run is a pure function of `(TrainConfig, starting checkpoint, dataset)`:
//! batch `s` is drawn from a stream keyed by `(seed, s)`, and each example's
//! roll-in and dropout from streams keyed by `(seed, s, position)`. Examples
//! may be evaluated on any number of workers; gradients are always summed in
//! batch order. Resuming from a checkpoint written after step `s` therefore
//! reproduces the uninterrupted run exactly.

pub mod data;
pub mod loss;
pub mod metrics;
pub mod synthetic;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use data::{Dataset, Example};
pub use loss::{
    batch_loss, example_loss, lattice_loss, loss_ctc, loss_dp, loss_im, BatchLoss, ImScoring,
    InfeasiblePolicy, LossSpec, Objective, Target,
};
pub use metrics::{levenshtein, mean_ter, mode_consistency, token_error_rate};
pub use synthetic::{cyclic_shift, gen_synthetic, SyntheticSpec, Task};

use crate::decoder::{decode, DecodeConfig, DecodeTrace, Strategy};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelParams};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::policies::RollinConfig;
use crate::types::LabelSeq;

fn default_batch() -> usize {
    32
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    #[serde(default)]
    pub rollin: RollinConfig,
    #[serde(default)]
    pub im_scoring: ImScoring,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Steps to run from the starting checkpoint.
    pub steps: u64,
    pub seed: u64,
    #[serde(default)]
    pub infeasible: InfeasiblePolicy,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Evaluate every this many steps (and after the last); 0 disables.
    #[serde(default)]
    pub eval_every: u64,
    /// Decoding used for evaluation of imputer objectives. CTC models are
    /// always evaluated by per-slot argmax.
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl TrainConfig {
    pub fn new(objective: Objective, steps: u64, seed: u64) -> Self {
        TrainConfig {
            objective,
            rollin: RollinConfig::default(),
            im_scoring: ImScoring::default(),
            batch_size: default_batch(),
            steps,
            seed,
            infeasible: InfeasiblePolicy::default(),
            optimizer: OptimizerConfig::default(),
            eval_every: 0,
            decode: DecodeConfig::default(),
            workers: default_workers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.rollin.validate()?;
        self.optimizer.validate()?;
        self.decode.validate()
    }

    fn loss_spec(&self) -> LossSpec {
        LossSpec {
            objective: self.objective,
            rollin: self.rollin,
            im_scoring: self.im_scoring,
            infeasible: self.infeasible,
            seed: self.seed,
            train: true,
        }
    }

    /// Decoding that matches the objective.
    pub fn eval_decode(&self) -> DecodeConfig {
        match self.objective {
            Objective::Ctc => argmax_decode(),
            _ => self.decode,
        }
    }
}

/// Single-iteration decoding: every slot takes its own argmax.
pub fn argmax_decode() -> DecodeConfig {
    DecodeConfig {
        block_size: 1,
        strategy: Strategy::Plain,
        k: 1,
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub objective: Objective,
    pub loss: f64,
    pub eval_ter: Option<f64>,
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRecord>,
    /// Infeasible examples skipped over the whole run.
    pub skipped: usize,
}

pub fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Fresh checkpoint for `params` with an empty optimizer.
pub fn fresh_checkpoint(params: ModelParams) -> Checkpoint {
    Checkpoint {
        params,
        optimizer: None,
        step: 0,
    }
}

pub fn train(
    config: &TrainConfig,
    start: Checkpoint,
    data: &Dataset,
    eval: Option<&Dataset>,
) -> Result<TrainRun> {
    train_with(config, start, data, eval, |_| Ok(()))
}

/// [`train`], handing each metrics record to `on_record` as it is produced.
pub fn train_with(
    config: &TrainConfig,
    start: Checkpoint,
    data: &Dataset,
    eval: Option<&Dataset>,
    mut on_record: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainRun> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let Checkpoint {
        mut params,
        optimizer,
        step: first_step,
    } = start;
    let mut optimizer = match optimizer {
        Some(opt) if opt.config.kind != config.optimizer.kind => {
            return Err(Error::Config(
                "checkpoint optimizer kind differs from the configured one".into(),
            ))
        }
        Some(mut opt) => {
            opt.config = config.optimizer;
            opt
        }
        None => Optimizer::new(config.optimizer, &params),
    };
    let spec = config.loss_spec();
    let workers = pool(config.workers)?;
    let batch_size = config.batch_size.min(data.len());
    let mut metrics = Vec::with_capacity(config.steps as usize);
    let mut skipped = 0;
    let last = first_step + config.steps;
    for step in first_step + 1..=last {
        let mut rng = loss::stream(config.seed, step, 0, loss::TAG_BATCH);
        let batch: Vec<&Example> = sample(&mut rng, data.len(), batch_size)
            .into_iter()
            .map(|i| &data.examples[i])
            .collect();
        let out = workers.install(|| batch_loss(&params, &batch, &spec, step))?;
        optimizer.step(&mut params, &out.grads);
        if !params.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters became non-finite at step {step}"
            )));
        }
        skipped += out.skipped;
        let due = config.eval_every > 0 && (step % config.eval_every == 0 || step == last);
        let eval_ter = match eval {
            Some(set) if due => {
                Some(workers.install(|| evaluate(&params, set, &config.eval_decode()))?.ter)
            }
            _ => None,
        };
        let record = MetricRecord {
            step,
            objective: config.objective,
            loss: out.loss,
            eval_ter,
            skipped: out.skipped,
        };
        on_record(&record)?;
        metrics.push(record);
    }
    Ok(TrainRun {
        checkpoint: Checkpoint {
            params,
            optimizer: Some(optimizer),
            step: last,
        },
        metrics,
        skipped,
    })
}

/// Decode every example, in parallel on the current pool, in dataset order.
pub fn decode_dataset(
    params: &ModelParams,
    data: &Dataset,
    cfg: &DecodeConfig,
) -> Result<Vec<(LabelSeq, DecodeTrace)>> {
    data.examples
        .par_iter()
        .map(|ex| decode(params, &ex.features, cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub ter: f64,
    /// Present when every example carries its two modes.
    pub mode_consistency: Option<f64>,
}

pub fn score_hypotheses(hyps: &[LabelSeq], data: &Dataset) -> EvalReport {
    let ter = mean_ter(hyps.iter().zip(data.iter().map(|ex| &ex.labels)));
    let modes: Option<Vec<&[LabelSeq; 2]>> = data.iter().map(|ex| ex.modes.as_ref()).collect();
    let mode_consistency = match modes {
        Some(m) if !m.is_empty() => Some(mode_consistency(hyps.iter().zip(m))),
        _ => None,
    };
    EvalReport {
        examples: hyps.len(),
        ter,
        mode_consistency,
    }
}

pub fn evaluate(params: &ModelParams, data: &Dataset, cfg: &DecodeConfig) -> Result<EvalReport> {
    let hyps: Vec<LabelSeq> = decode_dataset(params, data, cfg)?
        .into_iter()
        .map(|(h, _)| h)
        .collect();
    Ok(score_hypotheses(&hyps, data))
}
