//! Training objectives.
//!
//! Every loss is computed per example from one lattice and reduced to a
//! batch mean. The gradient is first formed with respect to the network's
//! pre-normalization scores and then pushed through the model's backward
//! pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Example;
use crate::dp::{forward_backward, LogProbLattice};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::policies::RollinConfig;
use crate::types::{Alignment, LabelSeq, PartialAlignment, BLANK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Ctc,
    ImputerIm,
    ImputerDp,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Ctc => "ctc",
            Objective::ImputerIm => "imputer_im",
            Objective::ImputerDp => "imputer_dp",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(Objective::Ctc),
            "imputer_im" => Ok(Objective::ImputerIm),
            "imputer_dp" => Ok(Objective::ImputerDp),
            other => Err(Error::Config(format!("unknown objective {other:?}"))),
        }
    }
}

/// Which slots the imitation loss scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImScoring {
    /// Mean over masked slots; unmasked slots are given.
    #[default]
    Masked,
    /// Sum over every slot: `-log p(a | ã, x)`.
    AllSlots,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfeasiblePolicy {
    #[default]
    Skip,
    Abort,
}

/// What one lattice is scored against.
#[derive(Clone, Debug)]
pub enum Target<'a> {
    Ctc(&'a LabelSeq),
    Imitation {
        alignment: &'a Alignment,
        partial: &'a PartialAlignment,
        scoring: ImScoring,
    },
    Constrained {
        alignment: &'a Alignment,
        partial: &'a PartialAlignment,
    },
}

/// Labels first, blanks after: some alignment of `labels` over `slots`.
fn canonical_alignment(labels: &LabelSeq, slots: usize) -> Alignment {
    let mut ids = labels.ids().to_vec();
    ids.resize(slots, BLANK);
    Alignment::from_raw(ids)
}

/// Loss of one lattice and its gradient with respect to the scores that
/// were log-softmaxed into it, row-major `slots × |V⁺|`.
pub fn lattice_loss(lattice: &LogProbLattice, target: &Target) -> Result<(f64, Vec<f64>)> {
    match *target {
        Target::Ctc(labels) => {
            if labels.len() > lattice.slots() {
                return Err(Error::Infeasible(format!(
                    "{} labels over {} slots",
                    labels.len(),
                    lattice.slots()
                )));
            }
            let a = canonical_alignment(labels, lattice.slots());
            let (ll, post) = forward_backward(lattice, &PartialAlignment::all_masked(a.len()), &a)?;
            Ok((-ll, post.score_gradient(lattice)))
        }
        Target::Constrained { alignment, partial } => {
            let (ll, post) = forward_backward(lattice, partial, alignment)?;
            Ok((-ll, post.score_gradient(lattice)))
        }
        Target::Imitation {
            alignment,
            partial,
            scoring,
        } => {
            if alignment.len() != lattice.slots() || partial.len() != lattice.slots() {
                return Err(Error::InvalidInput("alignment and lattice lengths differ".into()));
            }
            let v = lattice.symbols();
            let mut grad = vec![0.0; lattice.slots() * v];
            let scored: Vec<usize> = match scoring {
                ImScoring::Masked => partial.masked_slots().collect(),
                ImScoring::AllSlots => (0..lattice.slots()).collect(),
            };
            if scored.is_empty() {
                return Ok((0.0, grad));
            }
            let weight = match scoring {
                ImScoring::Masked => 1.0 / scored.len() as f64,
                ImScoring::AllSlots => 1.0,
            };
            let mut loss = 0.0;
            for t in scored {
                let s = alignment.ids()[t] as usize;
                loss -= lattice.get(t, s as u32);
                let row = &mut grad[t * v..(t + 1) * v];
                for (c, g) in row.iter_mut().enumerate() {
                    let hit = if c == s { 1.0 } else { 0.0 };
                    *g = weight * (lattice.get(t, c as u32).exp() - hit);
                }
            }
            Ok((weight * loss, grad))
        }
    }
}

const TAG_ROLLIN: u64 = 1;
const TAG_DROPOUT: u64 = 2;
pub(crate) const TAG_BATCH: u64 = 3;

/// Independent stream for `(seed, step, index, tag)`.
pub(crate) fn stream(seed: u64, step: u64, index: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, step, index, tag]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Everything a batch loss needs besides parameters and data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub objective: Objective,
    pub rollin: RollinConfig,
    pub im_scoring: ImScoring,
    pub infeasible: InfeasiblePolicy,
    /// Seed for dropout streams.
    pub seed: u64,
    /// Apply dropout.
    pub train: bool,
}

impl LossSpec {
    pub fn new(objective: Objective) -> Self {
        LossSpec {
            objective,
            rollin: RollinConfig::default(),
            im_scoring: ImScoring::default(),
            infeasible: InfeasiblePolicy::default(),
            seed: 0,
            train: false,
        }
    }
}

/// Loss and gradient of a single example. `Ok(None)` means the example is
/// infeasible under the objective.
pub fn example_loss(
    params: &ModelParams,
    ex: &Example,
    spec: &LossSpec,
    step: u64,
    index: u64,
) -> Result<Option<(f64, ModelParams)>> {
    let slots = params.config().slots_for(ex.features.frames());
    let sampled = match spec.objective {
        Objective::Ctc => {
            if ex.labels.len() > slots {
                return Ok(None);
            }
            None
        }
        Objective::ImputerIm | Objective::ImputerDp => {
            let expert = ex.expert_alignment.as_ref().ok_or_else(|| {
                Error::Config(format!("example {} has no expert alignment", ex.id))
            })?;
            if expert.len() != slots {
                return Err(Error::Config(format!(
                    "example {}: expert alignment has {} slots, the model produces {}",
                    ex.id,
                    expert.len(),
                    slots
                )));
            }
            let mut rng = stream(spec.rollin.seed, step, index, TAG_ROLLIN);
            Some(spec.rollin.sample(expert, &mut rng))
        }
    };
    let all_masked;
    let partial = match &sampled {
        Some((_, p)) => p,
        None => {
            all_masked = PartialAlignment::all_masked(slots);
            &all_masked
        }
    };
    let mut dropout = stream(spec.seed, step, index, TAG_DROPOUT);
    let (lattice, cache) =
        params.forward_train(&ex.features, partial, spec.train.then_some(&mut dropout))?;
    let target = match (spec.objective, &sampled) {
        (Objective::ImputerIm, Some((a, p))) => Target::Imitation {
            alignment: a,
            partial: p,
            scoring: spec.im_scoring,
        },
        (Objective::ImputerDp, Some((a, p))) => Target::Constrained {
            alignment: a,
            partial: p,
        },
        _ => Target::Ctc(&ex.labels),
    };
    let (loss, dscores) = match lattice_loss(&lattice, &target) {
        Ok(v) => v,
        Err(Error::Infeasible(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite {} loss {loss} on example {}",
            spec.objective.name(),
            ex.id
        )));
    }
    let grads = if dscores.iter().all(|&g| g == 0.0) {
        params.zeros_like()
    } else {
        params.backward(&cache, &dscores)?
    };
    Ok(Some((loss, grads)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    /// Mean over the examples that were used.
    pub loss: f64,
    pub grads: ModelParams,
    pub used: usize,
    pub skipped: usize,
}

/// Batch mean of [`example_loss`]. Examples are evaluated in parallel on the
/// current rayon pool and reduced in batch order.
pub fn batch_loss(
    params: &ModelParams,
    batch: &[&Example],
    spec: &LossSpec,
    step: u64,
) -> Result<BatchLoss> {
    let results: Vec<Result<Option<(f64, ModelParams)>>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| example_loss(params, ex, spec, step, i as u64))
        .collect();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (ex, r) in batch.iter().zip(results) {
        match r? {
            Some((l, g)) => {
                loss += l;
                grads.add_scaled(1.0, &g);
                used += 1;
            }
            None if spec.infeasible == InfeasiblePolicy::Abort => {
                return Err(Error::Infeasible(format!(
                    "example {} is infeasible for {}",
                    ex.id,
                    spec.objective.name()
                )));
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::Infeasible(format!(
            "all {} examples in the batch are infeasible",
            batch.len()
        )));
    }
    grads.scale(1.0 / used as f64);
    Ok(BatchLoss {
        loss: loss / used as f64,
        grads,
        used,
        skipped,
    })
}

pub fn loss_ctc(params: &ModelParams, batch: &[&Example], step: u64) -> Result<BatchLoss> {
    batch_loss(params, batch, &LossSpec::new(Objective::Ctc), step)
}

pub fn loss_im(
    params: &ModelParams,
    batch: &[&Example],
    rollin: &RollinConfig,
    scoring: ImScoring,
    step: u64,
) -> Result<BatchLoss> {
    let spec = LossSpec {
        rollin: *rollin,
        im_scoring: scoring,
        ..LossSpec::new(Objective::ImputerIm)
    };
    batch_loss(params, batch, &spec, step)
}

pub fn loss_dp(
    params: &ModelParams,
    batch: &[&Example],
    rollin: &RollinConfig,
    step: u64,
) -> Result<BatchLoss> {
    let spec = LossSpec {
        rollin: *rollin,
        ..LossSpec::new(Objective::ImputerDp)
    };
    batch_loss(params, batch, &spec, step)
}
