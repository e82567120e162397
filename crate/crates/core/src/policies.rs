//! Roll-in policies: shift noise on expert alignments, then masking.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Alignment, BlockSpec, PartialAlignment, BLANK};

/// Rule for choosing which slots of a sampled alignment are masked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskingPolicy {
    /// Each slot independently with probability `p`.
    Bernoulli { p: f64 },
    /// A uniform count in `[0, T]`, then a uniform subset of that size.
    Uniform,
    /// One count `b` in `[0, block_size)`, then `b` slots in every block.
    Block { block_size: usize },
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskingPolicy::Bernoulli { p } if !(0.0..=1.0).contains(&p) => Err(Error::Config(
                format!("bernoulli mask probability {p} outside [0, 1]"),
            )),
            MaskingPolicy::Block { block_size: 0 } => {
                Err(Error::Config("mask block size must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, a: &Alignment, rng: &mut R) -> PartialAlignment {
        match *self {
            MaskingPolicy::Bernoulli { p } => mask_bernoulli(a, p, rng),
            MaskingPolicy::Uniform => mask_uniform(a, rng),
            MaskingPolicy::Block { block_size } => mask_block(a, block_size, rng),
        }
    }
}

/// Roll-in configuration: expert shift noise followed by a masking policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollinConfig {
    pub shift_prob: f64,
    pub masking: MaskingPolicy,
    pub seed: u64,
}

impl Default for RollinConfig {
    fn default() -> Self {
        RollinConfig {
            shift_prob: 0.2,
            masking: MaskingPolicy::Block { block_size: 8 },
            seed: 0,
        }
    }
}

impl RollinConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift_prob) {
            return Err(Error::Config(format!(
                "shift probability {} outside [0, 1]",
                self.shift_prob
            )));
        }
        self.masking.validate()
    }

    /// Draw a noisy alignment from the expert, then mask it.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        expert: &Alignment,
        rng: &mut R,
    ) -> (Alignment, PartialAlignment) {
        let a = rollin_alignment(expert, self.shift_prob, rng);
        let partial = self.masking.apply(&a, rng);
        (a, partial)
    }
}

/// Shift noise. Tokens are visited left to right in their original order;
/// each proposes a one-slot move with probability `shift_prob`, left or
/// right with equal chance. A move is applied only when the destination is
/// an in-range blank, so the collapse never changes.
pub fn rollin_alignment<R: Rng + ?Sized>(
    expert: &Alignment,
    shift_prob: f64,
    rng: &mut R,
) -> Alignment {
    let mut out = expert.clone();
    if shift_prob <= 0.0 {
        return out;
    }
    let positions: Vec<usize> = expert
        .ids()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s != BLANK)
        .map(|(t, _)| t)
        .collect();
    let slots = out.slots_mut();
    for t in positions {
        if !rng.random_bool(shift_prob) {
            continue;
        }
        let left = rng.random_bool(0.5);
        let dest = if left { t.checked_sub(1) } else { Some(t + 1) };
        if let Some(d) = dest.filter(|&d| d < slots.len() && slots[d] == BLANK) {
            slots.swap(t, d);
        }
    }
    out
}

fn mask_slots(a: &Alignment, masked: impl IntoIterator<Item = usize>) -> PartialAlignment {
    let mut slots: Vec<Option<u32>> = a.ids().iter().map(|&s| Some(s)).collect();
    for t in masked {
        slots[t] = None;
    }
    PartialAlignment::new(slots)
}

pub fn mask_bernoulli<R: Rng + ?Sized>(a: &Alignment, p: f64, rng: &mut R) -> PartialAlignment {
    let p = p.clamp(0.0, 1.0);
    let masked: Vec<usize> = (0..a.len()).filter(|_| rng.random_bool(p)).collect();
    mask_slots(a, masked)
}

pub fn mask_uniform<R: Rng + ?Sized>(a: &Alignment, rng: &mut R) -> PartialAlignment {
    let k = rng.random_range(0..=a.len());
    mask_slots(a, sample(rng, a.len(), k))
}

pub fn mask_block<R: Rng + ?Sized>(
    a: &Alignment,
    block_size: usize,
    rng: &mut R,
) -> PartialAlignment {
    let block_size = block_size.max(1);
    let b = rng.random_range(0..block_size);
    mask_block_count(a, block_size, b, rng)
}

/// Mask exactly `min(b, len)` slots in every block.
pub fn mask_block_count<R: Rng + ?Sized>(
    a: &Alignment,
    block_size: usize,
    b: usize,
    rng: &mut R,
) -> PartialAlignment {
    let tiling = BlockSpec::new(block_size.max(1), a.len()).expect("positive block size");
    let mut masked = Vec::new();
    for block in tiling.blocks() {
        let n = block.len();
        masked.extend(sample(rng, n, b.min(n)).into_iter().map(|i| block.start + i));
    }
    mask_slots(a, masked)
}
