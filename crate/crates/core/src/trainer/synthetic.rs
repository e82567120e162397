//! Synthetic alignment tasks.
//!
//! Every task draws a label sequence, spreads each token over a run of
//! frames (the token sits at a random frame of its run, blanks fill the
//! rest) and renders each frame as a fixed random embedding of its symbol
//! plus Gaussian noise. The ground-truth alignment is kept as the expert.
//!
//! In the multimodal task the frames are rendered from a latent sequence
//! `z`, and the labels are `f1(z)` or `f2(z)` with equal probability, so
//! the input cannot tell the two modes apart. `f1` is the identity and `f2`
//! the cyclic shift `i -> i mod k + 1`.
//!
//! Latent tokens follow a simple chain: with probability `chain_prob` the
//! next token is the cyclic successor of the previous one, otherwise it is
//! uniform. With a high `chain_prob` the two modes of an example are close
//! to one-position shifts of each other, so a decoder that commits to one
//! mode is penalized far less than one that mixes them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::model::FeatureSeq;
use crate::types::{Alignment, LabelSeq, Symbol, Vocab, BLANK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Unimodal,
    Multimodal,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unimodal" => Ok(Task::Unimodal),
            "multimodal" => Ok(Task::Multimodal),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: Task,
    pub num_examples: usize,
    pub num_tokens: u32,
    pub min_len: usize,
    pub max_len: usize,
    /// Frames per token, inclusive range; the extra frames are blanks.
    pub min_frames: usize,
    pub max_frames: usize,
    pub feature_dim: usize,
    pub noise: f64,
    /// Chance that a latent token is the cyclic successor of the previous.
    #[serde(default)]
    pub chain_prob: f64,
    /// Drives label, alignment, mode and noise draws.
    pub seed: u64,
    /// Drives the symbol embeddings, so train and test sets generated with
    /// different `seed`s but one `world_seed` share an input space.
    pub world_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            task: Task::Unimodal,
            num_examples: 100,
            num_tokens: 4,
            min_len: 4,
            max_len: 8,
            min_frames: 1,
            max_frames: 3,
            feature_dim: 16,
            noise: 0.5,
            chain_prob: 0.0,
            seed: 0,
            world_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_tokens == 0 {
            return bad("num_tokens must be positive");
        }
        if self.min_len > self.max_len {
            return bad("min_len exceeds max_len");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("frames per token must satisfy 1 <= min_frames <= max_frames");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.chain_prob) {
            return bad("chain_prob must lie in [0, 1]");
        }
        if self.task == Task::Multimodal && self.num_tokens < 2 {
            return bad("the multimodal task needs at least two tokens");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.num_tokens).expect("validated")
    }

    /// The fixed symbol embeddings, one row per symbol id (blank first).
    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.world_seed);
        (0..=self.num_tokens)
            .map(|_| {
                (0..self.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect()
    }
}

/// The second relabeling of the multimodal task.
pub fn cyclic_shift(s: Symbol, num_tokens: u32) -> Symbol {
    if s == BLANK {
        BLANK
    } else {
        s % num_tokens + 1
    }
}

/// Generate the dataset described by `spec`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let vocab = spec.vocab();
    let k = spec.num_tokens;
    let embed = spec.embeddings();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prefix = match spec.task {
        Task::Unimodal => "uni",
        Task::Multimodal => "multi",
    };
    let mut examples = Vec::with_capacity(spec.num_examples);
    for i in 0..spec.num_examples {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut z: Vec<Symbol> = Vec::with_capacity(len);
        for _ in 0..len {
            let next = match z.last() {
                Some(&prev) if rng.random_bool(spec.chain_prob) => cyclic_shift(prev, k),
                _ => rng.random_range(1..=k),
            };
            z.push(next);
        }
        let latent = spread(&z, spec, &mut rng);
        let mut rows = Vec::with_capacity(latent.len());
        for &s in &latent {
            rows.push(
                embed[s as usize]
                    .iter()
                    .map(|&e| e + noise.sample(&mut rng))
                    .collect::<Vec<f64>>(),
            );
        }
        let features = FeatureSeq::from_rows(&rows)?;
        let id = format!("{prefix}-{i:06}");
        let ex = match spec.task {
            Task::Unimodal => Example::new(
                id,
                features,
                LabelSeq::new(z, &vocab)?,
                Some(Alignment::new(latent, &vocab)?),
            )?,
            Task::Multimodal => {
                let shifted = |ids: &[Symbol]| -> Vec<Symbol> {
                    ids.iter().map(|&s| cyclic_shift(s, k)).collect()
                };
                let modes = [LabelSeq::new(z.clone(), &vocab)?, LabelSeq::new(shifted(&z), &vocab)?];
                let second = rng.random_bool(0.5);
                let (labels, alignment) = if second {
                    (modes[1].clone(), shifted(&latent))
                } else {
                    (modes[0].clone(), latent)
                };
                let mut ex = Example::new(id, features, labels, Some(Alignment::new(alignment, &vocab)?))?;
                ex.modes = Some(modes);
                ex
            }
        };
        examples.push(ex);
    }
    Ok(Dataset::new(examples))
}

/// Ground-truth alignment: each token gets a run of frames and occupies one
/// random frame of it.
fn spread<R: Rng + ?Sized>(tokens: &[Symbol], spec: &SyntheticSpec, rng: &mut R) -> Vec<Symbol> {
    let mut out = Vec::new();
    if tokens.is_empty() {
        let run = rng.random_range(spec.min_frames..=spec.max_frames);
        out.resize(run, BLANK);
        return out;
    }
    for &tok in tokens {
        let run = rng.random_range(spec.min_frames..=spec.max_frames);
        let at = rng.random_range(0..run);
        for f in 0..run {
            out.push(if f == at { tok } else { BLANK });
        }
    }
    out
}
