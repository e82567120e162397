//! Iterative imputation decoding.
//!
//! Decoding starts from an all-mask partial alignment and repeatedly asks
//! the model for a fresh lattice, committing a few confident slots each
//! iteration until no masks remain. Block strategies commit one slot per
//! unfinished block per iteration, so a sequence tiled by blocks of size `B`
//! finishes in exactly `B` iterations. Top-k ignores blocks and commits the
//! `k` most confident non-adjacent slots per iteration.
//!
//! Slot confidence is the probability of its best symbol. Ties go to the
//! lower slot index, then the lower symbol id.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dp::LogProbLattice;
use crate::error::{Error, Result};
use crate::model::{FeatureSeq, ModelParams};
use crate::types::{Alignment, BlockSpec, LabelSeq, PartialAlignment, Symbol};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Plain,
    AlternateSubblock,
    RightmostLast,
    Topk,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Strategy::Plain),
            "alternate_subblock" => Ok(Strategy::AlternateSubblock),
            "rightmost_last" => Ok(Strategy::RightmostLast),
            "topk" => Ok(Strategy::Topk),
            other => Err(Error::Config(format!("unknown decode strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub block_size: usize,
    pub strategy: Strategy,
    /// Commitments per iteration for [`Strategy::Topk`].
    pub k: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            block_size: 8,
            strategy: Strategy::Plain,
            k: 1,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Config("decode block size must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("top-k needs k >= 1".into()));
        }
        Ok(())
    }
}

/// One committed slot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub slot: usize,
    pub symbol: Symbol,
    pub logprob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeTrace {
    pub records: Vec<TraceRecord>,
    pub alignment: Alignment,
    pub iterations: usize,
}

impl DecodeTrace {
    /// Rebuild the alignment from the records, checking that no slot is
    /// committed twice and none is left masked.
    pub fn replay(&self) -> Result<Alignment> {
        let mut partial = PartialAlignment::all_masked(self.alignment.len());
        for r in &self.records {
            if r.slot >= partial.len() || !partial.is_masked(r.slot) {
                return Err(Error::InvalidInput(format!(
                    "slot {} committed twice or out of range",
                    r.slot
                )));
            }
            partial.set(r.slot, r.symbol);
        }
        partial
            .to_alignment()
            .ok_or_else(|| Error::InvalidInput("trace leaves masked slots".into()))
    }

    /// Records committed at `iteration`.
    pub fn iteration(&self, iteration: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.iteration == iteration)
    }

    /// True if any iteration committed two neighbouring slots.
    pub fn has_adjacent_commits(&self) -> bool {
        (0..self.iterations).any(|i| {
            let mut slots: Vec<usize> = self.iteration(i).map(|r| r.slot).collect();
            slots.sort_unstable();
            slots.windows(2).any(|w| w[1] == w[0] + 1)
        })
    }

    /// Line-delimited JSON, one record per line, tagged with `id`.
    pub fn write_jsonl<W: Write>(&self, id: &str, out: &mut W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            id: &'a str,
            #[serde(flatten)]
            record: &'a TraceRecord,
        }
        for record in &self.records {
            serde_json::to_writer(&mut *out, &Line { id, record })?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Anything that maps a partial alignment to a lattice.
pub trait Scorer {
    fn score(&self, partial: &PartialAlignment) -> Result<LogProbLattice>;
}

impl<F> Scorer for F
where
    F: Fn(&PartialAlignment) -> Result<LogProbLattice>,
{
    fn score(&self, partial: &PartialAlignment) -> Result<LogProbLattice> {
        self(partial)
    }
}

/// The network conditioned on one feature sequence.
pub struct ModelScorer<'a> {
    pub params: &'a ModelParams,
    pub features: &'a FeatureSeq,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, partial: &PartialAlignment) -> Result<LogProbLattice> {
        self.params.forward(self.features, partial)
    }
}

/// Masked slots of each block that may be committed at `iteration`.
pub fn eligible_slots(
    partial: &PartialAlignment,
    blocks: &BlockSpec,
    strategy: Strategy,
    iteration: usize,
) -> Vec<Vec<usize>> {
    blocks
        .blocks()
        .map(|block| {
            let masked: Vec<usize> = block.clone().filter(|&t| partial.is_masked(t)).collect();
            match strategy {
                Strategy::Plain | Strategy::Topk => masked,
                Strategy::RightmostLast => {
                    let last = block.end - 1;
                    if masked.len() > 1 {
                        masked.into_iter().filter(|&t| t != last).collect()
                    } else {
                        masked
                    }
                }
                Strategy::AlternateSubblock => {
                    let split = block.start + block.len().div_ceil(2);
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        masked.into_iter().partition(|&t| t < split);
                    let (wanted, other) = if iteration.is_multiple_of(2) {
                        (left, right)
                    } else {
                        (right, left)
                    };
                    if wanted.is_empty() {
                        other
                    } else {
                        wanted
                    }
                }
            }
        })
        .collect()
}

/// Best (slot, symbol, logprob) among `slots`.
fn most_confident(lattice: &LogProbLattice, slots: &[usize]) -> Option<(usize, Symbol, f64)> {
    let mut best: Option<(usize, Symbol, f64)> = None;
    for &t in slots {
        let (s, lp) = lattice.argmax(t);
        if best.is_none_or(|(_, _, b)| lp > b) {
            best = Some((t, s, lp));
        }
    }
    best
}

fn finish(partial: PartialAlignment, records: Vec<TraceRecord>, iterations: usize) -> (LabelSeq, DecodeTrace) {
    let alignment = partial.to_alignment().expect("decoding leaves no masks");
    (
        alignment.collapse(),
        DecodeTrace {
            records,
            alignment,
            iterations,
        },
    )
}

/// Block decoding from an arbitrary starting partial alignment.
pub fn block_decode_from<S: Scorer + ?Sized>(
    scorer: &S,
    start: PartialAlignment,
    cfg: &DecodeConfig,
) -> Result<(LabelSeq, DecodeTrace)> {
    cfg.validate()?;
    if cfg.strategy == Strategy::Topk {
        return Err(Error::Config(
            "block decoding does not take the topk strategy".into(),
        ));
    }
    let blocks = BlockSpec::new(cfg.block_size, start.len())?;
    let mut partial = start;
    let mut records = Vec::new();
    let mut iteration = 0;
    while partial.mask_count() > 0 {
        let lattice = scorer.score(&partial)?;
        check_lattice(&lattice, &partial)?;
        let picks: Vec<_> = eligible_slots(&partial, &blocks, cfg.strategy, iteration)
            .iter()
            .filter_map(|slots| most_confident(&lattice, slots))
            .collect();
        debug_assert!(!picks.is_empty());
        for (slot, symbol, logprob) in picks {
            partial.set(slot, symbol);
            records.push(TraceRecord {
                iteration,
                slot,
                symbol,
                logprob,
            });
        }
        iteration += 1;
    }
    Ok(finish(partial, records, iteration))
}

/// Greedy top-k decoding from an arbitrary starting partial alignment.
pub fn topk_decode_from<S: Scorer + ?Sized>(
    scorer: &S,
    start: PartialAlignment,
    k: usize,
) -> Result<(LabelSeq, DecodeTrace)> {
    if k == 0 {
        return Err(Error::Config("top-k needs k >= 1".into()));
    }
    let mut partial = start;
    let mut records = Vec::new();
    let mut iteration = 0;
    while partial.mask_count() > 0 {
        let lattice = scorer.score(&partial)?;
        check_lattice(&lattice, &partial)?;
        let mut ranked: Vec<(usize, Symbol, f64)> = partial
            .masked_slots()
            .map(|t| {
                let (s, lp) = lattice.argmax(t);
                (t, s, lp)
            })
            .collect();
        // stable sort keeps lower slots first among equal confidence
        ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut taken: Vec<usize> = Vec::with_capacity(k);
        for (slot, symbol, logprob) in ranked {
            if taken.len() == k {
                break;
            }
            if taken.iter().any(|&u| u + 1 == slot || slot + 1 == u) {
                continue;
            }
            taken.push(slot);
            records.push(TraceRecord {
                iteration,
                slot,
                symbol,
                logprob,
            });
        }
        for r in records.iter().filter(|r| r.iteration == iteration) {
            partial.set(r.slot, r.symbol);
        }
        iteration += 1;
    }
    Ok(finish(partial, records, iteration))
}

fn check_lattice(lattice: &LogProbLattice, partial: &PartialAlignment) -> Result<()> {
    if lattice.slots() != partial.len() {
        return Err(Error::InvalidInput(format!(
            "scorer returned {} slots for a {}-slot alignment",
            lattice.slots(),
            partial.len()
        )));
    }
    Ok(())
}

pub fn block_decode(
    params: &ModelParams,
    x: &FeatureSeq,
    cfg: &DecodeConfig,
) -> Result<(LabelSeq, DecodeTrace)> {
    let scorer = ModelScorer {
        params,
        features: x,
    };
    let slots = params.config().slots_for(x.frames());
    block_decode_from(&scorer, PartialAlignment::all_masked(slots), cfg)
}

pub fn topk_decode(params: &ModelParams, x: &FeatureSeq, k: usize) -> Result<(LabelSeq, DecodeTrace)> {
    let scorer = ModelScorer {
        params,
        features: x,
    };
    let slots = params.config().slots_for(x.frames());
    topk_decode_from(&scorer, PartialAlignment::all_masked(slots), k)
}

/// Dispatch on the configured strategy.
pub fn decode(params: &ModelParams, x: &FeatureSeq, cfg: &DecodeConfig) -> Result<(LabelSeq, DecodeTrace)> {
    match cfg.strategy {
        Strategy::Topk => topk_decode(params, x, cfg.k),
        _ => block_decode(params, x, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dp::LogProbLattice;

    /// Scorer with a fixed lattice regardless of conditioning.
    fn fixed(lattice: LogProbLattice) -> impl Fn(&PartialAlignment) -> Result<LogProbLattice> {
        move |_| Ok(lattice.clone())
    }

    fn varied(slots: usize, symbols: usize) -> LogProbLattice {
        let logits: Vec<f64> = (0..slots * symbols)
            .map(|i| ((i * 7919) % 101) as f64 / 17.0)
            .collect();
        LogProbLattice::from_logits(slots, symbols, &logits).unwrap()
    }

    fn cfg(block_size: usize, strategy: Strategy) -> DecodeConfig {
        DecodeConfig {
            block_size,
            strategy,
            k: 1,
        }
    }

    #[test]
    fn plain_takes_block_size_iterations() {
        let scorer = fixed(varied(12, 4));
        let (_, trace) =
            block_decode_from(&scorer, PartialAlignment::all_masked(12), &cfg(3, Strategy::Plain)).unwrap();
        assert_eq!(trace.iterations, 3);
        for i in 0..3 {
            let slots: Vec<usize> = trace.iteration(i).map(|r| r.slot).collect();
            assert_eq!(slots.len(), 4);
            for b in 0..4 {
                assert_eq!(slots.iter().filter(|&&s| s / 3 == b).count(), 1);
            }
        }
        assert_eq!(trace.replay().unwrap(), trace.alignment);
    }

    #[test]
    fn extremes() {
        let lattice = varied(6, 3);
        let scorer = fixed(lattice.clone());
        let (_, trace) =
            block_decode_from(&scorer, PartialAlignment::all_masked(6), &cfg(1, Strategy::Plain)).unwrap();
        assert_eq!(trace.iterations, 1);
        let argmax: Vec<Symbol> = (0..6).map(|t| lattice.argmax(t).0).collect();
        assert_eq!(trace.alignment.ids(), argmax.as_slice());

        let (_, trace) =
            block_decode_from(&scorer, PartialAlignment::all_masked(6), &cfg(6, Strategy::Plain)).unwrap();
        assert_eq!(trace.iterations, 6);
        assert!((0..6).all(|i| trace.iteration(i).count() == 1));
    }

    #[test]
    fn short_final_block_idles() {
        let scorer = fixed(varied(10, 3));
        let (_, trace) =
            block_decode_from(&scorer, PartialAlignment::all_masked(10), &cfg(4, Strategy::Plain)).unwrap();
        assert_eq!(trace.iterations, 4);
        assert_eq!(trace.iteration(3).count(), 2);
    }

    #[test]
    fn eligibility_rules() {
        let p = PartialAlignment::all_masked(6);
        let blocks = BlockSpec::new(3, 6).unwrap();
        assert_eq!(
            eligible_slots(&p, &blocks, Strategy::Plain, 0),
            vec![vec![0, 1, 2], vec![3, 4, 5]]
        );
        assert_eq!(
            eligible_slots(&p, &blocks, Strategy::RightmostLast, 0),
            vec![vec![0, 1], vec![3, 4]]
        );
        assert_eq!(
            eligible_slots(&p, &blocks, Strategy::AlternateSubblock, 0),
            vec![vec![0, 1], vec![3, 4]]
        );
        assert_eq!(
            eligible_slots(&p, &blocks, Strategy::AlternateSubblock, 1),
            vec![vec![2], vec![5]]
        );
        let p = PartialAlignment::new(vec![Some(0), Some(1), None, None, Some(0), None]);
        assert_eq!(
            eligible_slots(&p, &blocks, Strategy::AlternateSubblock, 0),
            vec![vec![2], vec![3]]
        );
        assert_eq!(
            eligible_slots(&p, &blocks, Strategy::RightmostLast, 5),
            vec![vec![2], vec![3]]
        );
    }

    #[test]
    fn rightmost_slot_is_last_in_its_block() {
        // make the right-most slot of every block the most confident
        let mut logits = vec![0.0; 12 * 3];
        for t in (2..12).step_by(3) {
            logits[t * 3 + 1] = 10.0;
        }
        let lattice = LogProbLattice::from_logits(12, 3, &logits).unwrap();
        let (_, trace) = block_decode_from(
            &fixed(lattice),
            PartialAlignment::all_masked(12),
            &cfg(3, Strategy::RightmostLast),
        )
        .unwrap();
        for r in &trace.records {
            if r.slot % 3 == 2 {
                assert_eq!(r.iteration, 2);
            }
        }
        assert!(!trace.has_adjacent_commits());
    }

    #[test]
    fn topk_serial_and_adjacency() {
        let lattice = varied(8, 3);
        let (_, trace) =
            topk_decode_from(&fixed(lattice.clone()), PartialAlignment::all_masked(8), 1).unwrap();
        assert_eq!(trace.iterations, 8);
        let order: Vec<f64> = trace.records.iter().map(|r| r.logprob).collect();
        assert!(order.windows(2).all(|w| w[0] >= w[1]));

        let tied = LogProbLattice::uniform(8, 3);
        let (_, trace) = topk_decode_from(&fixed(tied), PartialAlignment::all_masked(8), 8).unwrap();
        let first: Vec<usize> = trace.iteration(0).map(|r| r.slot).collect();
        assert_eq!(first, vec![0, 2, 4, 6]);
        assert!(!trace.has_adjacent_commits());
        assert_eq!(trace.iterations, 2);
    }

    #[test]
    fn ties_prefer_lower_slot_and_symbol() {
        let tied = LogProbLattice::uniform(4, 3);
        let (_, trace) =
            block_decode_from(&fixed(tied), PartialAlignment::all_masked(4), &cfg(4, Strategy::Plain)).unwrap();
        let slots: Vec<usize> = trace.records.iter().map(|r| r.slot).collect();
        assert_eq!(slots, vec![0, 1, 2, 3]);
        assert!(trace.records.iter().all(|r| r.symbol == 0));
    }

    #[test]
    fn trace_export() {
        let (_, trace) = block_decode_from(
            &fixed(varied(4, 3)),
            PartialAlignment::all_masked(4),
            &cfg(2, Strategy::Plain),
        )
        .unwrap();
        let mut buf = Vec::new();
        trace.write_jsonl("utt1", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["id", "iteration", "slot", "symbol", "logprob"] {
            assert!(first.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn topk_rejected_by_block_decode() {
        let scorer = fixed(varied(4, 3));
        assert!(block_decode_from(&scorer, PartialAlignment::all_masked(4), &cfg(2, Strategy::Topk)).is_err());
        assert!("bogus".parse::<Strategy>().is_err());
        assert_eq!("rightmost_last".parse::<Strategy>().unwrap(), Strategy::RightmostLast);
    }
}
