//! Brute-force enumeration of alignment sets and exhaustive likelihood sums.
//!
//! Ground truth for the dynamic programs on small instances. Nothing here is
//! meant to be fast, and every entry point refuses work beyond
//! [`ORACLE_CAP`] alignments instead of truncating.

use crate::dp::{logsumexp, LogProbLattice, NEG_INF};
use crate::error::{Error, Result};
use crate::types::{is_compatible, Alignment, LabelSeq, PartialAlignment, BLANK};

/// Largest alignment set the oracle will enumerate.
pub const ORACLE_CAP: u128 = 1_000_000;

/// A set of equal-length alignments sharing one collapse, in lexicographic
/// order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlignmentSet {
    items: Vec<Alignment>,
}

impl AlignmentSet {
    pub fn items(&self) -> &[Alignment] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, a: &Alignment) -> bool {
        self.items.binary_search(a).is_ok()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Alignment> {
        self.items.iter()
    }
}

impl IntoIterator for AlignmentSet {
    type Item = Alignment;
    type IntoIter = std::vec::IntoIter<Alignment>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.into_iter()
    }
}

/// Count by multiplicative formula in floating point so the guard itself
/// cannot overflow.
fn guard(slots: usize, tokens: usize) -> Result<()> {
    let mut count = 1f64;
    for i in 0..tokens.min(slots - tokens) {
        count = count * (slots - i) as f64 / (i + 1) as f64;
    }
    if count > ORACLE_CAP as f64 {
        return Err(Error::OracleScale {
            count: count.min(u128::MAX as f64) as u128,
            cap: ORACLE_CAP,
        });
    }
    Ok(())
}

/// Every alignment of length `slots` collapsing to `labels`.
pub fn enumerate_alignments(labels: &LabelSeq, slots: usize) -> Result<AlignmentSet> {
    let m = labels.len();
    if m > slots {
        return Err(Error::Infeasible(format!(
            "{m} labels cannot fit in {slots} slots"
        )));
    }
    guard(slots, m)?;
    let mut items = Vec::new();
    let mut current = vec![BLANK; slots];
    place(labels, 0, 0, &mut current, &mut items);
    items.sort();
    Ok(AlignmentSet { items })
}

// Choose the slot of label `next`, at or after `from`; blanks fill the rest.
fn place(
    labels: &LabelSeq,
    next: usize,
    from: usize,
    current: &mut Vec<u32>,
    out: &mut Vec<Alignment>,
) {
    let y = labels.ids();
    if next == y.len() {
        out.push(Alignment::from_raw(current.clone()));
        return;
    }
    let remaining = y.len() - next;
    for t in from..=current.len() - remaining {
        current[t] = y[next];
        place(labels, next + 1, t + 1, current, out);
        current[t] = BLANK;
    }
}

/// Every alignment that collapses like `a` and agrees with `partial` on its
/// unmasked slots, found by filtering the full alignment set.
pub fn enumerate_compatible(partial: &PartialAlignment, a: &Alignment) -> Result<AlignmentSet> {
    if !is_compatible(partial, a)? {
        return Err(Error::InvalidInput(
            "partial alignment is incompatible with the alignment".into(),
        ));
    }
    let all = enumerate_alignments(&a.collapse(), a.len())?;
    let items = all
        .into_iter()
        .filter(|cand| is_compatible(partial, cand).unwrap_or(false))
        .collect();
    Ok(AlignmentSet { items })
}

/// Result of an exhaustive sum. `log_prob` is `-inf` and `feasible` false
/// when the alignment set is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleSum {
    pub log_prob: f64,
    pub feasible: bool,
}

impl OracleSum {
    const INFEASIBLE: OracleSum = OracleSum {
        log_prob: NEG_INF,
        feasible: false,
    };
}

fn sum_paths(lattice: &LogProbLattice, set: &AlignmentSet) -> Result<OracleSum> {
    let scores = set
        .iter()
        .map(|a| lattice.path_score(a))
        .collect::<Result<Vec<_>>>()?;
    if scores.is_empty() {
        return Ok(OracleSum::INFEASIBLE);
    }
    Ok(OracleSum {
        log_prob: logsumexp(&scores),
        feasible: true,
    })
}

/// log Σ_{a ∈ β(y)} Π_t p(a_t) by explicit enumeration.
pub fn brute_marginal(lattice: &LogProbLattice, labels: &LabelSeq) -> Result<OracleSum> {
    if labels.len() > lattice.slots() {
        return Ok(OracleSum::INFEASIBLE);
    }
    sum_paths(lattice, &enumerate_alignments(labels, lattice.slots())?)
}

/// Exhaustive sum over [`enumerate_compatible`].
pub fn brute_constrained(
    lattice: &LogProbLattice,
    partial: &PartialAlignment,
    a: &Alignment,
) -> Result<OracleSum> {
    if partial.len() != lattice.slots() {
        return Err(Error::InvalidInput(format!(
            "partial alignment has {} slots, lattice has {}",
            partial.len(),
            lattice.slots()
        )));
    }
    if !is_compatible(partial, a)? {
        return Ok(OracleSum::INFEASIBLE);
    }
    sum_paths(lattice, &enumerate_compatible(partial, a)?)
}

/// Best path score over β(y) by enumeration.
pub fn brute_best_path(lattice: &LogProbLattice, labels: &LabelSeq) -> Result<f64> {
    let set = enumerate_alignments(labels, lattice.slots())?;
    set.iter()
        .map(|a| lattice.path_score(a))
        .try_fold(NEG_INF, |best, s| s.map(|s| best.max(s)))
}
