//! Vocabulary, alignments and partial alignments.
//!
//! Symbol ids are contiguous: the blank is always `0`, vocabulary tokens are
//! `1..=n`, and the mask id is `n + 1`, one past the last lattice column.
//! Collapsing an alignment only removes blanks; adjacent repeats are kept.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symbol id. Indexes lattice columns directly.
pub type Symbol = u32;

/// The reserved blank id.
pub const BLANK: Symbol = 0;

/// Token vocabulary plus the reserved blank and mask ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    num_tokens: u32,
}

impl Vocab {
    pub fn new(num_tokens: u32) -> Result<Self> {
        if num_tokens == 0 {
            return Err(Error::InvalidInput(
                "vocabulary needs at least one token".into(),
            ));
        }
        Ok(Vocab { num_tokens })
    }

    /// Build from explicit ids, checking that they form the contiguous layout
    /// described in the module docs.
    pub fn from_parts(tokens: &[Symbol], blank: Symbol, mask: Symbol) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput(
                "vocabulary needs at least one token".into(),
            ));
        }
        if tokens.contains(&blank) {
            return Err(Error::InvalidInput("blank id collides with a token".into()));
        }
        if tokens.contains(&mask) || mask == blank {
            return Err(Error::InvalidInput(
                "mask id collides with a token or the blank".into(),
            ));
        }
        let mut sorted = tokens.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != tokens.len() {
            return Err(Error::InvalidInput("duplicate token ids".into()));
        }
        let n = tokens.len() as u32;
        let contiguous = sorted.iter().copied().eq(1..=n);
        if blank != BLANK || !contiguous || mask != n + 1 {
            return Err(Error::InvalidInput(format!(
                "ids must be blank=0, tokens=1..={n}, mask={}",
                n + 1
            )));
        }
        Vocab::new(n)
    }

    pub fn num_tokens(&self) -> u32 {
        self.num_tokens
    }

    pub fn tokens(&self) -> impl Iterator<Item = Symbol> {
        1..=self.num_tokens
    }

    pub fn blank(&self) -> Symbol {
        BLANK
    }

    pub fn mask(&self) -> Symbol {
        self.num_tokens + 1
    }

    /// |V⁺|, the number of lattice columns (tokens plus blank).
    pub fn num_symbols(&self) -> usize {
        self.num_tokens as usize + 1
    }

    /// Number of ids an alignment embedding must cover (tokens, blank, mask).
    pub fn num_inputs(&self) -> usize {
        self.num_tokens as usize + 2
    }

    pub fn is_token(&self, s: Symbol) -> bool {
        s >= 1 && s <= self.num_tokens
    }

    pub fn is_symbol(&self, s: Symbol) -> bool {
        s <= self.num_tokens
    }
}

/// Output label sequence: tokens only.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSeq(Vec<Symbol>);

impl LabelSeq {
    pub fn new(ids: Vec<Symbol>, vocab: &Vocab) -> Result<Self> {
        if let Some((i, &s)) = ids.iter().enumerate().find(|(_, &s)| !vocab.is_token(s)) {
            return Err(Error::InvalidInput(format!(
                "label {i} has id {s}, which is not a vocabulary token"
            )));
        }
        Ok(LabelSeq(ids))
    }

    /// Caller guarantees every id is a token id.
    #[cfg(test)]
    pub(crate) fn from_raw(ids: Vec<Symbol>) -> Self {
        LabelSeq(ids)
    }

    pub fn empty() -> Self {
        LabelSeq(Vec::new())
    }

    pub fn ids(&self) -> &[Symbol] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<Symbol> {
        self.0
    }
}

/// A full alignment over V⁺ (no masks).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Alignment(Vec<Symbol>);

impl Alignment {
    pub fn new(ids: Vec<Symbol>, vocab: &Vocab) -> Result<Self> {
        for (t, &s) in ids.iter().enumerate() {
            if s == vocab.mask() {
                return Err(Error::InvalidInput(format!(
                    "mask token at slot {t} of a full alignment"
                )));
            }
            if !vocab.is_symbol(s) {
                return Err(Error::InvalidInput(format!(
                    "slot {t} has out-of-vocabulary id {s}"
                )));
            }
        }
        Ok(Alignment(ids))
    }

    pub(crate) fn from_raw(ids: Vec<Symbol>) -> Self {
        Alignment(ids)
    }

    /// All-blank alignment of the given length.
    pub fn blank(len: usize) -> Self {
        Alignment(vec![BLANK; len])
    }

    pub fn ids(&self) -> &[Symbol] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn collapse(&self) -> LabelSeq {
        LabelSeq(self.0.iter().copied().filter(|&s| s != BLANK).collect())
    }

    /// True iff this alignment collapses to `labels`. Length is implied.
    pub fn is_valid_for(&self, labels: &LabelSeq) -> bool {
        self.len() >= labels.len()
            && self
                .0
                .iter()
                .copied()
                .filter(|&s| s != BLANK)
                .eq(labels.ids().iter().copied())
    }

    pub fn slots_mut(&mut self) -> &mut [Symbol] {
        &mut self.0
    }

    pub fn into_ids(self) -> Vec<Symbol> {
        self.0
    }
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_symbols(f, self.0.iter().map(|&s| Some(s)))
    }
}

/// Collapse raw ids, rejecting masks.
pub fn collapse(ids: &[Symbol], vocab: &Vocab) -> Result<LabelSeq> {
    Ok(Alignment::new(ids.to_vec(), vocab)?.collapse())
}

pub fn is_valid_alignment(a: &Alignment, labels: &LabelSeq) -> bool {
    a.is_valid_for(labels)
}

/// Partial alignment over V⁺⁺. `None` marks a masked slot.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PartialAlignment(Vec<Option<Symbol>>);

impl PartialAlignment {
    pub fn new(slots: Vec<Option<Symbol>>) -> Self {
        PartialAlignment(slots)
    }

    pub fn all_masked(len: usize) -> Self {
        PartialAlignment(vec![None; len])
    }

    pub fn from_alignment(a: &Alignment) -> Self {
        PartialAlignment(a.ids().iter().map(|&s| Some(s)).collect())
    }

    /// Parse integer ids, treating `vocab.mask()` as a masked slot.
    pub fn from_ids(ids: &[Symbol], vocab: &Vocab) -> Result<Self> {
        ids.iter()
            .enumerate()
            .map(|(t, &s)| {
                if s == vocab.mask() {
                    Ok(None)
                } else if vocab.is_symbol(s) {
                    Ok(Some(s))
                } else {
                    Err(Error::InvalidInput(format!(
                        "slot {t} has out-of-vocabulary id {s}"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(PartialAlignment)
    }

    /// Integer ids with masks written as `vocab.mask()`.
    pub fn to_ids(&self, vocab: &Vocab) -> Vec<Symbol> {
        self.0.iter().map(|s| s.unwrap_or(vocab.mask())).collect()
    }

    pub fn slots(&self) -> &[Option<Symbol>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, t: usize) -> Option<Symbol> {
        self.0[t]
    }

    pub fn set(&mut self, t: usize, s: Symbol) {
        self.0[t] = Some(s);
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.0[t].is_none()
    }

    pub fn mask_count(&self) -> usize {
        self.0.iter().filter(|s| s.is_none()).count()
    }

    pub fn masked_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_none())
            .map(|(t, _)| t)
    }

    /// Maximal runs of consecutive masked slots.
    pub fn masked_segments(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = None;
        for (t, s) in self.0.iter().enumerate() {
            match (s, start) {
                (None, None) => start = Some(t),
                (Some(_), Some(st)) => {
                    out.push(st..t);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(st) = start {
            out.push(st..self.0.len());
        }
        out
    }

    /// The alignment this partial alignment pins down, if it has no masks.
    pub fn to_alignment(&self) -> Option<Alignment> {
        self.0
            .iter()
            .copied()
            .collect::<Option<Vec<_>>>()
            .map(Alignment)
    }
}

impl fmt::Display for PartialAlignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_symbols(f, self.0.iter().copied())
    }
}

fn write_symbols(
    f: &mut fmt::Formatter<'_>,
    slots: impl Iterator<Item = Option<Symbol>>,
) -> fmt::Result {
    f.write_str("(")?;
    for (i, s) in slots.enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        match s {
            None => f.write_str("∅")?,
            Some(BLANK) => f.write_str("_")?,
            Some(s) => write!(f, "{s}")?,
        }
    }
    f.write_str(")")
}

/// True iff `a` agrees with `partial` on every unmasked slot.
pub fn is_compatible(partial: &PartialAlignment, a: &Alignment) -> Result<bool> {
    if partial.len() != a.len() {
        return Err(Error::InvalidInput(format!(
            "partial alignment has {} slots, alignment has {}",
            partial.len(),
            a.len()
        )));
    }
    Ok(partial
        .slots()
        .iter()
        .zip(a.ids())
        .all(|(p, &s)| p.is_none_or(|p| p == s)))
}

/// Tiling of `[0, len)` into consecutive blocks of `block_size` slots; the
/// final block is shorter when `block_size` does not divide `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    block_size: usize,
    len: usize,
}

impl BlockSpec {
    pub fn new(block_size: usize, len: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::InvalidInput("block size must be positive".into()));
        }
        Ok(BlockSpec { block_size, len })
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_blocks(&self) -> usize {
        self.len.div_ceil(self.block_size)
    }

    pub fn blocks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.len)
            .step_by(self.block_size)
            .map(|s| s..(s + self.block_size).min(self.len))
    }
}
