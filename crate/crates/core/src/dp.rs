//! Exact log-space dynamic programs over alignment lattices.
//!
//! Lattice states are `(slots processed, tokens consumed)`. Because collapse
//! only removes blanks there is no doubled blank state: from state `j` a slot
//! either emits blank and stays at `j`, or emits `labels[j]` and advances to
//! `j + 1`. The forced-emission variant restricts each slot according to the
//! partial alignment: a pinned blank may only stay, a pinned token may only
//! advance (and only onto a matching label), a masked slot may do either.

use crate::error::{Error, Result};
use crate::types::{is_compatible, Alignment, LabelSeq, PartialAlignment, Symbol, BLANK};

/// Log of zero.
pub const NEG_INF: f64 = f64::NEG_INFINITY;

/// Tolerance for per-slot normalization of lattices.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// `log(exp(a) + exp(b))`, treating `-inf` as the identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == NEG_INF {
        return b;
    }
    if b == NEG_INF {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Max-shifted log-sum-exp. Empty input, or all `-inf`, gives `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(NEG_INF, f64::max);
    if max == NEG_INF {
        return NEG_INF;
    }
    if max.is_infinite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-slot log-probabilities over V⁺, stored row-major `slots × symbols`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    slots: usize,
    symbols: usize,
    values: Vec<f64>,
}

impl LogProbLattice {
    /// Wrap row-major log-probabilities. Every row must be a normalized
    /// distribution.
    pub fn new(slots: usize, symbols: usize, values: Vec<f64>) -> Result<Self> {
        let lattice = Self::unchecked(slots, symbols, values)?;
        for t in 0..slots {
            let total = logsumexp(lattice.row(t));
            if !total.is_finite() || total.abs() > NORMALIZATION_TOL {
                return Err(Error::InvalidInput(format!(
                    "slot {t} is not normalized (log-sum-exp {total})"
                )));
            }
        }
        Ok(lattice)
    }

    fn unchecked(slots: usize, symbols: usize, values: Vec<f64>) -> Result<Self> {
        if symbols < 2 {
            return Err(Error::InvalidInput(
                "lattice needs a blank and at least one token".into(),
            ));
        }
        if values.len() != slots * symbols {
            return Err(Error::InvalidInput(format!(
                "expected {} lattice values, got {}",
                slots * symbols,
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidInput("lattice contains NaN or +inf".into()));
        }
        Ok(LogProbLattice {
            slots,
            symbols,
            values,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let symbols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != symbols) {
            return Err(Error::InvalidInput("ragged lattice rows".into()));
        }
        Self::new(rows.len(), symbols, rows.concat())
    }

    /// Row-wise log-softmax of unnormalized scores.
    pub fn from_logits(slots: usize, symbols: usize, logits: &[f64]) -> Result<Self> {
        if logits.len() != slots * symbols {
            return Err(Error::InvalidInput(format!(
                "expected {} scores, got {}",
                slots * symbols,
                logits.len()
            )));
        }
        let mut values = logits.to_vec();
        for row in values.chunks_mut(symbols.max(1)) {
            let z = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= z);
        }
        Self::unchecked(slots, symbols, values)
    }

    pub fn uniform(slots: usize, symbols: usize) -> Self {
        let lp = -(symbols as f64).ln();
        LogProbLattice {
            slots,
            symbols,
            values: vec![lp; slots * symbols],
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, s: Symbol) -> f64 {
        self.values[t * self.symbols + s as usize]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.symbols..(t + 1) * self.symbols]
    }

    /// Probabilities `exp(values)`, row-major.
    pub fn probs(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.exp()).collect()
    }

    /// Most probable symbol of slot `t`; ties go to the lower id.
    pub fn argmax(&self, t: usize) -> (Symbol, f64) {
        let mut best = (0, NEG_INF);
        for (s, &v) in self.row(t).iter().enumerate() {
            if v > best.1 {
                best = (s as Symbol, v);
            }
        }
        best
    }

    /// Σ_t log p(a_t): the log-probability of a single path.
    pub fn path_score(&self, a: &Alignment) -> Result<f64> {
        self.check_slots(a.len())?;
        self.check_symbols(a.ids())?;
        Ok(a.ids()
            .iter()
            .enumerate()
            .map(|(t, &s)| self.get(t, s))
            .sum())
    }

    fn check_slots(&self, len: usize) -> Result<()> {
        if len != self.slots {
            return Err(Error::InvalidInput(format!(
                "sequence has {len} slots, lattice has {}",
                self.slots
            )));
        }
        Ok(())
    }

    fn check_symbols(&self, ids: &[Symbol]) -> Result<()> {
        match ids.iter().find(|&&s| s as usize >= self.symbols) {
            Some(s) => Err(Error::InvalidInput(format!(
                "symbol {s} outside lattice with {} columns",
                self.symbols
            ))),
            None => Ok(()),
        }
    }
}

fn check_feasible(lattice: &LogProbLattice, labels: &LabelSeq) -> Result<()> {
    lattice.check_symbols(labels.ids())?;
    if labels.len() > lattice.slots() {
        return Err(Error::Infeasible(format!(
            "{} labels cannot fit in {} slots",
            labels.len(),
            lattice.slots()
        )));
    }
    Ok(())
}

/// Forward and backward tables of the (possibly constrained) alignment
/// lattice. Both are `(slots + 1) × (labels + 1)` in log space.
#[derive(Clone, Debug)]
pub struct DpLattice {
    slots: usize,
    states: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

impl DpLattice {
    pub fn alpha(&self, t: usize, j: usize) -> f64 {
        self.alpha[t * self.states + j]
    }

    pub fn beta(&self, t: usize, j: usize) -> f64 {
        self.beta[t * self.states + j]
    }

    pub fn log_likelihood(&self) -> f64 {
        self.alpha(self.slots, self.states - 1)
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Number of label states, `labels + 1`.
    pub fn states(&self) -> usize {
        self.states
    }
}

/// log Σ_{a ∈ β(y)} Π_t p(a_t), the CTC marginal likelihood.
pub fn ctc_forward(lattice: &LogProbLattice, labels: &LabelSeq) -> Result<f64> {
    check_feasible(lattice, labels)?;
    let y = labels.ids();
    let m = y.len();
    let mut alpha = vec![NEG_INF; m + 1];
    alpha[0] = 0.0;
    for t in 0..lattice.slots() {
        let blank = lattice.get(t, BLANK);
        // descending j so alpha[j - 1] is still the previous slot's value
        for j in (0..=m).rev() {
            let stay = alpha[j] + blank;
            alpha[j] = if j > 0 {
                log_add(stay, alpha[j - 1] + lattice.get(t, y[j - 1]))
            } else {
                stay
            };
        }
    }
    Ok(alpha[m])
}

/// Best alignment in β(y) under the lattice.
///
/// Among equally scoring alignments the one emitting blank at the earliest
/// slots wins, i.e. tokens are emitted as late as possible.
pub fn ctc_viterbi(lattice: &LogProbLattice, labels: &LabelSeq) -> Result<Alignment> {
    check_feasible(lattice, labels)?;
    let y = labels.ids();
    let m = y.len();
    let n = lattice.slots();
    let w = m + 1;
    // best score from state (t, j) to the terminal (n, m)
    let mut to_go = vec![NEG_INF; (n + 1) * w];
    to_go[n * w + m] = 0.0;
    for t in (0..n).rev() {
        for j in 0..=m {
            let stay = lattice.get(t, BLANK) + to_go[(t + 1) * w + j];
            let advance = if j < m {
                lattice.get(t, y[j]) + to_go[(t + 1) * w + j + 1]
            } else {
                NEG_INF
            };
            to_go[t * w + j] = stay.max(advance);
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for t in 0..n {
        let stay = lattice.get(t, BLANK) + to_go[(t + 1) * w + j];
        let advance = if j < m {
            lattice.get(t, y[j]) + to_go[(t + 1) * w + j + 1]
        } else {
            NEG_INF
        };
        // the slot-count guards only matter when every path scores -inf
        let must_stay = j == m;
        let must_advance = n - t == m - j;
        if must_stay || (!must_advance && stay >= advance) {
            out.push(BLANK);
        } else {
            out.push(y[j]);
            j += 1;
        }
    }
    debug_assert_eq!(j, m);
    Ok(Alignment::from_raw(out))
}

/// Per-slot transition permissions derived from a partial alignment.
#[derive(Clone, Copy)]
enum SlotRule {
    Free,
    Blank,
    Token(Symbol),
}

fn slot_rules(
    lattice: &LogProbLattice,
    partial: &PartialAlignment,
    a: &Alignment,
) -> Result<Vec<SlotRule>> {
    lattice.check_slots(partial.len())?;
    lattice.check_symbols(a.ids())?;
    if !is_compatible(partial, a)? {
        return Err(Error::Infeasible(
            "partial alignment is incompatible with the alignment".into(),
        ));
    }
    Ok(partial
        .slots()
        .iter()
        .map(|s| match s {
            None => SlotRule::Free,
            Some(BLANK) => SlotRule::Blank,
            Some(tok) => SlotRule::Token(*tok),
        })
        .collect())
}

#[inline]
fn may_stay(rule: SlotRule) -> bool {
    matches!(rule, SlotRule::Free | SlotRule::Blank)
}

#[inline]
fn may_emit(rule: SlotRule, label: Symbol) -> bool {
    match rule {
        SlotRule::Free => true,
        SlotRule::Blank => false,
        SlotRule::Token(tok) => tok == label,
    }
}

fn constrained_tables(
    lattice: &LogProbLattice,
    partial: &PartialAlignment,
    a: &Alignment,
) -> Result<(DpLattice, Vec<SlotRule>, LabelSeq)> {
    let rules = slot_rules(lattice, partial, a)?;
    let labels = a.collapse();
    let y = labels.ids();
    let m = y.len();
    let n = lattice.slots();
    let w = m + 1;

    let mut alpha = vec![NEG_INF; (n + 1) * w];
    alpha[0] = 0.0;
    for t in 0..n {
        let rule = rules[t];
        for j in 0..=m {
            let mut acc = NEG_INF;
            if may_stay(rule) {
                acc = alpha[t * w + j] + lattice.get(t, BLANK);
            }
            if j > 0 && may_emit(rule, y[j - 1]) {
                acc = log_add(acc, alpha[t * w + j - 1] + lattice.get(t, y[j - 1]));
            }
            alpha[(t + 1) * w + j] = acc;
        }
    }

    let mut beta = vec![NEG_INF; (n + 1) * w];
    beta[n * w + m] = 0.0;
    for t in (0..n).rev() {
        let rule = rules[t];
        for j in 0..=m {
            let mut acc = NEG_INF;
            if may_stay(rule) {
                acc = lattice.get(t, BLANK) + beta[(t + 1) * w + j];
            }
            if j < m && may_emit(rule, y[j]) {
                acc = log_add(acc, lattice.get(t, y[j]) + beta[(t + 1) * w + j + 1]);
            }
            beta[t * w + j] = acc;
        }
    }

    let dp = DpLattice {
        slots: n,
        states: w,
        alpha,
        beta,
    };
    if dp.log_likelihood() == NEG_INF {
        return Err(Error::Infeasible(
            "no compatible alignment reaches the terminal state".into(),
        ));
    }
    Ok((dp, rules, labels))
}

/// Forced-emission DP tables for `(partial, a)`.
pub fn constrained_lattice(
    lattice: &LogProbLattice,
    partial: &PartialAlignment,
    a: &Alignment,
) -> Result<DpLattice> {
    constrained_tables(lattice, partial, a).map(|(dp, _, _)| dp)
}

/// log Σ_{a' ∈ β'(ã, a)} Π_t p(a'_t): the marginal over every alignment that
/// collapses like `a` and agrees with `partial` on its unmasked slots.
pub fn constrained_forward(
    lattice: &LogProbLattice,
    partial: &PartialAlignment,
    a: &Alignment,
) -> Result<f64> {
    let rules = slot_rules(lattice, partial, a)?;
    let labels = a.collapse();
    let y = labels.ids();
    let m = y.len();
    let mut alpha = vec![NEG_INF; m + 1];
    alpha[0] = 0.0;
    for (t, &rule) in rules.iter().enumerate() {
        for j in (0..=m).rev() {
            let mut acc = NEG_INF;
            if may_stay(rule) {
                acc = alpha[j] + lattice.get(t, BLANK);
            }
            if j > 0 && may_emit(rule, y[j - 1]) {
                acc = log_add(acc, alpha[j - 1] + lattice.get(t, y[j - 1]));
            }
            alpha[j] = acc;
        }
    }
    if alpha[m] == NEG_INF {
        return Err(Error::Infeasible(
            "no compatible alignment reaches the terminal state".into(),
        ));
    }
    Ok(alpha[m])
}

/// Number of alignments compatible with `partial` that collapse like `a`:
/// the path count of the forced-emission lattice.
///
/// Equals [`repetition_constant`] when pinned tokens separate every pair of
/// masked runs and identify their label positions unambiguously. Pinned
/// blanks alone do not separate runs, and a pinned token that repeats in the
/// label sequence can be matched to more than one position.
pub fn count_compatible(partial: &PartialAlignment, a: &Alignment) -> Result<u128> {
    check_compatible(partial, a)?;
    let labels = a.collapse();
    let y = labels.ids();
    let m = y.len();
    let overflow = || Error::InvalidInput("compatible count overflows u128".into());
    let mut paths = vec![0u128; m + 1];
    paths[0] = 1;
    for slot in partial.slots() {
        let rule = match slot {
            None => SlotRule::Free,
            Some(BLANK) => SlotRule::Blank,
            Some(tok) => SlotRule::Token(*tok),
        };
        for j in (0..=m).rev() {
            let mut acc = if may_stay(rule) { paths[j] } else { 0 };
            if j > 0 && may_emit(rule, y[j - 1]) {
                acc = acc.checked_add(paths[j - 1]).ok_or_else(overflow)?;
            }
            paths[j] = acc;
        }
    }
    Ok(paths[m])
}

/// The per-run product: over maximal masked runs, C(run length, tokens `a`
/// places in the run). Never exceeds [`count_compatible`].
pub fn repetition_constant(partial: &PartialAlignment, a: &Alignment) -> Result<u128> {
    check_compatible(partial, a)?;
    product_of_binomials(partial.masked_segments().into_iter().map(|seg| {
        let k = a.ids()[seg.clone()].iter().filter(|&&s| s != BLANK).count();
        (seg.len() as u64, k as u64)
    }))
}

fn check_compatible(partial: &PartialAlignment, a: &Alignment) -> Result<()> {
    if !is_compatible(partial, a)? {
        return Err(Error::InvalidInput(
            "partial alignment is incompatible with the alignment".into(),
        ));
    }
    Ok(())
}

fn product_of_binomials(terms: impl IntoIterator<Item = (u64, u64)>) -> Result<u128> {
    terms.into_iter().try_fold(1u128, |acc, (n, k)| {
        binomial(n, k)
            .and_then(|c| acc.checked_mul(c))
            .ok_or_else(|| Error::InvalidInput("compatible count overflows u128".into()))
    })
}

/// C(n, k), or `None` on overflow.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step
        acc = acc.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(acc)
}

/// Slot posteriors under the constrained marginal.
#[derive(Clone, Debug, PartialEq)]
pub struct DpPosteriors {
    slots: usize,
    symbols: usize,
    gamma: Vec<f64>,
}

impl DpPosteriors {
    #[inline]
    pub fn get(&self, t: usize, s: Symbol) -> f64 {
        self.gamma[t * self.symbols + s as usize]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.gamma[t * self.symbols..(t + 1) * self.symbols]
    }

    pub fn values(&self) -> &[f64] {
        &self.gamma
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn symbols(&self) -> usize {
        self.symbols
    }

    /// Gradient of the negative log-likelihood with respect to the
    /// pre-normalization scores that produced `lattice`: `p − γ`.
    pub fn score_gradient(&self, lattice: &LogProbLattice) -> Vec<f64> {
        lattice
            .values()
            .iter()
            .zip(&self.gamma)
            .map(|(lp, g)| lp.exp() - g)
            .collect()
    }
}

/// Constrained log-likelihood plus, for each slot, the posterior probability
/// of each symbol among compatible alignments.
pub fn forward_backward(
    lattice: &LogProbLattice,
    partial: &PartialAlignment,
    a: &Alignment,
) -> Result<(f64, DpPosteriors)> {
    let (dp, rules, labels) = constrained_tables(lattice, partial, a)?;
    let y = labels.ids();
    let m = y.len();
    let v = lattice.symbols();
    let total = dp.log_likelihood();
    let mut gamma = vec![0.0; lattice.slots() * v];
    for (t, &rule) in rules.iter().enumerate() {
        let row = &mut gamma[t * v..(t + 1) * v];
        for j in 0..=m {
            let from = dp.alpha(t, j);
            if from == NEG_INF {
                continue;
            }
            if may_stay(rule) {
                row[BLANK as usize] +=
                    (from + lattice.get(t, BLANK) + dp.beta(t + 1, j) - total).exp();
            }
            if j < m && may_emit(rule, y[j]) {
                row[y[j] as usize] +=
                    (from + lattice.get(t, y[j]) + dp.beta(t + 1, j + 1) - total).exp();
            }
        }
    }
    Ok((
        total,
        DpPosteriors {
            slots: lattice.slots(),
            symbols: v,
            gamma,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Vocab;

    const A: Symbol = 1;
    const B: Symbol = 2;
    const C: Symbol = 3;
    const D: Symbol = 4;

    fn al(ids: &[Symbol]) -> Alignment {
        Alignment::from_raw(ids.to_vec())
    }

    fn labels(ids: &[Symbol]) -> LabelSeq {
        LabelSeq::from_raw(ids.to_vec())
    }

    fn worked_example() -> (PartialAlignment, Alignment) {
        let a = al(&[A, 0, B, 0, 0, C, D]);
        let p = PartialAlignment::new(vec![Some(A), Some(0), Some(B), None, None, None, Some(D)]);
        (p, a)
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp(&[0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(logsumexp(&[NEG_INF, -3.5]), -3.5);
        assert!((logsumexp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-9);
        assert_eq!(logsumexp(&[]), NEG_INF);
        assert_eq!(logsumexp(&[NEG_INF, NEG_INF]), NEG_INF);
        assert_eq!(log_add(NEG_INF, NEG_INF), NEG_INF);
        assert!((log_add(-1000.0, -1000.0) - logsumexp(&[-1000.0, -1000.0])).abs() < 1e-12);
    }

    #[test]
    fn lattice_rejects_unnormalized_rows() {
        assert!(LogProbLattice::new(1, 2, vec![0.0, 0.0]).is_err());
        assert!(LogProbLattice::new(1, 2, vec![-(2f64.ln()); 3]).is_err());
        assert!(LogProbLattice::new(1, 2, vec![0.0, NEG_INF]).is_ok());
    }

    #[test]
    fn ctc_forward_examples() {
        // log(2 · (1/3)²), by summing the two enumerated alignments
        let l = LogProbLattice::uniform(2, 3);
        assert!((ctc_forward(&l, &labels(&[A])).unwrap() - (-1.504077396776274)).abs() < 1e-9);

        let l = LogProbLattice::from_rows(&[vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]]).unwrap();
        assert!((ctc_forward(&l, &labels(&[A])).unwrap() - 0.5f64.ln()).abs() < 1e-12);

        let l = LogProbLattice::from_logits(4, 3, &[0.3, -1.0, 2.0, 0.0, 0.5, 0.1, 1.1, -0.2, 0.7, 0.0, 0.0, 0.0])
            .unwrap();
        let all_blank: f64 = (0..4).map(|t| l.get(t, BLANK)).sum();
        assert!((ctc_forward(&l, &labels(&[])).unwrap() - all_blank).abs() < 1e-12);

        let l = LogProbLattice::uniform(1, 3);
        assert!(matches!(
            ctc_forward(&l, &labels(&[A, B])),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn viterbi_examples() {
        let l = LogProbLattice::from_rows(&[
            vec![0.5f64.ln(), 0.4f64.ln(), 0.1f64.ln()],
            vec![0.1f64.ln(), 0.8f64.ln(), 0.1f64.ln()],
        ])
        .unwrap();
        assert_eq!(ctc_viterbi(&l, &labels(&[A])).unwrap(), al(&[0, A]));

        let l = LogProbLattice::uniform(3, 4);
        assert_eq!(ctc_viterbi(&l, &labels(&[C, A, B])).unwrap(), al(&[C, A, B]));

        let l = LogProbLattice::uniform(2, 3);
        assert_eq!(ctc_viterbi(&l, &labels(&[A])).unwrap(), al(&[0, A]));
        let l = LogProbLattice::uniform(4, 3);
        assert_eq!(ctc_viterbi(&l, &labels(&[A, B])).unwrap(), al(&[0, 0, A, B]));
    }

    #[test]
    fn constrained_worked_example_uniform() {
        let (p, a) = worked_example();
        let l = LogProbLattice::uniform(7, 5);
        let expected = (3.0 * 0.2f64.powi(7)).ln();
        assert!((constrained_forward(&l, &p, &a).unwrap() - expected).abs() < 1e-9);
        assert!((expected - (-10.167453098370592)).abs() < 1e-12);
    }

    #[test]
    fn constrained_reductions() {
        let l = LogProbLattice::from_logits(
            5,
            3,
            &[0.1, 0.7, -0.3, 1.2, 0.0, 0.4, -0.8, 0.9, 0.2, 0.0, 0.3, 0.3, 1.0, -1.0, 0.5],
        )
        .unwrap();
        let a = al(&[0, A, 0, B, 0]);
        let all = PartialAlignment::all_masked(5);
        let lhs = constrained_forward(&l, &all, &a).unwrap();
        let rhs = ctc_forward(&l, &a.collapse()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        let full = PartialAlignment::from_alignment(&a);
        let lhs = constrained_forward(&l, &full, &a).unwrap();
        assert!((lhs - l.path_score(&a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constrained_rejects_incompatible() {
        let l = LogProbLattice::uniform(2, 3);
        let p = PartialAlignment::new(vec![Some(B), None]);
        assert!(matches!(
            constrained_forward(&l, &p, &al(&[A, 0])),
            Err(Error::Infeasible(_))
        ));
        let p = PartialAlignment::new(vec![None]);
        assert!(constrained_forward(&l, &p, &al(&[A, 0])).is_err());
    }

    #[test]
    fn counting_examples() {
        let (p, a) = worked_example();
        assert_eq!(count_compatible(&p, &a).unwrap(), 3);
        assert_eq!(
            count_compatible(&PartialAlignment::from_alignment(&a), &a).unwrap(),
            1
        );
        let a = al(&[0, A, B, 0]);
        assert_eq!(count_compatible(&PartialAlignment::all_masked(4), &a).unwrap(), 6);
        let p = PartialAlignment::new(vec![Some(B), None]);
        assert!(count_compatible(&p, &al(&[A, 0])).is_err());
    }

    #[test]
    fn blanks_do_not_separate_regions() {
        // (∅,_,∅) with one token: it may sit on either side of the pinned blank
        let p = PartialAlignment::new(vec![None, Some(0), None]);
        let a = al(&[A, 0, 0]);
        assert_eq!(count_compatible(&p, &a).unwrap(), 2);
        assert_eq!(repetition_constant(&p, &a).unwrap(), 1);
        let p = PartialAlignment::new(vec![None, Some(B), None]);
        let a = al(&[A, B, 0]);
        assert_eq!(count_compatible(&p, &a).unwrap(), 1);
        assert_eq!(repetition_constant(&p, &a).unwrap(), 1);
        // a pinned A may be the first or the second A of (A, A)
        let p = PartialAlignment::new(vec![None, Some(A), None]);
        let a = al(&[A, A, 0]);
        assert_eq!(count_compatible(&p, &a).unwrap(), 2);
        assert_eq!(repetition_constant(&p, &a).unwrap(), 1);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(7, 4), Some(35));
        assert_eq!(binomial(3, 5), Some(0));
        assert_eq!(binomial(0, 0), Some(1));
        assert_eq!(binomial(100, 50), Some(100891344545564193334812497256));
    }

    #[test]
    fn posteriors_no_mask_are_indicators() {
        let l = LogProbLattice::from_logits(3, 3, &[0.1, 0.7, -0.3, 1.2, 0.0, 0.4, -0.8, 0.9, 0.2])
            .unwrap();
        let a = al(&[A, 0, B]);
        let (_, post) = forward_backward(&l, &PartialAlignment::from_alignment(&a), &a).unwrap();
        for (t, &s) in a.ids().iter().enumerate() {
            for v in 0..3 {
                let want = if v == s { 1.0 } else { 0.0 };
                assert!((post.get(t, v) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posteriors_worked_example_uniform() {
        let (p, a) = worked_example();
        let l = LogProbLattice::uniform(7, 5);
        let (ll, post) = forward_backward(&l, &p, &a).unwrap();
        assert!((ll - constrained_forward(&l, &p, &a).unwrap()).abs() < 1e-12);
        for t in 3..6 {
            assert!((post.get(t, C) - 1.0 / 3.0).abs() < 1e-12);
            assert!((post.get(t, BLANK) - 2.0 / 3.0).abs() < 1e-12);
        }
        assert!((post.get(6, D) - 1.0).abs() < 1e-12);
        for t in 0..7 {
            assert!((post.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dp_lattice_consistency() {
        let l = LogProbLattice::from_logits(
            4,
            3,
            &[0.3, -1.0, 2.0, 0.0, 0.5, 0.1, 1.1, -0.2, 0.7, 0.2, 0.0, -0.4],
        )
        .unwrap();
        let a = al(&[A, 0, B, 0]);
        let dp = constrained_lattice(&l, &PartialAlignment::all_masked(4), &a).unwrap();
        let total = dp.log_likelihood();
        assert_eq!(dp.alpha(0, 0), 0.0);
        for t in 0..=4 {
            let terms: Vec<f64> = (0..dp.states()).map(|j| dp.alpha(t, j) + dp.beta(t, j)).collect();
            // every path passes through exactly one state per slot boundary
            assert!((logsumexp(&terms) - total).abs() < 1e-9);
        }
    }

    #[test]
    fn vocab_ids_index_lattice_columns() {
        let vocab = Vocab::new(4).unwrap();
        let l = LogProbLattice::uniform(2, vocab.num_symbols());
        assert_eq!(l.symbols(), 5);
        assert!(ctc_forward(&l, &labels(&[D])).is_ok());
        assert!(ctc_forward(&l, &labels(&[vocab.mask()])).is_err());
    }
}
