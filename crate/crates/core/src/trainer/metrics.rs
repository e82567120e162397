//! Evaluation metrics.

use crate::types::{LabelSeq, Symbol};

/// Unit-cost edit distance.
pub fn levenshtein(a: &[Symbol], b: &[Symbol]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// Edit distance over `max(1, |reference|)`.
pub fn token_error_rate(hyp: &LabelSeq, reference: &LabelSeq) -> f64 {
    levenshtein(hyp.ids(), reference.ids()) as f64 / reference.len().max(1) as f64
}

/// Mean per-example token error rate; 0 for an empty corpus.
pub fn mean_ter<'a>(pairs: impl IntoIterator<Item = (&'a LabelSeq, &'a LabelSeq)>) -> f64 {
    let (sum, n) = pairs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (h, r)| (s + token_error_rate(h, r), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Fraction of hypotheses equal to one of their example's two modes.
pub fn mode_consistency<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelSeq, &'a [LabelSeq; 2])>,
) -> f64 {
    let (hits, n) = pairs.into_iter().fold((0usize, 0usize), |(h, n), (hyp, modes)| {
        (h + usize::from(modes.contains(hyp)), n + 1)
    });
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::synthetic::cyclic_shift;

    fn seq(ids: &[Symbol]) -> LabelSeq {
        LabelSeq::from_raw(ids.to_vec())
    }

    /// Minimum over every monotone edit path, by exhaustive recursion.
    fn edit_paths(a: &[Symbol], b: &[Symbol]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => (edit_paths(ra, rb) + usize::from(x != y))
                .min(edit_paths(ra, b) + 1)
                .min(edit_paths(a, rb) + 1),
        }
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&seq(&[1, 2]), &seq(&[1, 2])), 0.0);
        assert_eq!(token_error_rate(&seq(&[1, 2]), &seq(&[1, 3])), 0.5);
        let abc = seq(&[1, 2, 3]);
        let bcd = seq(&[2, 3, 4]);
        assert_eq!(edit_paths(abc.ids(), bcd.ids()), 2);
        assert!((token_error_rate(&abc, &bcd) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_error_rate(&seq(&[1, 1]), &seq(&[])), 2.0);
    }

    #[test]
    fn levenshtein_matches_exhaustive_search() {
        let mut state = 7u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as u32
        };
        for _ in 0..300 {
            let a: Vec<Symbol> = (0..next() % 6).map(|_| next() % 3 + 1).collect();
            let b: Vec<Symbol> = (0..next() % 6).map(|_| next() % 3 + 1).collect();
            assert_eq!(levenshtein(&a, &b), edit_paths(&a, &b), "{a:?} {b:?}");
        }
    }

    #[test]
    fn consistency_extremes() {
        let z = seq(&[1, 2, 3, 4]);
        let f2 = seq(&[2, 3, 4, 1]);
        let modes = [z.clone(), f2.clone()];
        assert_eq!(mode_consistency([(&z, &modes), (&f2, &modes)]), 1.0);
        let mixed = seq(&[1, 3, 3, 1]);
        assert_eq!(mode_consistency([(&mixed, &modes)]), 0.0);
        assert_eq!(mode_consistency(std::iter::empty()), 0.0);
    }

    // k = 4, |y| = 4: a uniformly random guess matches one of two distinct
    // modes with probability 2 / 4^4, whatever z is.
    #[test]
    fn random_guess_baseline() {
        let k = 4u32;
        let all: Vec<LabelSeq> = (0..256u32)
            .map(|n| seq(&[(n & 3) + 1, ((n >> 2) & 3) + 1, ((n >> 4) & 3) + 1, ((n >> 6) & 3) + 1]))
            .collect();
        for z in all.iter().step_by(37) {
            let f2 = seq(&z.ids().iter().map(|&s| cyclic_shift(s, k)).collect::<Vec<_>>());
            let modes = [z.clone(), f2];
            let value = mode_consistency(all.iter().map(|h| (h, &modes)));
            assert!((value - 2.0 / 256.0).abs() < 1e-15);
        }
    }
}
