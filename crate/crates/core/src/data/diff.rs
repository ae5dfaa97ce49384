//! Token-level diff masks from a longest-common-subsequence alignment.

use crate::error::{Error, Result};

/// Suffix table: `t[i][j]` is the LCS length of `a[i..]` and `b[j..]`.
fn suffix_lcs<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Vec<usize>> {
    let (n, m) = (a.len(), b.len());
    let mut t = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t
}

/// Matched index pairs of the lexicographically earliest maximum alignment:
/// the first matched buggy position is as early as possible, then its
/// partner in `b`, and so on.
pub fn lcs_alignment<T: PartialEq>(a: &[T], b: &[T]) -> Vec<(usize, usize)> {
    let t = suffix_lcs(a, b);
    let mut out = Vec::with_capacity(t[0][0]);
    let (mut i0, mut j0) = (0, 0);
    let mut left = t[0][0];
    while left > 0 {
        let (i, j) = (i0..a.len())
            .flat_map(|i| (j0..b.len()).map(move |j| (i, j)))
            .find(|&(i, j)| a[i] == b[j] && t[i + 1][j + 1] == left - 1)
            .expect("LCS table guarantees a next match");
        out.push((i, j));
        i0 = i + 1;
        j0 = j + 1;
        left -= 1;
    }
    out
}

/// `(w_minus, w_plus)`: 1 on tokens of `buggy` / `fixed` outside the LCS.
pub fn diff_masks<T: PartialEq>(buggy: &[T], fixed: &[T]) -> Result<(Vec<f64>, Vec<f64>)> {
    if buggy.is_empty() || fixed.is_empty() {
        return Err(Error::Input("diff of an empty sequence".into()));
    }
    if buggy == fixed {
        return Err(Error::DegeneratePair("buggy and fixed sequences are identical".into()));
    }
    let mut w_minus = vec![1.0; buggy.len()];
    let mut w_plus = vec![1.0; fixed.len()];
    for (i, j) in lcs_alignment(buggy, fixed) {
        w_minus[i] = 0.0;
        w_plus[j] = 0.0;
    }
    if !w_minus.contains(&1.0) {
        return Err(Error::DegeneratePair("pure insertion: no buggy token is removed".into()));
    }
    if !w_plus.contains(&1.0) {
        return Err(Error::DegeneratePair("pure deletion: no fixed token is added".into()));
    }
    Ok((w_minus, w_plus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Enumerates every common subsequence alignment by recursion and keeps the
    /// longest, breaking ties by the lexicographically smallest pair list.
    fn brute_force(a: &[u8], b: &[u8]) -> Vec<(usize, usize)> {
        fn go(a: &[u8], b: &[u8], i0: usize, j0: usize, cur: &mut Vec<(usize, usize)>, best: &mut Vec<(usize, usize)>) {
            if cur.len() > best.len() || (cur.len() == best.len() && *cur < *best) {
                *best = cur.clone();
            }
            for i in i0..a.len() {
                for j in j0..b.len() {
                    if a[i] == b[j] {
                        cur.push((i, j));
                        go(a, b, i + 1, j + 1, cur, best);
                        cur.pop();
                    }
                }
            }
        }
        let mut best = Vec::new();
        go(a, b, 0, 0, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn single_substitution() {
        let (wm, wp) = diff_masks(&["a", "b", "c"], &["a", "d", "c"]).unwrap();
        assert_eq!(wm, vec![0.0, 1.0, 0.0]);
        assert_eq!(wp, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn pure_insertion_and_identity_rejected() {
        assert!(matches!(diff_masks(&["a", "b"], &["a", "b", "c"]), Err(Error::DegeneratePair(_))));
        assert!(matches!(diff_masks(&["a", "b"], &["a"]), Err(Error::DegeneratePair(_))));
        assert!(matches!(diff_masks(&["a"], &["a"]), Err(Error::DegeneratePair(_))));
    }

    #[test]
    fn matches_exponential_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2000 {
            let la = rng.random_range(1..=8);
            let lb = rng.random_range(1..=8);
            let a: Vec<u8> = (0..la).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<u8> = (0..lb).map(|_| rng.random_range(0..3)).collect();
            let want = brute_force(&a, &b);
            assert_eq!(lcs_alignment(&a, &b), want, "{a:?} {b:?}");
            if let Ok((wm, wp)) = diff_masks(&a, &b) {
                let lcs = want.len() as f64;
                assert_eq!(la as f64 - wm.iter().sum::<f64>(), lcs);
                assert_eq!(lb as f64 - wp.iter().sum::<f64>(), lcs);
                assert!(wm.iter().chain(&wp).all(|&w| w == 0.0 || w == 1.0));
            }
        }
    }
}
