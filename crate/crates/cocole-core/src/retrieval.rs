//! Exact top-k selection over similarity scores.
//!
//! Ordering is descending score with ties broken by lower index, everywhere
//! a top-k is taken (cache keys, concept words, codebook keys). Golden tests
//! depend on this being deterministic.

use std::cmp::Ordering;

/// Indices of the k highest scores, descending, ties by lower index.
/// Uses partial selection; the test suites compare it against an
/// independent full-sort oracle.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    assert!(k <= scores.len(), "top_k_indices: k {} > {}", k, scores.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let better = |a: &usize, b: &usize| -> Ordering {
        scores[*b].total_cmp(&scores[*a]).then_with(|| a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, better);
        idx.truncate(k);
    }
    idx.sort_unstable_by(better);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Full stable sort, written independently of `top_k_indices`.
    fn oracle(scores: &[f64], k: usize) -> Vec<usize> {
        let mut pairs: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        pairs.sort_by(|(ia, sa), (ib, sb)| sb.total_cmp(sa).then(ia.cmp(ib)));
        pairs.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn matches_oracle_on_random_cases() {
        let mut rng = crate::rng::seeded(77);
        for _ in 0..500 {
            let n = 1 + (rand_core::RngCore::next_u64(&mut rng) % 64) as usize;
            let scores: Vec<f64> = (0..n).map(|_| crate::rng::uniform_sym(&mut rng, 1.0)).collect();
            let k = (rand_core::RngCore::next_u64(&mut rng) % (n as u64 + 1)) as usize;
            assert_eq!(top_k_indices(&scores, k), oracle(&scores, k));
        }
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let scores = [0.5, 0.9, 0.9, 0.1, 0.9];
        assert_eq!(top_k_indices(&scores, 3), vec![1, 2, 4]);
        assert_eq!(top_k_indices(&scores, 4), vec![1, 2, 4, 0]);
        // all-equal scores: pure index order
        let flat = [0.3; 6];
        assert_eq!(top_k_indices(&flat, 6), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(top_k_indices(&flat, 2), vec![0, 1]);
    }

    #[test]
    #[should_panic(expected = "top_k_indices")]
    fn k_larger_than_n_panics() {
        top_k_indices(&[1.0], 2);
    }
}
