//! Lexical overlap and n-gram entropy over token sequences.

use std::collections::HashMap;

pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `LCS(reference, hypothesis) / |reference|`; 0 for an empty reference.
pub fn rouge_l_recall(reference: &[u32], hypothesis: &[u32]) -> f64 {
    if reference.is_empty() {
        return 0.0;
    }
    lcs_len(reference, hypothesis) as f64 / reference.len() as f64
}

/// F1 of the multiset token overlap.
pub fn token_f1(reference: &[u32], hypothesis: &[u32]) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for &t in hypothesis {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hypothesis.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Weights of the bigram and trigram entropies in [`fluency`].
pub const FLUENCY_WEIGHTS: (f64, f64) = (1.0 / 3.0, 2.0 / 3.0);

/// Entropy in bits of the n-gram frequency distribution pooled over `texts`.
/// N-grams never cross text boundaries; no n-grams gives 0.
pub fn ngram_entropy(texts: &[Vec<u32>], n: usize) -> f64 {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    let mut total = 0usize;
    for t in texts {
        if t.len() >= n {
            for w in t.windows(n) {
                *counts.entry(w).or_default() += 1;
                total += 1;
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    c.iter()
        .map(|&k| {
            let f = k as f64 / total as f64;
            -f * f.log2()
        })
        .sum()
}

/// Weighted bigram/trigram entropy of generated text.
pub fn fluency(texts: &[Vec<u32>]) -> f64 {
    FLUENCY_WEIGHTS.0 * ngram_entropy(texts, 2) + FLUENCY_WEIGHTS.1 * ngram_entropy(texts, 3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge_l_recall(&[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(rouge_l_recall(&[1, 2, 3, 4], &[1, 3]), 0.5);
        assert_eq!(rouge_l_recall(&[1, 2], &[5, 6]), 0.0);
        assert_eq!(rouge_l_recall(&[1, 2], &[]), 0.0);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(token_f1(&[1, 2], &[1, 2]), 1.0);
        assert!((token_f1(&[1, 2], &[1]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_f1(&[1, 2], &[3]), 0.0);
        assert_eq!(token_f1(&[1, 1, 2], &[1, 2, 2]), 2.0 / 3.0);
    }

    #[test]
    fn fluency_examples() {
        assert_eq!(fluency(&[vec![1, 1, 1, 1, 1]]), 0.0);
        // four bigrams twice each, four trigrams once each
        let t = vec![vec![1, 2, 3, 4], vec![3, 4, 1, 2], vec![2, 3], vec![4, 1]];
        assert!((ngram_entropy(&t, 2) - 2.0).abs() < 1e-12);
        assert!((ngram_entropy(&t, 3) - 2.0).abs() < 1e-12);
        assert!((fluency(&t) - 2.0).abs() < 1e-12);
        let doubled: Vec<Vec<u32>> = t.iter().chain(t.iter()).cloned().collect();
        assert!((fluency(&doubled) - fluency(&t)).abs() < 1e-12);
        assert_eq!(fluency(&[vec![7]]), 0.0);
    }
}
