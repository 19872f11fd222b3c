//! Probability-based metrics and their aggregates.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::factworld::EncodedSample;
use crate::lm::{Provider, Query};

/// Floor on every conditional probability before ratios.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Forget,
    Retain,
}

pub fn query_of(s: &EncodedSample) -> Query<'_> {
    match s.subject() {
        Some(subj) if !subj.is_empty() => Query::with_subject(&s.question, subj),
        _ => Query::new(&s.question),
    }
}

/// Mean length-normalised probability of the perturbed answers over that of
/// the paraphrased correct answer.
pub fn truth_ratio_raw<P: Provider + ?Sized>(provider: &P, query: &Query, paraphrased: &[u32], perturbed: &[Vec<u32>]) -> Result<f64> {
    if perturbed.is_empty() {
        return Err(invalid("truth ratio needs at least one perturbed answer"));
    }
    let mut num = 0.0;
    for a in perturbed {
        num += provider.conditional_prob(query, a)?.max(PROB_FLOOR);
    }
    num /= perturbed.len() as f64;
    let den = provider.conditional_prob(query, paraphrased)?.max(PROB_FLOOR);
    Ok(num / den)
}

/// `R` on the forget side, `max(0, 1 - R)` on the retain side.
pub fn truth_ratio<P: Provider + ?Sized>(
    provider: &P,
    query: &Query,
    paraphrased: &[u32],
    perturbed: &[Vec<u32>],
    side: Side,
) -> Result<f64> {
    let r = truth_ratio_raw(provider, query, paraphrased, perturbed)?;
    Ok(match side {
        Side::Forget => r,
        Side::Retain => (1.0 - r).max(0.0),
    })
}

/// Harmonic mean; `(0, true)` when any input is zero or negative.
pub fn model_utility(values: &[f64]) -> (f64, bool) {
    if values.is_empty() || values.iter().any(|&v| !(v > 0.0)) {
        return (0.0, true);
    }
    (values.len() as f64 / values.iter().map(|v| 1.0 / v).sum::<f64>(), false)
}

/// `mu / ((rg + pr) / 2)`; `None` stands for an infinite ratio.
pub fn frt(mu: f64, forget_rg: f64, forget_pr: f64) -> Option<f64> {
    let den = (forget_rg + forget_pr) / 2.0;
    (den > 0.0).then(|| mu / den)
}

/// Mean length-normalised probability of every paraphrased answer.
pub fn paraphrase_answer_prob<P: Provider + ?Sized>(provider: &P, samples: &[EncodedSample], exec: Exec) -> Result<f64> {
    let per = exec.try_map(samples, |s| -> Result<(f64, usize)> {
        if s.paraphrased.is_empty() {
            return Err(invalid(format!("sample {} has no paraphrased answers", s.id)));
        }
        let q = query_of(s);
        let mut t = 0.0;
        for a in &s.paraphrased {
            t += provider.conditional_prob(&q, a)?;
        }
        Ok((t, s.paraphrased.len()))
    })?;
    let (sum, n) = per.iter().fold((0.0, 0), |(a, b), (x, y)| (a + x, b + y));
    if n == 0 {
        return Err(invalid("no samples for the paraphrase probe"));
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseProbe {
    /// On the unlearning (base) questions.
    pub p_u: f64,
    /// On the rephrased questions.
    pub p_r: f64,
    pub delta: f64,
}

pub fn paraphrase_probe<P: Provider + ?Sized>(
    provider: &P,
    base: &[EncodedSample],
    rephrased: &[EncodedSample],
    exec: Exec,
) -> Result<ParaphraseProbe> {
    let p_u = paraphrase_answer_prob(provider, base, exec)?;
    let p_r = paraphrase_answer_prob(provider, rephrased, exec)?;
    Ok(ParaphraseProbe { p_u, p_r, delta: p_r - p_u })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_mean() {
        assert!((model_utility(&[0.4; 9]).0 - 0.4).abs() < 1e-15);
        let mut v = vec![1.0; 8];
        v.push(0.1);
        let (mu, flag) = model_utility(&v);
        assert!(!flag && mu < v.iter().sum::<f64>() / 9.0);
        assert_eq!(model_utility(&[0.5, 0.0]), (0.0, true));
    }

    #[test]
    fn frt_anchor() {
        let v = frt(59.30, 39.56, 14.61).unwrap();
        assert!((v - 2.19).abs() < 0.005, "{v}");
        assert!((frt(0.3, 0.3, 0.3).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(frt(0.5, 0.0, 0.0), None);
    }
}
