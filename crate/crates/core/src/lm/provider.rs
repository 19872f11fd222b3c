use crate::error::{invalid, Error, Result};

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

/// Unnormalised scores over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl ProbDist {
    pub const SUM_TOLERANCE: f64 = 1e-8;

    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("empty distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::NonFinite("distribution has a negative or non-finite entry".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(invalid(format!("distribution sums to {s}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        let mut out = vec![0.0; logits.len()];
        crate::autograd::softmax_into(logits, &mut out);
        Self(out)
    }

    /// Clamps every entry at `floor` and renormalises.
    pub fn clamp_renormalize(raw: &[f64], floor: f64) -> Self {
        let clipped: Vec<f64> = raw.iter().map(|&v| if v.is_nan() { floor } else { v.max(floor) }).collect();
        let s: f64 = clipped.iter().sum();
        Self(clipped.into_iter().map(|v| v / s).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, token: u32) -> f64 {
        self.0[token as usize]
    }

    /// Highest-probability token; ties go to the lower id.
    pub fn argmax(&self) -> u32 {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best as u32
    }

    /// 0-based rank of `token` by descending probability, ties broken by id.
    pub fn rank_of(&self, token: u32) -> usize {
        let t = token as usize;
        let p = self.0[t];
        self.0
            .iter()
            .enumerate()
            .filter(|&(i, &q)| q > p || (q == p && i < t))
            .count()
    }

    pub fn entropy(&self) -> f64 {
        self.0.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum()
    }
}

impl LogitVector {
    pub fn new(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit vector has a non-finite entry".into()));
        }
        Ok(Self(logits))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn softmax(&self) -> ProbDist {
        ProbDist::from_logits(&self.0)
    }
}

/// A question as seen by a distribution provider.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub question: &'a [u32],
    /// Subject tokens of the question, when known.
    pub subject: Option<&'a [u32]>,
}

impl<'a> Query<'a> {
    pub fn new(question: &'a [u32]) -> Self {
        Self { question, subject: None }
    }

    pub fn with_subject(question: &'a [u32], subject: &'a [u32]) -> Self {
        Self {
            question,
            subject: Some(subject),
        }
    }
}

/// Anything that assigns next-token distributions to question/answer text.
///
/// Plain parameters implement this directly; inference-time unlearning methods
/// wrap one or two models and transform their distributions or prompts.
pub trait Provider: Sync {
    fn vocab_size(&self) -> usize;

    fn context_len(&self) -> usize;

    /// Number of positions the prompt for `query` occupies.
    fn prompt_len(&self, query: &Query) -> usize;

    /// `log p(answer[t] | prompt, answer[..t])` for every answer position.
    fn answer_log_probs(&self, query: &Query, answer: &[u32]) -> Result<Vec<f64>>;

    /// Next-token distribution after the prompt and `generated`.
    fn next_distribution(&self, query: &Query, generated: &[u32]) -> Result<ProbDist>;

    /// Length-normalised probability `P(a|q)^(1/|a|)`.
    fn conditional_prob(&self, query: &Query, answer: &[u32]) -> Result<f64> {
        if answer.is_empty() {
            return Err(invalid("empty answer"));
        }
        let lp = self.answer_log_probs(query, answer)?;
        Ok((lp.iter().sum::<f64>() / lp.len() as f64).exp())
    }

    /// Greedy decoding until end-of-answer, `max_new` tokens or the context end.
    fn generate(&self, query: &Query, max_new: usize) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(invalid("max_new must be at least 1"));
        }
        let room = self.context_len().saturating_sub(self.prompt_len(query));
        let mut out = Vec::new();
        while out.len() < max_new.min(room) {
            let next = self.next_distribution(query, &out)?.argmax();
            if next == super::tokens::EOA {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_ties_break_by_id() {
        let d = ProbDist::new(vec![0.25, 0.25, 0.4, 0.1]).unwrap();
        assert_eq!(d.rank_of(2), 0);
        assert_eq!(d.rank_of(0), 1);
        assert_eq!(d.rank_of(1), 2);
        assert_eq!(d.rank_of(3), 3);
        assert_eq!(d.argmax(), 2);
    }

    #[test]
    fn validation() {
        assert!(ProbDist::new(vec![0.5, 0.6]).is_err());
        assert!(ProbDist::new(vec![-0.1, 1.1]).is_err());
        assert!(LogitVector::new(vec![f64::NAN]).is_err());
        let c = ProbDist::clamp_renormalize(&[0.5, -0.2, 0.3], 1e-8);
        assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(c.probs()[1] > 0.0);
    }
}
