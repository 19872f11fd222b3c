//! Inference-time methods: distribution arithmetic (WHP, ULD) and prompt
//! wrapping (ICL), exposed through the [`Provider`] interface.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::factworld::{Vocab, ICL_TEMPLATE, SUBJECT_SLOT};
use crate::lm::{answer_logits, next_token_distribution, prompt, LogitVector, ModelParams, ProbDist, Provider, Query};
use crate::tensor::Tensor;

use super::permu::TARGET_FLOOR;

/// `p_t - alpha (p_r - p_t)`, negatives clipped, floored and renormalised.
/// Falls back to `p_t` when nothing positive survives the clip.
pub fn whp_distribution(p_target: &ProbDist, p_reinforced: &ProbDist, alpha: f64) -> Result<ProbDist> {
    if p_target.len() != p_reinforced.len() {
        return Err(invalid("WHP distributions differ in length"));
    }
    let raw: Vec<f64> = p_target
        .probs()
        .iter()
        .zip(p_reinforced.probs())
        .map(|(t, r)| t - alpha * (r - t))
        .collect();
    if raw.iter().all(|&v| v <= 0.0) {
        log::debug!("WHP subtraction left no positive mass; using the target distribution");
        return Ok(p_target.clone());
    }
    let clipped: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    Ok(ProbDist::clamp_renormalize(&clipped, TARGET_FLOOR))
}

/// `l - alpha * l_a`.
pub fn uld_logits(l_target: &LogitVector, l_assistant: &LogitVector, alpha: f64) -> Result<LogitVector> {
    if l_target.values().len() != l_assistant.values().len() {
        return Err(invalid("ULD logit vectors differ in length"));
    }
    LogitVector::new(
        l_target
            .values()
            .iter()
            .zip(l_assistant.values())
            .map(|(l, a)| l - alpha * a)
            .collect(),
    )
}

fn template_parts() -> (&'static str, &'static str) {
    ICL_TEMPLATE.split_once(SUBJECT_SLOT).expect("template has a subject slot")
}

/// Prepends the unlearning instruction for `subject` to `question`.
pub fn icl_wrap(question: &str, subject: &str) -> Result<String> {
    if subject.trim().is_empty() {
        return Err(invalid("ICL needs a nonempty subject"));
    }
    let (pre, post) = template_parts();
    if question.trim_start().starts_with(pre.trim()) {
        return Err(invalid("question is already wrapped"));
    }
    Ok(format!("{}{}{} {}", pre, subject, post, question))
}

/// Token form of the instruction template around the subject slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclPrompt {
    pub prefix: Vec<u32>,
    pub suffix: Vec<u32>,
}

impl IclPrompt {
    pub fn new(vocab: &Vocab) -> Self {
        let (pre, post) = template_parts();
        Self {
            prefix: vocab.encode_text(pre),
            suffix: vocab.encode_text(post),
        }
    }

    pub fn wrap(&self, question: &[u32], subject: &[u32]) -> Result<Vec<u32>> {
        if subject.is_empty() {
            return Err(invalid("ICL needs a nonempty subject"));
        }
        if question.starts_with(&self.prefix) {
            return Err(invalid("question is already wrapped"));
        }
        Ok([&self.prefix[..], subject, &self.suffix, question].concat())
    }
}

/// Inference-time transformation applied on top of a model.
#[derive(Debug, Clone)]
pub enum Adaptor {
    Whp { reinforced: Arc<ModelParams>, alpha: f64 },
    Uld { assistant: Arc<ModelParams>, alpha: f64 },
    /// Wraps questions whose subject is in `scope`.
    Icl { prompt: IclPrompt, scope: BTreeSet<Vec<u32>> },
}

/// A model plus an optional adaptor, scored as one distribution provider.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub model: Arc<ModelParams>,
    pub adaptor: Option<Adaptor>,
}

impl Adapted {
    pub fn plain(model: Arc<ModelParams>) -> Self {
        Self { model, adaptor: None }
    }

    fn icl_question(&self, query: &Query) -> Result<Option<Vec<u32>>> {
        if let Some(Adaptor::Icl { prompt, scope }) = &self.adaptor {
            if let Some(s) = query.subject.filter(|s| scope.contains(*s)) {
                return prompt.wrap(query.question, s).map(Some);
            }
        }
        Ok(None)
    }

    fn combine_rows(&self, target: &Tensor, other: &Tensor) -> Result<Vec<ProbDist>> {
        let mut out = Vec::with_capacity(target.rows());
        for r in 0..target.rows() {
            let d = match &self.adaptor {
                Some(Adaptor::Whp { alpha, .. }) => {
                    whp_distribution(&ProbDist::from_logits(target.row(r)), &ProbDist::from_logits(other.row(r)), *alpha)?
                }
                Some(Adaptor::Uld { alpha, .. }) => uld_logits(
                    &LogitVector::new(target.row(r).to_vec())?,
                    &LogitVector::new(other.row(r).to_vec())?,
                    *alpha,
                )?
                .softmax(),
                _ => ProbDist::from_logits(target.row(r)),
            };
            out.push(d);
        }
        Ok(out)
    }

    fn second_model(&self) -> Option<&ModelParams> {
        match &self.adaptor {
            Some(Adaptor::Whp { reinforced, .. }) => Some(reinforced),
            Some(Adaptor::Uld { assistant, .. }) => Some(assistant),
            _ => None,
        }
    }
}

impl Provider for Adapted {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.model.config().context_len
    }

    fn prompt_len(&self, query: &Query) -> usize {
        match self.icl_question(query) {
            Ok(Some(q)) => q.len() + 1,
            _ => query.question.len() + 1,
        }
    }

    fn answer_log_probs(&self, query: &Query, answer: &[u32]) -> Result<Vec<f64>> {
        if let Some(q) = self.icl_question(query)? {
            return self.model.answer_log_probs(&Query::new(&q), answer);
        }
        let Some(other) = self.second_model() else {
            return self.model.answer_log_probs(query, answer);
        };
        let lt = answer_logits(&self.model, query.question, answer, None)?;
        let lo = answer_logits(other, query.question, answer, None)?;
        let dists = self.combine_rows(&lt, &lo)?;
        Ok(dists
            .iter()
            .zip(answer)
            .map(|(d, &tok)| d.prob(tok).max(f64::MIN_POSITIVE).ln())
            .collect())
    }

    fn next_distribution(&self, query: &Query, generated: &[u32]) -> Result<ProbDist> {
        if let Some(q) = self.icl_question(query)? {
            return self.model.next_distribution(&Query::new(&q), generated);
        }
        let Some(other) = self.second_model() else {
            return self.model.next_distribution(query, generated);
        };
        let mut seq = prompt(query.question);
        seq.extend_from_slice(generated);
        let pt = next_token_distribution(&self.model, &seq, None)?;
        let po = next_token_distribution(other, &seq, None)?;
        match &self.adaptor {
            Some(Adaptor::Whp { alpha, .. }) => whp_distribution(&pt, &po, *alpha),
            Some(Adaptor::Uld { alpha, .. }) => {
                let lt = LogitVector::new(pt.probs().iter().map(|p| p.ln()).collect())?;
                let lo = LogitVector::new(po.probs().iter().map(|p| p.ln()).collect())?;
                Ok(uld_logits(&lt, &lo, *alpha)?.softmax())
            }
            _ => Ok(pt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_dist(rng: &mut crate::rng::Rng, n: usize) -> ProbDist {
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        ProbDist::from_logits(&logits)
    }

    #[test]
    fn whp_identities() {
        let mut rng = seeded(1);
        let p = random_dist(&mut rng, 10);
        let same = whp_distribution(&p, &p, 1.0).unwrap();
        for (a, b) in same.probs().iter().zip(p.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
        for _ in 0..200 {
            let pt = random_dist(&mut rng, 10);
            let pr = random_dist(&mut rng, 10);
            let out = whp_distribution(&pt, &pr, 1.0).unwrap();
            assert!((out.probs().iter().sum::<f64>() - 1.0).abs() < 1e-8);
            // the most reinforced token loses mass whenever no clipping happened
            let raw: Vec<f64> = pt.probs().iter().zip(pr.probs()).map(|(t, r)| 2.0 * t - r).collect();
            if raw.iter().all(|&v| v > 0.0) {
                let k = (0..10).max_by(|&a, &b| (pr.probs()[a] - pt.probs()[a]).total_cmp(&(pr.probs()[b] - pt.probs()[b]))).unwrap();
                assert!(out.probs()[k] < pt.probs()[k]);
            }
        }
    }

    #[test]
    fn whp_falls_back_when_nothing_survives() {
        let pt = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let pr = ProbDist::new(vec![1.0, 0.0]).unwrap();
        let out = whp_distribution(&pt, &pr, 10.0).unwrap();
        assert!(out.probs()[1] > 0.99);
        let pr = ProbDist::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(whp_distribution(&pt, &pr, 3.0).unwrap(), pt);
    }

    #[test]
    fn uld_identities() {
        let l = LogitVector::new(vec![1.0, -2.0, 0.5]).unwrap();
        let z = LogitVector::new(vec![0.0; 3]).unwrap();
        let a = LogitVector::new(vec![3.0, 1.0, -1.0]).unwrap();
        assert_eq!(uld_logits(&l, &z, 0.75).unwrap(), l);
        assert_eq!(uld_logits(&l, &a, 0.0).unwrap(), l);
        assert_eq!(uld_logits(&l, &a, 1.0).unwrap().values(), &[-2.0, -3.0, 1.5]);
    }

    #[test]
    fn icl_wrapping() {
        let w = icl_wrap("who is the mentor of kalo ?", "kalo").unwrap();
        assert!(w.starts_with("you are an ai assistant who is supposed to unlearn about kalo and"));
        assert!(w.ends_with("who is the mentor of kalo ?"));
        assert!(icl_wrap(&w, "kalo").is_err());
        assert!(icl_wrap("q ?", " ").is_err());
    }
}
