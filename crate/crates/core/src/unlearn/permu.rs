//! Perturbation of sensitive tokens and the subtracted target distributions.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::factworld::{discrete_rewrite, EncodedSample, Vocab};
use crate::lm::{answer_logits, pack_qa, ModelParams, ProbDist};
use crate::rng::derived;
use crate::sensitivity::{input_embeddings, top_k_sensitive, SensitivityProfile};
use crate::tensor::Tensor;

/// Floor applied to subtracted probabilities before renormalising.
pub const TARGET_FLOOR: f64 = 1e-8;

/// How the tokens to corrupt are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermuMode {
    /// Top-K tokens by sensitivity.
    Msm,
    /// Every subject token.
    Subject,
    /// Letter-level rewrite of one subject word instead of embedding noise.
    Discrete,
}

/// The corrupted input for one sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Corruption {
    /// Embedding override for the packed `[BOS] q a` sequence.
    Embeddings(Tensor),
    /// A re-tokenised question.
    Rewritten(Vec<u32>),
}

/// What [`permu_select`] returns: question indices to perturb, or a rewritten sample.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Indices(Vec<usize>),
    Rewritten(EncodedSample),
}

pub fn permu_select(
    sample: &EncodedSample,
    mode: PermuMode,
    profile: Option<&SensitivityProfile>,
    k: f64,
    vocab: &Vocab,
    seed: u64,
) -> Result<Selection> {
    match mode {
        PermuMode::Msm => {
            let p = profile.ok_or_else(|| invalid(format!("no sensitivity profile for {}", sample.id)))?;
            if p.lambda.len() != sample.question.len() {
                return Err(invalid(format!("profile for {} does not match its question", sample.id)));
            }
            if (p.k - k).abs() < 1e-15 {
                Ok(Selection::Indices(p.selected.clone()))
            } else {
                Ok(Selection::Indices(top_k_sensitive(&p.lambda, k)))
            }
        }
        PermuMode::Subject => {
            let idx = sample.subject_positions();
            if idx.is_empty() {
                return Err(invalid(format!("sample {} has no subject span", sample.id)));
            }
            Ok(Selection::Indices(idx))
        }
        PermuMode::Discrete => {
            let mut rng = derived(seed, &[0xd15c]);
            Ok(Selection::Rewritten(discrete_rewrite(sample, vocab, &mut rng)?))
        }
    }
}

/// Population standard deviation of every token-embedding entry.
pub fn embedding_std(params: &ModelParams) -> f64 {
    params.token_embeddings().std()
}

/// Token embeddings of `[BOS] q a` with Gaussian noise of per-dimension std
/// `p * embedding_std` added at the selected question indices.
pub fn permu_perturb(params: &ModelParams, question: &[u32], answer: &[u32], indices: &[usize], p: f64, seed: u64) -> Result<Tensor> {
    if !(p >= 0.0 && p.is_finite()) {
        return Err(invalid(format!("perturbation ratio must be non-negative, got {p}")));
    }
    if let Some(&i) = indices.iter().find(|&&i| i >= question.len()) {
        return Err(invalid(format!("index {i} outside question of length {}", question.len())));
    }
    let packed = pack_qa(&[(question, answer)])?;
    let mut emb = input_embeddings(params, &packed.seqs[0])?;
    let std = p * embedding_std(params);
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
        let mut rng = derived(seed, &[0x401e]);
        for &i in indices {
            for x in emb.row_mut(i + 1) {
                *x += normal.sample(&mut rng);
            }
        }
    }
    Ok(emb)
}

/// Per answer position: the clamped and renormalised target, plus the raw
/// subtraction `p(.|x') - C p(.|x)` before clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistributionSet {
    pub targets: Vec<ProbDist>,
    pub raw: Vec<Vec<f64>>,
    pub clean: Vec<ProbDist>,
    pub corrupted: Vec<ProbDist>,
}

impl TargetDistributionSet {
    /// `[|a|, vocab]`.
    pub fn to_tensor(&self) -> Tensor {
        let v = self.targets[0].len();
        let data = self.targets.iter().flat_map(|p| p.probs().iter().copied()).collect();
        Tensor::matrix(self.targets.len(), v, data).expect("rectangular targets")
    }
}

fn softmax_rows(t: &Tensor) -> Vec<ProbDist> {
    (0..t.rows()).map(|r| ProbDist::from_logits(t.row(r))).collect()
}

/// Teacher-forced clean and corrupted runs of `params` and their difference.
pub fn permu_targets(params: &ModelParams, question: &[u32], answer: &[u32], corruption: &Corruption, c: f64) -> Result<TargetDistributionSet> {
    if !(c >= 0.0 && c.is_finite()) {
        return Err(invalid(format!("tuning coefficient must be non-negative, got {c}")));
    }
    let clean = softmax_rows(&answer_logits(params, question, answer, None)?);
    let corrupted = match corruption {
        Corruption::Embeddings(e) => answer_logits(params, question, answer, Some(e))?,
        Corruption::Rewritten(q) => answer_logits(params, q, answer, None)?,
    };
    let corrupted = softmax_rows(&corrupted);
    let mut raw = Vec::with_capacity(clean.len());
    let mut targets = Vec::with_capacity(clean.len());
    for (pc, pk) in clean.iter().zip(&corrupted) {
        let r: Vec<f64> = pk.probs().iter().zip(pc.probs()).map(|(k, c0)| k - c * c0).collect();
        targets.push(if c == 0.0 {
            pk.clone()
        } else {
            ProbDist::clamp_renormalize(&r, TARGET_FLOOR)
        });
        raw.push(r);
    }
    Ok(TargetDistributionSet {
        targets,
        raw,
        clean,
        corrupted,
    })
}
