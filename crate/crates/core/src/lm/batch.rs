//! Batched teacher-forced passes that only unembed the answer rows.

use super::model::{bind, forward_hidden, pack_qa, Bound, HiddenGraph, SeqSpec};
use super::params::ModelParams;
use crate::autograd::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// One packed pass over `[BOS] q a` sequences.
#[derive(Debug, Clone)]
pub struct AnswerPass {
    pub hidden: HiddenGraph,
    /// Logits of every answer row of every sample, concatenated, `[R, vocab]`.
    pub logits: Var,
    /// `(first row in logits, |a|)` per sample.
    pub spans: Vec<(usize, usize)>,
    /// Packed row of every answer position, per sample.
    pub rows: Vec<Vec<usize>>,
    answers: Vec<Vec<u32>>,
}

impl AnswerPass {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Mean answer cross-entropy of sample `i` (its `sequence_loss`).
    pub fn nll(&self, g: &mut Graph, i: usize) -> Result<Var> {
        let (start, _) = self.spans[i];
        let targets: Vec<(usize, usize)> = self.answers[i]
            .iter()
            .enumerate()
            .map(|(t, &tok)| (start + t, tok as usize))
            .collect();
        g.cross_entropy(self.logits, &targets)
    }

    /// Logit rows belonging to sample `i`.
    pub fn logit_rows(&self, i: usize) -> Vec<usize> {
        let (start, n) = self.spans[i];
        (start..start + n).collect()
    }
}

/// Runs the model on question/answer pairs. `inject`, when given, holds one
/// optional embedding override per pair covering the whole `[BOS] q a` row set.
pub fn answer_pass(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    pairs: &[(&[u32], &[u32])],
    inject: Option<&[Option<Var>]>,
) -> Result<AnswerPass> {
    if pairs.is_empty() {
        return Err(invalid("empty batch"));
    }
    if let Some(inj) = inject {
        if inj.len() != pairs.len() {
            return Err(invalid(format!("{} overrides for {} pairs", inj.len(), pairs.len())));
        }
    }
    let packed = pack_qa(pairs)?;
    let seqs: Vec<SeqSpec> = packed
        .seqs
        .iter()
        .enumerate()
        .map(|(i, s)| SeqSpec {
            tokens: s,
            inject: inject.and_then(|v| v[i]),
        })
        .collect();
    let hidden = forward_hidden(g, params, bound, &seqs)?;
    let rows: Vec<Vec<usize>> = packed
        .answer_targets
        .iter()
        .map(|t| t.iter().map(|&(r, _)| r).collect())
        .collect();
    let flat: Vec<usize> = rows.iter().flatten().copied().collect();
    let logits = hidden.logits_at(g, params, bound, &flat)?;
    let mut spans = Vec::with_capacity(rows.len());
    let mut start = 0;
    for r in &rows {
        spans.push((start, r.len()));
        start += r.len();
    }
    Ok(AnswerPass {
        hidden,
        logits,
        spans,
        rows,
        answers: pairs.iter().map(|(_, a)| a.to_vec()).collect(),
    })
}

/// Answer-row logits of a frozen model, as a constant tensor.
pub fn frozen_answer_logits(params: &ModelParams, pairs: &[(&[u32], &[u32])]) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let pass = answer_pass(&mut g, params, &bound, pairs, None)?;
    Ok(g.value(pass.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{sequence_loss, ModelConfig};

    #[test]
    fn per_sample_nll_matches_sequence_loss() {
        let cfg = ModelConfig {
            vocab_size: 14,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 12,
            d_ff: 16,
            ..Default::default()
        };
        let p = ModelParams::init(cfg, 5).unwrap();
        let pairs: Vec<(&[u32], &[u32])> = vec![(&[4, 5, 6], &[7, 2]), (&[8], &[9, 10, 11, 2])];
        let mut g = Graph::new();
        let b = bind(&mut g, &p, false);
        let pass = answer_pass(&mut g, &p, &b, &pairs, None).unwrap();
        assert_eq!(pass.spans, vec![(0, 2), (2, 4)]);
        for (i, (q, a)) in pairs.iter().enumerate() {
            let v = pass.nll(&mut g, i).unwrap();
            let want = sequence_loss(&p, q, a).unwrap();
            assert!((g.value(v).item() - want).abs() < 1e-12);
        }
    }
}
