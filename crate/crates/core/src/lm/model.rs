use std::sync::Arc;

use super::config::ModelConfig;
use super::params::{block, block_index, ModelParams, POS_EMB, TOK_EMB};
use super::provider::{ProbDist, Provider, Query};
use super::tokens;
use crate::autograd::{log_softmax_into, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Parameters registered as leaves of one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Bound {
    let vars = (0..params.len())
        .map(|i| g.leaf_shared(params.shared(i), trainable))
        .collect();
    Bound { vars }
}

/// One input sequence; `inject` replaces its token embeddings (`[len, d_model]`).
#[derive(Debug, Clone, Copy)]
pub struct SeqSpec<'a> {
    pub tokens: &'a [u32],
    pub inject: Option<Var>,
}

impl<'a> SeqSpec<'a> {
    pub fn plain(tokens: &'a [u32]) -> Self {
        Self { tokens, inject: None }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardGraph {
    /// `[N, vocab]` over all packed rows.
    pub logits: Var,
    /// Residual stream after each block, `[N, d_model]`.
    pub hidden: Vec<Var>,
    /// `(start_row, len)` for each input sequence.
    pub segments: Vec<(usize, usize)>,
}

/// Residual streams of a packed forward pass without the unembedding.
#[derive(Debug, Clone)]
pub struct HiddenGraph {
    pub hidden: Vec<Var>,
    pub segments: Vec<(usize, usize)>,
}

impl HiddenGraph {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("at least one layer")
    }

    /// Logits of the selected packed rows only, `[rows.len(), vocab]`.
    pub fn logits_at(&self, g: &mut Graph, params: &ModelParams, bound: &Bound, rows: &[usize]) -> Result<Var> {
        let h = g.select_rows(self.last(), rows)?;
        lens_logits(g, params, bound, h)
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(invalid("empty token sequence"));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::ContextOverflow {
            len: tokens.len(),
            context: cfg.context_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Final normalisation followed by the unembedding, applied to any residual
/// stream (the last block's for ordinary logits, earlier ones for the lens).
pub fn lens_logits(g: &mut Graph, params: &ModelParams, bound: &Bound, hidden: Var) -> Result<Var> {
    let cfg = params.config();
    let nf = block_index(cfg.n_layers, 0);
    let h = g.layer_norm(hidden, bound.vars[nf], bound.vars[nf + 1], cfg.ln_eps)?;
    let unembed = if cfg.tie_embeddings {
        bound.vars[TOK_EMB]
    } else {
        bound.vars[nf + 2]
    };
    g.matmul_nt(h, unembed)
}

/// Packed forward pass over several sequences in one graph.
pub fn forward_graph(g: &mut Graph, params: &ModelParams, bound: &Bound, seqs: &[SeqSpec]) -> Result<ForwardGraph> {
    let h = forward_hidden(g, params, bound, seqs)?;
    let logits = lens_logits(g, params, bound, h.last())?;
    Ok(ForwardGraph {
        logits,
        hidden: h.hidden,
        segments: h.segments,
    })
}

pub fn forward_hidden(g: &mut Graph, params: &ModelParams, bound: &Bound, seqs: &[SeqSpec]) -> Result<HiddenGraph> {
    let cfg = params.config();
    if seqs.is_empty() {
        return Err(invalid("forward needs at least one sequence"));
    }
    let mut segments = Vec::with_capacity(seqs.len());
    let mut positions = Vec::new();
    let mut start = 0;
    for s in seqs {
        check_tokens(cfg, s.tokens)?;
        if let Some(v) = s.inject {
            let shape = g.value(v).shape();
            if shape != [s.tokens.len(), cfg.d_model] {
                return Err(Error::Shape {
                    op: "embedding override",
                    left: vec![s.tokens.len(), cfg.d_model],
                    right: shape.to_vec(),
                });
            }
        }
        segments.push((start, s.tokens.len()));
        positions.extend(0..s.tokens.len());
        start += s.tokens.len();
    }

    let tok = if seqs.iter().all(|s| s.inject.is_none()) {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.tokens.iter().map(|&t| t as usize)).collect();
        g.gather(bound.vars[TOK_EMB], &ids)?
    } else {
        let mut parts = Vec::with_capacity(seqs.len());
        for s in seqs {
            let part = match s.inject {
                Some(v) => v,
                None => {
                    let ids: Vec<usize> = s.tokens.iter().map(|&t| t as usize).collect();
                    g.gather(bound.vars[TOK_EMB], &ids)?
                }
            };
            parts.push(part);
        }
        g.concat_rows(&parts)?
    };
    let pos = g.gather(bound.vars[POS_EMB], &positions)?;
    let mut x = g.add(tok, pos)?;

    let mut hidden = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |part: usize| bound.vars[block_index(l, part)];
        let h = g.layer_norm(x, p(block::LN1_G), p(block::LN1_B), cfg.ln_eps)?;
        let qkv = g.matmul(h, p(block::W_QKV))?;
        let qkv = g.add_bias(qkv, p(block::B_QKV))?;
        let att = g.causal_attention(qkv, &segments, cfg.n_heads)?;
        let att = g.matmul(att, p(block::W_ATTN_OUT))?;
        let att = g.add_bias(att, p(block::B_ATTN_OUT))?;
        x = g.add(x, att)?;
        let h = g.layer_norm(x, p(block::LN2_G), p(block::LN2_B), cfg.ln_eps)?;
        let m = g.matmul(h, p(block::W_MLP_IN))?;
        let m = g.add_bias(m, p(block::B_MLP_IN))?;
        let m = g.gelu(m);
        let m = g.matmul(m, p(block::W_MLP_OUT))?;
        let m = g.add_bias(m, p(block::B_MLP_OUT))?;
        x = g.add(x, m)?;
        hidden.push(x);
    }
    Ok(HiddenGraph { hidden, segments })
}

/// Concrete outputs of a single-sequence forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[len, vocab]`.
    pub logits: Tensor,
    /// Per layer, `[len, d_model]`.
    pub hidden: Vec<Tensor>,
}

impl ForwardOutput {
    pub fn logits_at(&self, pos: usize) -> super::LogitVector {
        super::LogitVector::new(self.logits.row(pos).to_vec()).expect("finite logits")
    }
}

pub fn forward(params: &ModelParams, tokens: &[u32], inject: Option<&Tensor>) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let inject = inject.map(|t| g.constant(t.clone()));
    let f = forward_graph(&mut g, params, &bound, &[SeqSpec { tokens, inject }])?;
    let logits = g.value(f.logits).clone();
    if !logits.is_finite() {
        return Err(Error::NonFinite("forward produced non-finite logits".into()));
    }
    Ok(ForwardOutput {
        logits,
        hidden: f.hidden.iter().map(|&h| g.value(h).clone()).collect(),
    })
}

/// `[BOS] + question`.
pub fn prompt(question: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(question.len() + 1);
    v.push(tokens::BOS);
    v.extend_from_slice(question);
    v
}

/// Question/answer pairs packed into sequences `[BOS] q a` with the
/// `(row, token)` targets of every answer position.
#[derive(Debug, Clone)]
pub struct PackedQa {
    pub seqs: Vec<Vec<u32>>,
    pub answer_targets: Vec<Vec<(usize, usize)>>,
}

pub fn pack_qa(pairs: &[(&[u32], &[u32])]) -> Result<PackedQa> {
    let mut seqs = Vec::with_capacity(pairs.len());
    let mut answer_targets = Vec::with_capacity(pairs.len());
    let mut start = 0;
    for (q, a) in pairs {
        if a.is_empty() {
            return Err(invalid("empty answer"));
        }
        let mut s = prompt(q);
        let first = start + s.len() - 1;
        s.extend_from_slice(a);
        answer_targets.push(a.iter().enumerate().map(|(t, &tok)| (first + t, tok as usize)).collect());
        start += s.len();
        seqs.push(s);
    }
    Ok(PackedQa { seqs, answer_targets })
}

/// Mean cross-entropy over the answer positions, `-(1/|a|) sum log p(a_t | q, a_<t)`.
pub fn sequence_loss(params: &ModelParams, question: &[u32], answer: &[u32]) -> Result<f64> {
    let packed = pack_qa(&[(question, answer)])?;
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let f = forward_graph(&mut g, params, &bound, &[SeqSpec::plain(&packed.seqs[0])])?;
    let loss = g.cross_entropy(f.logits, &packed.answer_targets[0])?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("sequence loss {v}")));
    }
    Ok(v)
}

/// Teacher-forced logits at the answer positions, `[|a|, vocab]`: row `t`
/// predicts `a_t` from `[BOS] q a_<t`.
pub fn answer_logits(params: &ModelParams, question: &[u32], answer: &[u32], inject: Option<&Tensor>) -> Result<Tensor> {
    let packed = pack_qa(&[(question, answer)])?;
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let inject = inject.map(|t| g.constant(t.clone()));
    let h = forward_hidden(&mut g, params, &bound, &[SeqSpec { tokens: &packed.seqs[0], inject }])?;
    let rows: Vec<usize> = packed.answer_targets[0].iter().map(|&(r, _)| r).collect();
    let logits = h.logits_at(&mut g, params, &bound, &rows)?;
    let t = g.value(logits).clone();
    if !t.is_finite() {
        return Err(Error::NonFinite("forward produced non-finite logits".into()));
    }
    Ok(t)
}

/// `P(a|q)^(1/|a|) = exp(-sequence_loss)`.
pub fn conditional_prob(params: &ModelParams, question: &[u32], answer: &[u32]) -> Result<f64> {
    Ok((-sequence_loss(params, question, answer)?).exp())
}

/// Multiple-choice probability of the correct choice among length-normalised
/// choice probabilities. Duplicate choices are allowed and each counts once
/// in the denominator.
pub fn mc_probability(params: &ModelParams, question: &[u32], choices: &[Vec<u32>], correct: usize) -> Result<f64> {
    if choices.len() < 2 {
        return Err(invalid("multiple choice needs at least two choices"));
    }
    if correct >= choices.len() {
        return Err(invalid(format!("correct index {correct} out of range")));
    }
    let ps = choices
        .iter()
        .map(|c| conditional_prob(params, question, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ps[correct] / ps.iter().sum::<f64>())
}

fn last_row_lens(params: &ModelParams, prefix: &[u32], inject: Option<&Tensor>, layer: Option<usize>) -> Result<ProbDist> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let inject = inject.map(|t| g.constant(t.clone()));
    let f = forward_hidden(&mut g, params, &bound, &[SeqSpec { tokens: prefix, inject }])?;
    let h = match layer {
        None => f.last(),
        Some(l) => f.hidden[l],
    };
    let h = g.select_rows(h, &[prefix.len() - 1])?;
    let logits = lens_logits(&mut g, params, &bound, h)?;
    Ok(ProbDist::from_logits(g.value(logits).row(0)))
}

/// Softmax of the final-position logits.
pub fn next_token_distribution(params: &ModelParams, prefix: &[u32], inject: Option<&Tensor>) -> Result<ProbDist> {
    last_row_lens(params, prefix, inject, None)
}

/// Next-token distribution read from the residual stream after `layer`.
pub fn logit_lens(params: &ModelParams, prefix: &[u32], layer: usize) -> Result<ProbDist> {
    let n = params.config().n_layers;
    if layer >= n {
        return Err(invalid(format!("layer {layer} out of range for {n} layers")));
    }
    last_row_lens(params, prefix, None, Some(layer))
}

/// Greedy decoding from a raw prefix; stops at end-of-answer, after `max_new`
/// tokens, or when the context is full. The end token is not returned.
pub fn generate(params: &ModelParams, prefix: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Err(invalid("max_new must be at least 1"));
    }
    let mut seq = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new && seq.len() < params.config().context_len {
        let next = next_token_distribution(params, &seq, None)?.argmax();
        if next == tokens::EOA {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

impl Provider for ModelParams {
    fn vocab_size(&self) -> usize {
        self.config().vocab_size
    }

    fn context_len(&self) -> usize {
        self.config().context_len
    }

    fn prompt_len(&self, query: &Query) -> usize {
        query.question.len() + 1
    }

    fn answer_log_probs(&self, query: &Query, answer: &[u32]) -> Result<Vec<f64>> {
        let logits = answer_logits(self, query.question, answer, None)?;
        let mut buf = vec![0.0; logits.cols()];
        Ok(answer
            .iter()
            .enumerate()
            .map(|(t, &tok)| {
                log_softmax_into(logits.row(t), &mut buf);
                buf[tok as usize]
            })
            .collect())
    }

    fn next_distribution(&self, query: &Query, generated: &[u32]) -> Result<ProbDist> {
        let mut seq = prompt(query.question);
        seq.extend_from_slice(generated);
        next_token_distribution(self, &seq, None)
    }

    fn conditional_prob(&self, query: &Query, answer: &[u32]) -> Result<f64> {
        conditional_prob(self, query.question, answer)
    }
}

/// Shared handle so providers can own parameters cheaply.
impl Provider for Arc<ModelParams> {
    fn vocab_size(&self) -> usize {
        self.as_ref().vocab_size()
    }
    fn context_len(&self) -> usize {
        self.as_ref().context_len()
    }
    fn prompt_len(&self, query: &Query) -> usize {
        self.as_ref().prompt_len(query)
    }
    fn answer_log_probs(&self, query: &Query, answer: &[u32]) -> Result<Vec<f64>> {
        self.as_ref().answer_log_probs(query, answer)
    }
    fn next_distribution(&self, query: &Query, generated: &[u32]) -> Result<ProbDist> {
        self.as_ref().next_distribution(query, generated)
    }
    fn conditional_prob(&self, query: &Query, answer: &[u32]) -> Result<f64> {
        self.as_ref().conditional_prob(query, answer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    pub(crate) fn tiny(vocab: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            context_len: 12,
            d_ff: 16,
            tie_embeddings: true,
            ln_eps: 1e-5,
        }
    }

    /// Larger init so that outputs depend visibly on the inputs.
    fn lively(vocab: usize, seed: u64) -> ModelParams {
        let p = ModelParams::init(tiny(vocab), seed).unwrap();
        let zero = ModelParams::init(tiny(vocab), seed + 1).unwrap();
        super::super::param_arith(4.0, &p, 0.0, &zero).unwrap()
    }

    fn zeroed(vocab: usize) -> ModelParams {
        let p = ModelParams::init(tiny(vocab), 0).unwrap();
        super::super::param_arith(0.0, &p, 0.0, &p).unwrap()
    }

    #[test]
    fn deterministic_logits() {
        let p = lively(16, 1);
        let a = forward(&p, &[1, 5, 6, 7], None).unwrap();
        let b = forward(&p, &[1, 5, 6, 7], None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn causal_masking_randomised() {
        let p = lively(16, 2);
        let mut rng = seeded(9);
        for _ in 0..50 {
            let len = rng.random_range(3..=12);
            let t = rng.random_range(0..len - 1);
            let a: Vec<u32> = (0..len).map(|_| rng.random_range(0..16)).collect();
            let mut b = a.clone();
            for x in b.iter_mut().skip(t + 1) {
                *x = rng.random_range(0..16);
            }
            let la = forward(&p, &a, None).unwrap();
            let lb = forward(&p, &b, None).unwrap();
            for pos in 0..=t {
                assert_eq!(la.logits.row(pos), lb.logits.row(pos), "position {pos}");
            }
        }
    }

    #[test]
    fn identity_injection() {
        let p = lively(16, 3);
        let toks = [1u32, 4, 9, 2];
        let emb = p.token_embeddings();
        let d = p.config().d_model;
        let rows: Vec<f64> = toks.iter().flat_map(|&t| emb.row(t as usize).to_vec()).collect();
        let inj = Tensor::matrix(toks.len(), d, rows).unwrap();
        let a = forward(&p, &toks, None).unwrap();
        let b = forward(&p, &toks, Some(&inj)).unwrap();
        assert_eq!(a.logits, b.logits);
        let na = next_token_distribution(&p, &toks, None).unwrap();
        let nb = next_token_distribution(&p, &toks, Some(&inj)).unwrap();
        assert_eq!(na, nb);
    }

    #[test]
    fn bad_inputs_rejected() {
        let p = lively(16, 3);
        assert!(matches!(forward(&p, &[1, 16], None), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(forward(&p, &[1; 13], None), Err(Error::ContextOverflow { .. })));
        let wrong = Tensor::zeros(&[2, 8]);
        assert!(forward(&p, &[1, 2, 3], Some(&wrong)).is_err());
        assert!(sequence_loss(&p, &[4], &[]).is_err());
        assert!(logit_lens(&p, &[1, 4], 3).is_err());
    }

    #[test]
    fn uniform_model_values() {
        let p = zeroed(16);
        let loss = sequence_loss(&p, &[4, 5], &[6, 7, 2]).unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-12);
        let cp = conditional_prob(&p, &[4, 5], &[6, 7, 2]).unwrap();
        assert!((cp - 1.0 / 16.0).abs() < 1e-12);
        let choices = vec![vec![6], vec![7, 8], vec![9], vec![10, 11, 12]];
        let mc = mc_probability(&p, &[4], &choices, 2).unwrap();
        assert!((mc - 0.25).abs() < 1e-12);
        let d = next_token_distribution(&p, &[1, 4], None).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn conditional_prob_is_exp_neg_loss() {
        let p = lively(16, 4);
        let l = sequence_loss(&p, &[4, 5, 9], &[6, 2]).unwrap();
        let c = conditional_prob(&p, &[4, 5, 9], &[6, 2]).unwrap();
        assert!((c - (-l).exp()).abs() < 1e-12);
        let q = Query::new(&[4, 5, 9]);
        let via_logprobs = Provider::answer_log_probs(&p, &q, &[6, 2]).unwrap();
        let m = via_logprobs.iter().sum::<f64>() / 2.0;
        assert!((m.exp() - c).abs() < 1e-12);
    }

    #[test]
    fn mc_is_permutation_invariant() {
        let p = lively(16, 5);
        let choices = vec![vec![6, 7], vec![8], vec![9, 10, 11]];
        let a = mc_probability(&p, &[4, 5], &choices, 1).unwrap();
        let perm = vec![choices[2].clone(), choices[1].clone(), choices[0].clone()];
        let b = mc_probability(&p, &[4, 5], &perm, 1).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0 && a < 1.0);
        assert!(mc_probability(&p, &[4], &choices[..1], 0).is_err());
    }

    #[test]
    fn final_layer_lens_matches_next_token() {
        let p = lively(16, 6);
        let prefix = [1u32, 7, 3, 3];
        let d = next_token_distribution(&p, &prefix, None).unwrap();
        let l = logit_lens(&p, &prefix, 2).unwrap();
        assert_eq!(d, l);
        for layer in 0..3 {
            let l = logit_lens(&p, &prefix, layer).unwrap();
            assert!((l.probs().iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn generation_is_bounded_and_deterministic() {
        let p = lively(16, 7);
        let a = generate(&p, &[1, 4, 5], 5).unwrap();
        let b = generate(&p, &[1, 4, 5], 5).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 5);
        let long: Vec<u32> = vec![4; 11];
        assert!(generate(&p, &long, 5).unwrap().len() <= 1);
        assert!(generate(&p, &[1], 0).is_err());
    }
}
