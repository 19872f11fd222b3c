//! Unlearning and retention objectives.
//!
//! Each objective has a graph form (`*_term`) that adds its contribution,
//! multiplied by a caller-supplied `scale`, to a graph whose parameters are
//! bound by the caller; chunks of one batch are then summed. The value forms
//! (`*_loss`) evaluate a whole batch at fixed parameters.

use std::sync::Arc;

use crate::autograd::{softmax_into, Graph, Var};
use crate::error::{invalid, Result};
use crate::lm::{answer_pass, bind, forward_hidden, frozen_answer_logits, pack_qa, Bound, ModelParams, SeqSpec};
use crate::tensor::Tensor;

pub type Pair<'a> = (&'a [u32], &'a [u32]);

fn nll_terms(g: &mut Graph, params: &ModelParams, bound: &Bound, pairs: &[Pair]) -> Result<Vec<Var>> {
    let pass = answer_pass(g, params, bound, pairs, None)?;
    (0..pass.len()).map(|i| pass.nll(g, i)).collect()
}

/// `scale * sum_i sequence_loss_i`: the retention (GDR) and IDK (DPO) objective.
pub fn nll_term(g: &mut Graph, params: &ModelParams, bound: &Bound, pairs: &[Pair], scale: f64) -> Result<Var> {
    let terms = nll_terms(g, params, bound, pairs)?;
    let s = g.add_all(&terms)?;
    Ok(g.scale(s, scale))
}

/// Gradient ascent: `-scale * sum_i sequence_loss_i`.
pub fn ga_term(g: &mut Graph, params: &ModelParams, bound: &Bound, pairs: &[Pair], scale: f64) -> Result<Var> {
    nll_term(g, params, bound, pairs, -scale)
}

/// Summed answer negative log-likelihood per pair under a frozen model.
pub fn summed_nll(params: &ModelParams, pairs: &[Pair]) -> Result<Vec<f64>> {
    let logits = frozen_answer_logits(params, pairs)?;
    let mut buf = vec![0.0; logits.cols()];
    let mut row = 0;
    let mut out = Vec::with_capacity(pairs.len());
    for (_, a) in pairs {
        let mut s = 0.0;
        for &tok in a.iter() {
            crate::autograd::log_softmax_into(logits.row(row), &mut buf);
            s -= buf[tok as usize];
            row += 1;
        }
        out.push(s);
    }
    Ok(out)
}

/// Negative preference optimisation:
/// `-(2/beta) * scale * sum_i log sigmoid(-beta * (log f(x_i) - log f_ref(x_i)))`
/// with `log f` the summed answer log-likelihood and `ref_nll` the reference
/// model's summed negative log-likelihoods.
pub fn npo_term(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    pairs: &[Pair],
    ref_nll: &[f64],
    beta: f64,
    scale: f64,
) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(invalid(format!("NPO beta must be positive, got {beta}")));
    }
    if ref_nll.len() != pairs.len() {
        return Err(invalid("one reference likelihood per pair required"));
    }
    let means = nll_terms(g, params, bound, pairs)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for (i, m) in means.into_iter().enumerate() {
        let summed = g.scale(m, pairs[i].1.len() as f64);
        let z = g.offset(summed, -ref_nll[i]);
        let z = g.scale(z, beta);
        terms.push(g.log_sigmoid(z));
    }
    let s = g.add_all(&terms)?;
    Ok(g.scale(s, -2.0 / beta * scale))
}

/// Reference distributions at the answer rows of `pairs`, plus their summed entropy.
pub fn reference_probs(reference: &ModelParams, pairs: &[Pair]) -> Result<(Arc<Tensor>, f64)> {
    let logits = frozen_answer_logits(reference, pairs)?;
    let v = logits.cols();
    let mut data = vec![0.0; logits.numel()];
    let mut entropy = 0.0;
    for r in 0..logits.rows() {
        let p = &mut data[r * v..(r + 1) * v];
        softmax_into(logits.row(r), p);
        entropy -= p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>();
    }
    Ok((Arc::new(Tensor::matrix(logits.rows(), v, data)?), entropy))
}

/// `scale * sum_rows KL(p_ref || p_theta)` over every answer row of `pairs`.
/// `ref_probs`/`ref_entropy` come from [`reference_probs`] on the same pairs.
pub fn klr_term(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    pairs: &[Pair],
    ref_probs: Arc<Tensor>,
    ref_entropy: f64,
    scale: f64,
) -> Result<Var> {
    let pass = answer_pass(g, params, bound, pairs, None)?;
    let rows: Vec<usize> = (0..ref_probs.rows()).collect();
    let ce = g.soft_cross_entropy(pass.logits, &rows, ref_probs)?;
    let kl = g.offset(ce, -ref_entropy);
    Ok(g.scale(kl, scale))
}

/// `scale * sum ||h - target||^2` over the residual stream after `layer`
/// blocks (1-based) at every position of the packed `[BOS] q a` sequences.
/// `target` is `[rows, d_model]` or a single `[1, d_model]` row broadcast to all.
pub fn activation_term(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    pairs: &[Pair],
    layer: usize,
    target: &Tensor,
    scale: f64,
) -> Result<Var> {
    let n_layers = params.config().n_layers;
    if layer == 0 || layer > n_layers {
        return Err(invalid(format!("activation layer {layer} outside 1..={n_layers}")));
    }
    let packed = pack_qa(pairs)?;
    let seqs: Vec<SeqSpec> = packed.seqs.iter().map(|s| SeqSpec::plain(s)).collect();
    let h = forward_hidden(g, params, bound, &seqs)?.hidden[layer - 1];
    let rows = g.value(h).rows();
    let d = params.config().d_model;
    let full = if target.rows() == rows {
        target.clone()
    } else if target.rows() == 1 {
        Tensor::matrix(rows, d, target.row(0).repeat(rows))?
    } else {
        return Err(invalid(format!("activation target has {} rows, expected 1 or {rows}", target.rows())));
    };
    let t = g.constant(full);
    let diff = g.sub(h, t)?;
    let sq = g.square(diff);
    let s = g.sum(sq);
    Ok(g.scale(s, scale))
}

/// Residual stream after `layer` blocks of a frozen model for packed pairs.
pub fn frozen_activations(params: &ModelParams, pairs: &[Pair], layer: usize) -> Result<Tensor> {
    let n_layers = params.config().n_layers;
    if layer == 0 || layer > n_layers {
        return Err(invalid(format!("activation layer {layer} outside 1..={n_layers}")));
    }
    let packed = pack_qa(pairs)?;
    let seqs: Vec<SeqSpec> = packed.seqs.iter().map(|s| SeqSpec::plain(s)).collect();
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let h = forward_hidden(&mut g, params, &bound, &seqs)?.hidden[layer - 1];
    Ok(g.value(h).clone())
}

/// Number of packed rows (`1 + |q| + |a|` per pair).
pub fn packed_rows(pairs: &[Pair]) -> usize {
    pairs.iter().map(|(q, a)| 1 + q.len() + a.len()).sum()
}

/// Step-wise distribution matching:
/// `scale * sum_i sum_t sum_v p_i,t(v) * -log q_theta(v | x_i, a_<t)`.
/// `targets[i]` is `[|a_i|, vocab]`.
pub fn permu_term(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    pairs: &[Pair],
    targets: &[Tensor],
    scale: f64,
) -> Result<Var> {
    if targets.len() != pairs.len() {
        return Err(invalid("one target set per pair required"));
    }
    let pass = answer_pass(g, params, bound, pairs, None)?;
    let v = params.config().vocab_size;
    let mut data = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        if t.shape() != [pass.spans[i].1, v] {
            return Err(invalid(format!("target set {i} has shape {:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    let rows: Vec<usize> = (0..data.len() / v).collect();
    let all = Arc::new(Tensor::matrix(rows.len(), v, data)?);
    let ce = g.soft_cross_entropy(pass.logits, &rows, all)?;
    Ok(g.scale(ce, scale))
}

fn eval_term<F>(params: &ModelParams, f: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let v = f(&mut g, &bound)?;
    Ok(g.value(v).item())
}

fn batch_scale(pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("empty batch"));
    }
    Ok(1.0 / pairs.len() as f64)
}

/// `-mean_i sequence_loss_i`.
pub fn ga_loss(params: &ModelParams, forget: &[Pair]) -> Result<f64> {
    let s = batch_scale(forget)?;
    eval_term(params, |g, b| ga_term(g, params, b, forget, s))
}

/// Mean sequence loss of each question paired with its substituted refusal.
pub fn dpo_loss(params: &ModelParams, idk_pairs: &[Pair]) -> Result<f64> {
    let s = batch_scale(idk_pairs)?;
    eval_term(params, |g, b| nll_term(g, params, b, idk_pairs, s))
}

pub fn gdr_loss(params: &ModelParams, retain: &[Pair]) -> Result<f64> {
    let s = batch_scale(retain)?;
    eval_term(params, |g, b| nll_term(g, params, b, retain, s))
}

pub fn npo_loss(params: &ModelParams, reference: &ModelParams, forget: &[Pair], beta: f64) -> Result<f64> {
    let s = batch_scale(forget)?;
    let r = summed_nll(reference, forget)?;
    eval_term(params, |g, b| npo_term(g, params, b, forget, &r, beta, s))
}

/// Mean over retain answer positions of `KL(p_ref || p_theta)`.
pub fn klr_loss(params: &ModelParams, reference: &ModelParams, retain: &[Pair]) -> Result<f64> {
    batch_scale(retain)?;
    let (p, h) = reference_probs(reference, retain)?;
    let s = 1.0 / p.rows() as f64;
    eval_term(params, |g, b| klr_term(g, params, b, retain, p, h, s))
}

/// Steering direction for RMU: a seeded random unit vector times `scale`.
pub fn steering_vector(d: usize, scale: f64, seed: u64) -> Tensor {
    use rand::Rng as _;
    let mut rng = crate::rng::derived(seed, &[0x57ee]);
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    v.iter_mut().for_each(|x| *x *= scale / n);
    Tensor::matrix(1, d, v).expect("row vector")
}

/// RMU: `MSE(h_forget, u) + alpha * MSE(h_retain, h_ref_retain)` at `layer`.
pub fn rmu_loss(
    params: &ModelParams,
    reference: &ModelParams,
    forget: &[Pair],
    retain: &[Pair],
    steer: &Tensor,
    alpha: f64,
    layer: usize,
) -> Result<f64> {
    batch_scale(forget)?;
    batch_scale(retain)?;
    let d = params.config().d_model as f64;
    let h_ref = frozen_activations(reference, retain, layer)?;
    let sf = 1.0 / (packed_rows(forget) as f64 * d);
    let sr = alpha / (packed_rows(retain) as f64 * d);
    let f = eval_term(params, |g, b| activation_term(g, params, b, forget, layer, steer, sf))?;
    let r = eval_term(params, |g, b| activation_term(g, params, b, retain, layer, &h_ref, sr))?;
    Ok(f + r)
}

/// `mean_i sum_t CE(target_i,t, q_theta)`.
pub fn permu_loss(params: &ModelParams, forget: &[Pair], targets: &[Tensor]) -> Result<f64> {
    let s = batch_scale(forget)?;
    eval_term(params, |g, b| permu_term(g, params, b, forget, targets, s))
}
