//! Per-token model sensitivity from input-embedding gradients.
//!
//! For question token `i` let `g_i` be the gradient of the answer
//! cross-entropy with respect to the embedding fed at that position. The
//! matrix `H_i = g_i^T g_i` has rank one, so its largest eigenvalue is
//! `|g_i|^2`, which is what [`msm`] reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::factworld::EncodedSample;
use crate::lm::{bind, forward_graph, pack_qa, ModelParams, SeqSpec};
use crate::rng::{derived, str_tag, Rng};
use crate::tensor::Tensor;

/// Token-embedding rows for a packed sequence (position embeddings are added inside the model).
pub fn input_embeddings(params: &ModelParams, seq: &[u32]) -> Result<Tensor> {
    let emb = params.token_embeddings();
    let d = params.config().d_model;
    let mut data = Vec::with_capacity(seq.len() * d);
    for &t in seq {
        if t as usize >= emb.rows() {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: emb.rows(),
            });
        }
        data.extend_from_slice(emb.row(t as usize));
    }
    Tensor::matrix(seq.len(), d, data)
}

/// Answer loss with the given input embeddings for the packed sequence.
pub fn loss_with_embeddings(params: &ModelParams, question: &[u32], answer: &[u32], emb: &Tensor) -> Result<f64> {
    let packed = pack_qa(&[(question, answer)])?;
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let x = g.constant(emb.clone());
    let f = forward_graph(
        &mut g,
        params,
        &bound,
        &[SeqSpec {
            tokens: &packed.seqs[0],
            inject: Some(x),
        }],
    )?;
    let loss = g.cross_entropy(f.logits, &packed.answer_targets[0])?;
    Ok(g.value(loss).item())
}

/// Gradients of the answer loss with respect to every question token's input
/// embedding, `[m, d_model]`. Row `i` belongs to question token `i` (model
/// position `i + 1`, after BOS). All rows come out of one backward pass.
pub fn token_gradients(params: &ModelParams, question: &[u32], answer: &[u32]) -> Result<Tensor> {
    if question.is_empty() {
        return Err(invalid("sensitivity needs a nonempty question"));
    }
    let packed = pack_qa(&[(question, answer)])?;
    let seq = &packed.seqs[0];
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let x = g.leaf(input_embeddings(params, seq)?, true);
    let f = forward_graph(&mut g, params, &bound, &[SeqSpec { tokens: seq, inject: Some(x) }])?;
    let loss = g.cross_entropy(f.logits, &packed.answer_targets[0])?;
    g.backward(loss)?;
    let d = params.config().d_model;
    let grad = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; seq.len() * d]);
    let rows = grad[d..(question.len() + 1) * d].to_vec();
    if let Some(k) = rows.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "embedding gradient at question token {} dimension {}",
            k / d,
            k % d
        )));
    }
    Tensor::matrix(question.len(), d, rows)
}

/// Gradient for a single question token.
pub fn token_gradient(params: &ModelParams, question: &[u32], answer: &[u32], i: usize) -> Result<Vec<f64>> {
    if i >= question.len() {
        return Err(invalid(format!("token index {i} outside question of length {}", question.len())));
    }
    Ok(token_gradients(params, question, answer)?.row(i).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityProfile {
    pub sample_id: String,
    /// `|g_i|^2` per question token.
    pub lambda: Vec<f64>,
    /// `lambda / max(lambda)`, all zero when every gradient vanishes.
    pub normalized: Vec<f64>,
    pub k: f64,
    /// Selected question indices, ascending.
    pub selected: Vec<usize>,
}

/// `max(1, round(k * m))`.
pub fn select_count(k: f64, m: usize) -> usize {
    ((k * m as f64).round() as usize).clamp(1, m.max(1))
}

/// Indices of the `max(1, round(k m))` largest values, ties to the lower
/// index, returned in ascending order.
pub fn top_k_sensitive(lambda: &[f64], k: f64) -> Vec<usize> {
    let n = select_count(k, lambda.len()).min(lambda.len());
    let mut idx: Vec<usize> = (0..lambda.len()).collect();
    idx.sort_by(|&a, &b| lambda[b].total_cmp(&lambda[a]).then(a.cmp(&b)));
    let mut out = idx[..n].to_vec();
    out.sort_unstable();
    out
}

pub fn normalize(lambda: &[f64]) -> Vec<f64> {
    let max = lambda.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        lambda.iter().map(|l| l / max).collect()
    } else {
        vec![0.0; lambda.len()]
    }
}

/// Builds a profile from precomputed values. When every value is zero the
/// selection falls back to a seeded uniform draw.
pub fn profile_from_lambda(sample_id: &str, lambda: Vec<f64>, k: f64, seed: u64) -> SensitivityProfile {
    let selected = if lambda.iter().all(|&l| l == 0.0) {
        log::warn!("sample {sample_id}: all token gradients vanish; selecting tokens at random");
        let n = select_count(k, lambda.len()).min(lambda.len());
        let mut rng = derived(seed, &[str_tag(sample_id)]);
        let mut idx: Vec<usize> = (0..lambda.len()).collect();
        for i in 0..n {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut s = idx[..n].to_vec();
        s.sort_unstable();
        s
    } else {
        top_k_sensitive(&lambda, k)
    };
    SensitivityProfile {
        sample_id: sample_id.to_string(),
        normalized: normalize(&lambda),
        lambda,
        k,
        selected,
    }
}

pub fn msm(params: &ModelParams, sample: &EncodedSample, k: f64, seed: u64) -> Result<SensitivityProfile> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(invalid(format!("K must be in (0, 1], got {k}")));
    }
    let g = token_gradients(params, &sample.question, &sample.answer)?;
    let lambda = (0..g.rows()).map(|i| g.row(i).iter().map(|v| v * v).sum()).collect();
    Ok(profile_from_lambda(&sample.id, lambda, k, seed))
}

pub fn msm_batch(
    params: &ModelParams,
    samples: &[EncodedSample],
    k: f64,
    seed: u64,
    exec: Exec,
) -> Result<Vec<SensitivityProfile>> {
    exec.try_map(samples, |s| msm(params, s, k, seed))
}

/// Cached profiles for one checkpoint, keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileCache {
    pub checkpoint_hash: String,
    pub profiles: BTreeMap<String, SensitivityProfile>,
}

impl ProfileCache {
    pub fn new(checkpoint_hash: &str, profiles: Vec<SensitivityProfile>) -> Self {
        Self {
            checkpoint_hash: checkpoint_hash.to_string(),
            profiles: profiles.into_iter().map(|p| (p.sample_id.clone(), p)).collect(),
        }
    }

    pub fn get(&self, checkpoint_hash: &str, sample_id: &str) -> Option<&SensitivityProfile> {
        (self.checkpoint_hash == checkpoint_hash).then(|| self.profiles.get(sample_id)).flatten()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationResponse {
    pub lambda: Vec<f64>,
    /// Mean `|loss(x + delta) - loss(x)|` per token.
    pub mean_change: Vec<f64>,
    pub spearman: Option<f64>,
}

/// Random directions of norm `delta_norm`; the same draws are reused for
/// every token so that differences between tokens come from the model only.
pub fn random_directions(n: usize, d: usize, delta_norm: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * delta_norm / norm).collect()
        })
        .collect()
}

/// Generic perturbation experiment: `loss` maps an embedding matrix to a
/// scalar, `rows` are the matrix rows to perturb one at a time.
pub fn perturbation_response<F>(
    base: &Tensor,
    rows: &[usize],
    lambda: Vec<f64>,
    directions: &[Vec<f64>],
    loss: F,
    exec: Exec,
) -> Result<PerturbationResponse>
where
    F: Fn(&Tensor) -> Result<f64> + Sync + Send,
{
    let l0 = loss(base)?;
    let mean_change = exec.try_map(rows, |&r| -> Result<f64> {
        let mut total = 0.0;
        for dir in directions {
            let mut x = base.clone();
            x.row_mut(r).iter_mut().zip(dir).for_each(|(a, b)| *a += b);
            total += (loss(&x)? - l0).abs();
        }
        Ok(total / directions.len() as f64)
    })?;
    let spearman = spearman(&lambda, &mean_change);
    Ok(PerturbationResponse {
        lambda,
        mean_change,
        spearman,
    })
}

/// Mean L2 norm of the token-embedding rows.
pub fn mean_embedding_norm(params: &ModelParams) -> f64 {
    let e = params.token_embeddings();
    (0..e.rows()).map(|i| e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / e.rows() as f64
}

/// Perturbs each question token's embedding with `n_trials` fixed-norm random
/// directions and correlates the mean absolute loss change with `lambda`.
pub fn sensitivity_response(
    params: &ModelParams,
    sample: &EncodedSample,
    n_trials: usize,
    delta_norm: f64,
    seed: u64,
    exec: Exec,
) -> Result<PerturbationResponse> {
    if n_trials < 30 {
        return Err(invalid(format!("need at least 30 trials, got {n_trials}")));
    }
    let limit = 0.1 * mean_embedding_norm(params);
    if !(delta_norm > 0.0 && delta_norm <= limit) {
        return Err(invalid(format!("delta_norm must be in (0, {limit}], got {delta_norm}")));
    }
    let profile = msm(params, sample, 1.0, seed)?;
    let packed = pack_qa(&[(&sample.question, &sample.answer)])?;
    let base = input_embeddings(params, &packed.seqs[0])?;
    let mut rng = derived(seed, &[str_tag(&sample.id)]);
    let dirs = random_directions(n_trials, params.config().d_model, delta_norm, &mut rng);
    let rows: Vec<usize> = (1..=sample.question.len()).collect();
    perturbation_response(
        &base,
        &rows,
        profile.lambda,
        &dirs,
        |x| loss_with_embeddings(params, &sample.question, &sample.answer, x),
        exec,
    )
}

/// Mean normalised sensitivity of subject-span tokens divided by that of the
/// other question tokens. Each sample contributes one subject mean and one
/// non-subject mean; samples lacking either kind are skipped.
pub fn subject_sensitivity_ratio(profiles: &[SensitivityProfile], samples: &[EncodedSample]) -> Option<f64> {
    let (mut subj, mut other, mut n) = (0.0, 0.0, 0usize);
    for (p, s) in profiles.iter().zip(samples) {
        let pos = s.subject_positions();
        let (a, b): (Vec<(usize, &f64)>, Vec<(usize, &f64)>) = p.normalized.iter().enumerate().partition(|(i, _)| pos.contains(i));
        if a.is_empty() || b.is_empty() {
            continue;
        }
        subj += a.iter().map(|(_, v)| **v).sum::<f64>() / a.len() as f64;
        other += b.iter().map(|(_, v)| **v).sum::<f64>() / b.len() as f64;
        n += 1;
    }
    (n > 0 && other > 0.0).then(|| subj / other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_coords;
    use crate::lm::{param_arith, ModelConfig};
    use crate::rng::seeded;

    fn model() -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 16,
            d_ff: 16,
            ..Default::default()
        };
        let p = ModelParams::init(cfg.clone(), 3).unwrap();
        param_arith(5.0, &p, 0.0, &p).unwrap()
    }

    #[test]
    fn closed_form_eigenvalue() {
        let p = profile_from_lambda("s", vec![25.0, 1.0], 0.5, 0);
        assert_eq!(p.selected, vec![0]);
        let g = [3.0, 4.0, 0.0];
        let l: f64 = g.iter().map(|v| v * v).sum();
        assert_eq!(l, 25.0);
    }

    #[test]
    fn top_k_counts_and_ties() {
        let l = vec![0.1, 0.9, 0.3, 0.7, 0.5, 0.2, 0.8, 0.4, 0.6, 0.0];
        assert_eq!(top_k_sensitive(&l, 0.4), vec![1, 3, 6, 8]);
        assert_eq!(top_k_sensitive(&l, 1.0), (0..10).collect::<Vec<_>>());
        assert_eq!(top_k_sensitive(&[1.0, 1.0, 1.0], 0.4), vec![0]);
        assert_eq!(top_k_sensitive(&[2.0], 0.01), vec![0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = model();
        let q = [5u32, 6, 7, 8];
        let a = [9u32, 2];
        let g = token_gradients(&p, &q, &a).unwrap();
        let packed = pack_qa(&[(&q[..], &a[..])]).unwrap();
        let base = input_embeddings(&p, &packed.seqs[0]).unwrap();
        let pp = p.clone();
        let seq = packed.seqs[0].clone();
        let targets = packed.answer_targets[0].clone();
        let coords: Vec<usize> = (8..8 + 4 * 8).collect();
        let r = grad_check_coords(
            move |gr, x| {
                let b = bind(gr, &pp, false);
                let f = forward_graph(gr, &pp, &b, &[SeqSpec { tokens: &seq, inject: Some(x) }])?;
                gr.cross_entropy(f.logits, &targets)
            },
            &base,
            1e-5,
            &coords,
            Exec::Sequential,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{}", r.max_rel_error);
        for (k, &c) in coords.iter().enumerate() {
            assert!((r.analytic[k] - g.data()[c - 8]).abs() < 1e-12);
        }
        assert_eq!(token_gradients(&p, &q, &a).unwrap(), g);
    }

    #[test]
    fn selection_invariant_under_loss_scaling() {
        // a loss scaled by c scales every gradient by c and every lambda by c^2
        let p = model();
        let e = EncodedSample {
            id: "x".into(),
            source: crate::factworld::Source::Main,
            fact: 0,
            variant: crate::factworld::Variant::Base,
            split: crate::factworld::Split::Forget,
            question: vec![5, 6, 7, 8, 9],
            answer: vec![10, 2],
            subject_span: Some((1, 3)),
            paraphrased: vec![],
            perturbed: vec![],
            distractors: vec![],
        };
        let prof = msm(&p, &e, 0.4, 0).unwrap();
        let scaled: Vec<f64> = prof.lambda.iter().map(|l| l * 9.0).collect();
        assert_eq!(top_k_sensitive(&scaled, 0.4), prof.selected);
        assert!(prof.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn linear_model_correlation_is_exact() {
        // loss(x) = sum_i c_i (w . x_i): gradients are parallel, so the mean
        // absolute change is exactly proportional to sqrt(lambda).
        let d = 6;
        let mut rng = seeded(1);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = [0.3, 2.0, 1.1, 0.05, 0.7];
        let base = Tensor::matrix(5, d, (0..5 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lambda: Vec<f64> = c.iter().map(|ci| ci * ci * w.iter().map(|v| v * v).sum::<f64>()).collect();
        let dirs = random_directions(30, d, 0.01, &mut rng);
        let r = perturbation_response(
            &base,
            &[0, 1, 2, 3, 4],
            lambda,
            &dirs,
            |x| Ok((0..5).map(|i| c[i] * x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).sum()),
            Exec::Sequential,
        )
        .unwrap();
        assert!((r.spearman.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }

    #[test]
    fn zero_gradients_fall_back_to_random_selection() {
        let p = profile_from_lambda("z", vec![0.0; 10], 0.4, 7);
        assert_eq!(p.selected.len(), 4);
        assert_eq!(p, profile_from_lambda("z", vec![0.0; 10], 0.4, 7));
        assert!(p.normalized.iter().all(|v| *v == 0.0));
    }
}
