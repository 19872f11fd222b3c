//! Adam over a [`ModelParams`] set, plus chunked gradient accumulation.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::lm::{bind, Bound, ModelParams};

/// Per-tensor parameter gradients; `None` where no gradient flowed.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Option<Vec<f64>>>);

impl Grads {
    pub fn from_graph(g: &Graph, bound: &Bound) -> Self {
        Self(bound.vars.iter().map(|&v| g.grad(v).map(<[f64]>::to_vec)).collect())
    }

    pub fn add(&mut self, other: Grads) {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            match (a.as_mut(), b) {
                (Some(x), Some(y)) => x.iter_mut().zip(&y).for_each(|(x, y)| *x += y),
                (None, Some(y)) => *a = Some(y),
                _ => {}
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Evaluates `loss_fn` on fixed-size chunks of `items`, each in its own graph,
/// and sums the loss values and gradients in chunk order. Chunking does not
/// depend on `exec`, so sequential and parallel runs agree bitwise.
pub fn accumulate<T, F>(params: &ModelParams, items: &[T], chunk: usize, exec: Exec, loss_fn: F) -> Result<(f64, Grads)>
where
    T: Sync,
    F: Fn(&mut Graph, &Bound, &[T]) -> Result<Var> + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(chunk.max(1)).collect();
    let parts = exec.try_map(&chunks, |c| {
        let mut g = Graph::new();
        let bound = bind(&mut g, params, true);
        let loss = loss_fn(&mut g, &bound, c)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {v}")));
        }
        g.backward(loss)?;
        Ok::<_, Error>((v, Grads::from_graph(&g, &bound)))
    })?;
    let mut total = 0.0;
    let mut grads = Grads(vec![None; params.len()]);
    for (v, gr) in parts {
        total += v;
        grads.add(gr);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ModelParams) -> Self {
        let m: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the gradients accumulated on `bound` in `g`.
    /// A zero learning rate leaves every parameter bitwise unchanged.
    pub fn step(&mut self, params: &mut ModelParams, g: &Graph, bound: &Bound) -> Result<f64> {
        self.step_grads(params, &Grads::from_graph(g, bound))
    }

    pub fn step_grads(&mut self, params: &mut ModelParams, grads: &Grads) -> Result<f64> {
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at step {}", self.t + 1)));
        }
        self.t += 1;
        if self.cfg.lr == 0.0 {
            return Ok(norm);
        }
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, gr) in grads.0.iter().enumerate() {
            let Some(gr) = gr else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.tensor_mut(i).data_mut();
            for k in 0..w.len() {
                let gk = gr[k] * clip;
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                w[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{bind, forward_graph, pack_qa, ModelConfig, SeqSpec};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 10,
            d_ff: 16,
            ..Default::default()
        }
    }

    fn train(lr: f64, steps: usize) -> (ModelParams, ModelParams, f64) {
        let start = ModelParams::init(cfg(), 2).unwrap();
        let mut p = start.clone();
        let mut opt = Adam::new(AdamConfig::with_lr(lr), &p);
        let packed = pack_qa(&[(&[4, 5][..], &[6, 7, 2][..])]).unwrap();
        let mut last = 0.0;
        for _ in 0..steps {
            let mut g = Graph::new();
            let b = bind(&mut g, &p, true);
            let f = forward_graph(&mut g, &p, &b, &[SeqSpec::plain(&packed.seqs[0])]).unwrap();
            let loss = g.cross_entropy(f.logits, &packed.answer_targets[0]).unwrap();
            last = g.value(loss).item();
            g.backward(loss).unwrap();
            opt.step(&mut p, &g, &b).unwrap();
        }
        (start, p, last)
    }

    #[test]
    fn zero_lr_is_identity() {
        let (a, b, _) = train(0.0, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn overfits_single_pair() {
        let (_, _, loss) = train(1e-2, 150);
        assert!(loss < 0.05, "{loss}");
    }
}
