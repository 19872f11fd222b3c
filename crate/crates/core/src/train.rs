//! Supervised fine-tuning on question/answer pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::lm::{answer_pass, ModelParams};
use crate::optim::{accumulate, Adam, AdamConfig};
use crate::rng::derived;

/// Samples per graph when a batch is split for gradient accumulation.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 60,
            batch_size: 32,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            clip_norm: self.clip_norm,
            ..AdamConfig::with_lr(self.lr)
        }
    }
}

pub type QaPair = (Vec<u32>, Vec<u32>);

/// Mean per-sample answer cross-entropy of a batch, scaled by `scale`.
pub fn batch_nll_sum(
    g: &mut crate::autograd::Graph,
    params: &ModelParams,
    bound: &crate::lm::Bound,
    pairs: &[&QaPair],
    scale: f64,
) -> Result<crate::autograd::Var> {
    let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(q, a)| (q.as_slice(), a.as_slice())).collect();
    let pass = answer_pass(g, params, bound, &refs, None)?;
    let terms = (0..pass.len()).map(|i| pass.nll(g, i)).collect::<Result<Vec<_>>>()?;
    let s = g.add_all(&terms)?;
    Ok(g.scale(s, scale))
}

/// Seeded shuffled minibatches for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived(seed, &[0xba7c, epoch as u64]));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Fine-tunes a copy of `params` and returns it with the mean loss per epoch.
pub fn train_lm(params: &ModelParams, data: &[QaPair], cfg: &TrainConfig, exec: Exec) -> Result<(ModelParams, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("no training pairs"));
    }
    let mut p = params.clone();
    let mut opt = Adam::new(cfg.adam(), &p);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        for (b, idx) in batches.iter().enumerate() {
            let items: Vec<&QaPair> = idx.iter().map(|&i| &data[i]).collect();
            let scale = 1.0 / items.len() as f64;
            let (loss, grads) = accumulate(&p, &items, CHUNK, exec, |g, bound, chunk| {
                batch_nll_sum(g, &p, bound, chunk, scale)
            })
            .map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {b}")),
                other => other,
            })?;
            opt.step_grads(&mut p, &grads)?;
            total += loss * items.len() as f64;
        }
        let mean = total / data.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.5}");
        curve.push(mean);
    }
    Ok((p, curve))
}
