//! The shared unlearning loop and the per-method procedures around it.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::adaptors::{Adaptor, IclPrompt};
use super::config::{Method, Reg, UnlearnConfig};
use super::losses::{
    activation_term, frozen_activations, ga_term, klr_term, nll_term, npo_term, packed_rows, permu_term, reference_probs,
    steering_vector, summed_nll, Pair,
};
use super::permu::{permu_perturb, permu_select, permu_targets, Corruption, PermuMode, Selection};
use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::factworld::{EncodedSample, Vocab};
use crate::lm::{param_arith, Bound, ModelParams};
use crate::optim::{accumulate, Adam, AdamConfig};
use crate::rng::{derive_seed, str_tag};
use crate::sensitivity::{msm_batch, ProfileCache, SensitivityProfile};
use crate::train::{epoch_batches, train_lm, QaPair, TrainConfig, CHUNK};

/// Inputs shared by every method.
#[derive(Debug, Clone, Copy)]
pub struct UnlearnData<'a> {
    pub forget: &'a [EncodedSample],
    pub retain: &'a [EncodedSample],
    pub idk: &'a [Vec<u32>],
    pub vocab: &'a Vocab,
    /// Sensitivity profiles of the forget samples on the target model.
    pub profiles: Option<&'a ProfileCache>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub forget_loss: f64,
    pub retain_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub config_hash: String,
    pub parent: String,
}

#[derive(Debug, Clone)]
pub struct Unlearned {
    pub params: ModelParams,
    pub adaptor: Option<Adaptor>,
    pub log: Vec<StepLog>,
    pub provenance: Provenance,
}

/// Objective on the forget batch.
enum ForgetObjective<'a> {
    Ascent,
    Descent,
    Idk(&'a [Vec<u32>]),
    Npo { reference: &'a ModelParams, beta: f64 },
    Rmu { steer: crate::tensor::Tensor, layer: usize },
    Permu(PermuSetup<'a>),
}

struct PermuSetup<'a> {
    mode: PermuMode,
    profiles: BTreeMap<String, SensitivityProfile>,
    source: Option<&'a ModelParams>,
    vocab: &'a Vocab,
    k: f64,
    p: f64,
    c: f64,
}

/// Terms on the retain batch.
enum RetainObjective<'a> {
    Gdr(f64),
    Klr { reference: &'a ModelParams, weight: f64 },
    Ascent(f64),
    RmuRetain { reference: &'a ModelParams, alpha: f64, layer: usize },
}

struct LoopSettings {
    adam: AdamConfig,
    epochs: usize,
    batch_size: usize,
    seed: u64,
}

fn pairs<'s>(items: &[&'s EncodedSample]) -> Vec<Pair<'s>> {
    items.iter().map(|s| (s.question.as_slice(), s.answer.as_slice())).collect()
}

fn sample_seed(seed: u64, tag: u64, id: &str, epoch: usize) -> u64 {
    derive_seed(seed, &[tag, str_tag(id), epoch as u64])
}

fn forget_chunk(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    chunk: &[&EncodedSample],
    obj: &ForgetObjective,
    batch: &[&EncodedSample],
    epoch: usize,
    seed: u64,
) -> Result<Var> {
    let scale = 1.0 / batch.len() as f64;
    let ps = pairs(chunk);
    match obj {
        ForgetObjective::Ascent => ga_term(g, params, bound, &ps, scale),
        ForgetObjective::Descent => nll_term(g, params, bound, &ps, scale),
        ForgetObjective::Idk(pool) => {
            if pool.is_empty() {
                return Err(invalid("refusal pool is empty"));
            }
            let sub: Vec<Pair> = chunk
                .iter()
                .map(|s| {
                    let k = sample_seed(seed, 0x1d4, &s.id, epoch) as usize % pool.len();
                    (s.question.as_slice(), pool[k].as_slice())
                })
                .collect();
            nll_term(g, params, bound, &sub, scale)
        }
        ForgetObjective::Npo { reference, beta } => {
            let r = summed_nll(reference, &ps)?;
            npo_term(g, params, bound, &ps, &r, *beta, scale)
        }
        ForgetObjective::Rmu { steer, layer } => {
            let rows = packed_rows(&pairs(batch));
            let s = 1.0 / (rows * params.config().d_model) as f64;
            activation_term(g, params, bound, &ps, *layer, steer, s)
        }
        ForgetObjective::Permu(setup) => {
            let source = setup.source.unwrap_or(params);
            let mut targets = Vec::with_capacity(chunk.len());
            for s in chunk {
                let ss = sample_seed(seed, 0x9e4, &s.id, epoch);
                let corruption = match permu_select(s, setup.mode, setup.profiles.get(&s.id), setup.k, setup.vocab, ss)? {
                    Selection::Indices(idx) => {
                        Corruption::Embeddings(permu_perturb(source, &s.question, &s.answer, &idx, setup.p, ss)?)
                    }
                    Selection::Rewritten(r) => Corruption::Rewritten(r.question),
                };
                let t = permu_targets(source, &s.question, &s.answer, &corruption, setup.c)?;
                targets.push(t.to_tensor());
            }
            permu_term(g, params, bound, &ps, &targets, scale)
        }
    }
}

fn retain_chunk(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    chunk: &[&EncodedSample],
    obj: &RetainObjective,
    batch: &[&EncodedSample],
) -> Result<Var> {
    let scale = 1.0 / batch.len() as f64;
    let ps = pairs(chunk);
    match obj {
        RetainObjective::Gdr(w) => nll_term(g, params, bound, &ps, w * scale),
        RetainObjective::Ascent(w) => ga_term(g, params, bound, &ps, w * scale),
        RetainObjective::Klr { reference, weight } => {
            let positions: usize = batch.iter().map(|s| s.answer.len()).sum();
            let (p, h) = reference_probs(reference, &ps)?;
            klr_term(g, params, bound, &ps, p, h, weight / positions as f64)
        }
        RetainObjective::RmuRetain { reference, alpha, layer } => {
            let rows = packed_rows(&pairs(batch));
            let h = frozen_activations(reference, &ps, *layer)?;
            let s = alpha / (rows * params.config().d_model) as f64;
            activation_term(g, params, bound, &ps, *layer, &h, s)
        }
    }
}

fn with_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, step {step}")),
        other => other,
    }
}

fn run_loop(
    start: &ModelParams,
    forget: &[&EncodedSample],
    retain: &[&EncodedSample],
    fo: &ForgetObjective,
    ros: &[RetainObjective],
    s: &LoopSettings,
    exec: Exec,
) -> Result<(ModelParams, Vec<StepLog>)> {
    if forget.is_empty() {
        return Err(invalid("forget set is empty"));
    }
    if !ros.is_empty() && retain.is_empty() {
        return Err(invalid("retain set is empty"));
    }
    let mut p = start.clone();
    let mut opt = Adam::new(s.adam, &p);
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..s.epochs {
        let fb = epoch_batches(forget.len(), s.batch_size, s.seed, epoch);
        let rb = if retain.is_empty() {
            Vec::new()
        } else {
            epoch_batches(retain.len(), s.batch_size, derive_seed(s.seed, &[0x7e7a]), epoch)
        };
        for (b, idx) in fb.iter().enumerate() {
            let batch: Vec<&EncodedSample> = idx.iter().map(|&i| forget[i]).collect();
            let (fl, mut grads) = accumulate(&p, &batch, CHUNK, exec, |g, bound, chunk| {
                forget_chunk(g, &p, bound, chunk, fo, &batch, epoch, s.seed)
            })
            .map_err(|e| with_step(e, epoch, step))?;
            let mut rl = 0.0;
            if !ros.is_empty() {
                let rbatch: Vec<&EncodedSample> = rb[b % rb.len()].iter().map(|&i| retain[i]).collect();
                for ro in ros {
                    let (v, gr) = accumulate(&p, &rbatch, CHUNK, exec, |g, bound, chunk| {
                        retain_chunk(g, &p, bound, chunk, ro, &rbatch)
                    })
                    .map_err(|e| with_step(e, epoch, step))?;
                    rl += v;
                    grads.add(gr);
                }
            }
            let norm = opt.step_grads(&mut p, &grads).map_err(|e| with_step(e, epoch, step))?;
            log.push(StepLog {
                epoch,
                step,
                forget_loss: fl,
                retain_loss: rl,
                grad_norm: norm,
            });
            step += 1;
        }
        if let Some(last) = log.last() {
            log::debug!("epoch {epoch}: forget {:.5} retain {:.5}", last.forget_loss, last.retain_loss);
        }
    }
    if !p.is_finite() {
        return Err(Error::NonFinite("parameters diverged".into()));
    }
    Ok((p, log))
}

fn qa_pairs(set: &[EncodedSample]) -> Vec<QaPair> {
    set.iter().map(|s| (s.question.clone(), s.answer.clone())).collect()
}

/// Fine-tunes a copy of the model on the forget set until it overfits.
pub fn reinforce(model: &ModelParams, forget: &[EncodedSample], epochs: usize, lr: f64, seed: u64, exec: Exec) -> Result<ModelParams> {
    if forget.is_empty() {
        return Err(invalid("forget set is empty"));
    }
    let tc = TrainConfig {
        lr,
        epochs,
        batch_size: 16,
        clip_norm: 1.0,
        seed: derive_seed(seed, &[0x4e1f]),
    };
    Ok(train_lm(model, &qa_pairs(forget), &tc, exec)?.0)
}

/// `2 theta_target - theta_reinforced`.
pub fn tv_unlearn(target: &ModelParams, reinforced: &ModelParams) -> Result<ModelParams> {
    param_arith(2.0, target, -1.0, reinforced)
}

/// Assistant for ULD: descends on the forget set and ascends on the retain set.
pub fn uld_train_assistant(
    target: &ModelParams,
    forget: &[EncodedSample],
    retain: &[EncodedSample],
    cfg: &UnlearnConfig,
    exec: Exec,
) -> Result<(ModelParams, Vec<StepLog>)> {
    if forget.is_empty() || retain.is_empty() {
        return Err(invalid("ULD assistant needs nonempty forget and retain sets"));
    }
    let f: Vec<&EncodedSample> = forget.iter().collect();
    let r: Vec<&EncodedSample> = retain.iter().collect();
    let settings = LoopSettings {
        adam: AdamConfig {
            clip_norm: cfg.clip_norm,
            ..AdamConfig::with_lr(cfg.reinforce_lr)
        },
        epochs: cfg.uld_epochs,
        batch_size: cfg.batch_size,
        seed: derive_seed(cfg.seed, &[0x01d]),
    };
    run_loop(
        target,
        &f,
        &r,
        &ForgetObjective::Descent,
        &[RetainObjective::Ascent(cfg.uld_retain_weight)],
        &settings,
        exec,
    )
}

fn profiles_for(target: &ModelParams, forget: &[EncodedSample], data: &UnlearnData, k: f64, seed: u64, exec: Exec) -> Result<BTreeMap<String, SensitivityProfile>> {
    let hash = target.content_hash();
    let mut out = BTreeMap::new();
    let mut missing = Vec::new();
    for s in forget {
        match data.profiles.and_then(|c| c.get(&hash, &s.id)) {
            Some(p) => {
                out.insert(s.id.clone(), p.clone());
            }
            None => missing.push(s.clone()),
        }
    }
    if !missing.is_empty() {
        log::info!("computing sensitivity profiles for {} samples", missing.len());
        for p in msm_batch(target, &missing, k, seed, exec)? {
            out.insert(p.sample_id.clone(), p);
        }
    }
    Ok(out)
}

/// Runs one unlearning method on `target`.
pub fn unlearn(target: &ModelParams, data: &UnlearnData, cfg: &UnlearnConfig, exec: Exec) -> Result<Unlearned> {
    cfg.validate()?;
    if data.forget.is_empty() {
        return Err(invalid("forget set is empty"));
    }
    let spec = cfg.method;
    let provenance = Provenance {
        method: spec.to_string(),
        config_hash: cfg.hash(),
        parent: target.content_hash(),
    };
    let done = |params: ModelParams, adaptor: Option<Adaptor>, log: Vec<StepLog>| Unlearned {
        params,
        adaptor,
        log,
        provenance: provenance.clone(),
    };
    let layer = cfg.rmu_layer_for(target.config().n_layers);
    let forget_obj = match spec.method {
        Method::Tv => {
            let r = reinforce(target, data.forget, cfg.reinforce_epochs, cfg.reinforce_lr, cfg.seed, exec)?;
            return Ok(done(tv_unlearn(target, &r)?, None, Vec::new()));
        }
        Method::Whp => {
            let r = reinforce(target, data.forget, cfg.reinforce_epochs, cfg.reinforce_lr, cfg.seed, exec)?;
            let adaptor = Adaptor::Whp {
                reinforced: Arc::new(r),
                alpha: cfg.alpha_whp,
            };
            return Ok(done(target.clone(), Some(adaptor), Vec::new()));
        }
        Method::Uld => {
            let (a, log) = uld_train_assistant(target, data.forget, data.retain, cfg, exec)?;
            let adaptor = Adaptor::Uld {
                assistant: Arc::new(a),
                alpha: cfg.alpha_uld,
            };
            return Ok(done(target.clone(), Some(adaptor), log));
        }
        Method::Icl => {
            let scope: BTreeSet<Vec<u32>> = data.forget.iter().filter_map(|s| s.subject().map(<[u32]>::to_vec)).collect();
            let adaptor = Adaptor::Icl {
                prompt: IclPrompt::new(data.vocab),
                scope,
            };
            return Ok(done(target.clone(), Some(adaptor), Vec::new()));
        }
        Method::Ga => ForgetObjective::Ascent,
        Method::Dpo => ForgetObjective::Idk(data.idk),
        Method::Npo => ForgetObjective::Npo {
            reference: target,
            beta: cfg.beta,
        },
        Method::Rmu => ForgetObjective::Rmu {
            steer: steering_vector(target.config().d_model, cfg.rmu_steer, cfg.seed),
            layer,
        },
        Method::Permu | Method::PermuS | Method::PermuDis => {
            let mode = spec.method.permu_mode().expect("permu method");
            let profiles = if mode == PermuMode::Msm {
                profiles_for(target, data.forget, data, cfg.k, cfg.seed, exec)?
            } else {
                BTreeMap::new()
            };
            ForgetObjective::Permu(PermuSetup {
                mode,
                profiles,
                source: cfg.frozen_targets.then_some(target),
                vocab: data.vocab,
                k: cfg.k,
                p: cfg.p,
                c: cfg.c,
            })
        }
    };
    let mut retain_objs = Vec::new();
    if spec.method == Method::Rmu {
        retain_objs.push(RetainObjective::RmuRetain {
            reference: target,
            alpha: cfg.rmu_alpha,
            layer,
        });
    }
    match spec.reg {
        Reg::None => {}
        Reg::Gdr => retain_objs.push(RetainObjective::Gdr(cfg.retain_weight)),
        Reg::Klr => retain_objs.push(RetainObjective::Klr {
            reference: target,
            weight: cfg.retain_weight,
        }),
    }
    let settings = LoopSettings {
        adam: AdamConfig {
            clip_norm: cfg.clip_norm,
            ..AdamConfig::with_lr(cfg.lr)
        },
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    };
    let f: Vec<&EncodedSample> = data.forget.iter().collect();
    let r: Vec<&EncodedSample> = data.retain.iter().collect();
    let (params, log) = run_loop(target, &f, &r, &forget_obj, &retain_objs, &settings, exec)?;
    Ok(done(params, None, log))
}
