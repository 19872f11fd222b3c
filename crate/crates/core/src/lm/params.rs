use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{invalid, Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const PARAMS_PER_LAYER: usize = 12;

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;

/// Offsets of the tensors inside one transformer block.
pub(crate) mod block {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_ATTN_OUT: usize = 4;
    pub const B_ATTN_OUT: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W_MLP_IN: usize = 8;
    pub const B_MLP_IN: usize = 9;
    pub const W_MLP_OUT: usize = 10;
    pub const B_MLP_OUT: usize = 11;
}

const BLOCK_NAMES: [&str; PARAMS_PER_LAYER] = [
    "ln1.g",
    "ln1.b",
    "attn.w_qkv",
    "attn.b_qkv",
    "attn.w_out",
    "attn.b_out",
    "ln2.g",
    "ln2.b",
    "mlp.w_in",
    "mlp.b_in",
    "mlp.w_out",
    "mlp.b_out",
];

/// Full parameter set of the model. Tensors are reference counted so that
/// graphs, frozen reference copies and the optimiser can share storage;
/// mutation goes through [`ModelParams::tensor_mut`] (copy on write).
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Arc<Tensor>>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a == b)
    }
}

pub(crate) fn block_index(layer: usize, part: usize) -> usize {
    2 + layer * PARAMS_PER_LAYER + part
}

impl ModelParams {
    /// Names and shapes of every tensor, in storage order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, c, f) = (config.vocab_size, config.d_model, config.context_len, config.d_ff);
        let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c, d])];
        for l in 0..config.n_layers {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, 3 * d],
                vec![3 * d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ];
            for (name, shape) in BLOCK_NAMES.iter().zip(shapes) {
                out.push((format!("blocks.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.g".to_string(), vec![d]));
        out.push(("ln_f.b".to_string(), vec![d]));
        if !config.tie_embeddings {
            out.push(("unembed".to_string(), vec![v, d]));
        }
        out
    }

    /// GPT-2 style initialisation: N(0, 0.02) weights, residual projections
    /// scaled by 1/sqrt(2 L), unit gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let layout = Self::layout(&config);
        let mut tensors = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".g") {
                vec![1.0; n]
            } else if name.ends_with(".b") || name.contains(".b_") {
                vec![0.0; n]
            } else {
                let s = if name.ends_with("w_out") { resid_std } else { std };
                let dist = Normal::new(0.0, s).expect("valid std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            tensors.push(Arc::new(Tensor::new(shape.clone(), data)?));
        }
        Ok(Self { config, tensors })
    }

    /// Builds parameters from explicit tensors (checked against the layout).
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != tensors.len() {
            return Err(invalid(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((_, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "from_tensors",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            config,
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> Vec<String> {
        Self::layout(&self.config).into_iter().map(|(n, _)| n).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn shared(&self, i: usize) -> Arc<Tensor> {
        self.tensors[i].clone()
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[i])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter().map(|t| t.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names().iter().position(|n| n == name).map(|i| self.tensor(i))
    }

    pub fn token_embeddings(&self) -> &Tensor {
        self.tensor(TOK_EMB)
    }

    pub fn position_embeddings(&self) -> &Tensor {
        self.tensor(POS_EMB)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.config == other.config
    }

    /// Content hash over the configuration and every tensor's raw bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// `a * p1 + b * p2`, tensor by tensor.
pub fn param_arith(a: f64, p1: &ModelParams, b: f64, p2: &ModelParams) -> Result<ModelParams> {
    if !p1.same_architecture(p2) {
        return Err(invalid(format!(
            "architecture mismatch: {:?} vs {:?}",
            p1.config, p2.config
        )));
    }
    let tensors = p1
        .tensors
        .iter()
        .zip(&p2.tensors)
        .map(|(x, y)| x.lin_comb(a, y, b).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams {
        config: p1.config.clone(),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            context_len: 10,
            d_ff: 16,
            tie_embeddings: true,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn arithmetic_fixed_points() {
        let p = ModelParams::init(small(), 3).unwrap();
        assert_eq!(param_arith(1.0, &p, 0.0, &p).unwrap(), p);
        assert_eq!(param_arith(2.0, &p, -1.0, &p).unwrap(), p);
    }

    #[test]
    fn arithmetic_is_linear_elementwise() {
        let p = ModelParams::init(small(), 3).unwrap();
        let q = ModelParams::init(small(), 4).unwrap();
        let r = param_arith(0.5, &p, -2.0, &q).unwrap();
        for ((a, b), c) in p.tensors().zip(q.tensors()).zip(r.tensors()) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
                assert_eq!(*z, 0.5 * x - 2.0 * y);
            }
        }
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let p = ModelParams::init(small(), 3).unwrap();
        let mut cfg = small();
        cfg.d_ff = 24;
        let q = ModelParams::init(cfg, 3).unwrap();
        assert!(param_arith(1.0, &p, 1.0, &q).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let mut cfg = small();
        cfg.n_heads = 3;
        assert!(ModelParams::init(cfg, 0).is_err());
    }

    #[test]
    fn copy_on_write_leaves_clone_untouched() {
        let p = ModelParams::init(small(), 3).unwrap();
        let mut q = p.clone();
        q.tensor_mut(0).data_mut()[0] += 1.0;
        assert_ne!(p.tensor(0).data()[0], q.tensor(0).data()[0]);
        assert_ne!(p.content_hash(), q.content_hash());
    }
}
