//! Tiny decoder-only transformer language model.

mod batch;
mod checkpoint;
mod config;
mod model;
mod params;
mod provider;

pub use batch::{answer_pass, frozen_answer_logits, AnswerPass};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT};
pub use config::ModelConfig;
pub use model::{
    answer_logits, bind, conditional_prob, forward, forward_graph, forward_hidden, generate, lens_logits, logit_lens, mc_probability,
    next_token_distribution, pack_qa, prompt, sequence_loss, Bound, ForwardGraph, ForwardOutput, HiddenGraph, PackedQa, SeqSpec,
};
pub use params::{param_arith, ModelParams, PARAMS_PER_LAYER};
pub use provider::{LogitVector, ProbDist, Provider, Query};

/// Reserved token ids; the vocabulary places these first.
pub mod tokens {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    /// End of answer.
    pub const EOA: u32 = 2;
    pub const UNK: u32 = 3;
    pub const N_SPECIAL: usize = 4;
}
