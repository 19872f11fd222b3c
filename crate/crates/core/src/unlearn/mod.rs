//! Unlearning objectives and procedures.

mod adaptors;
mod config;
mod losses;
mod permu;
mod run;

pub use adaptors::{icl_wrap, uld_logits, whp_distribution, Adaptor, Adapted, IclPrompt};
pub use config::{Method, MethodSpec, Reg, UnlearnConfig};
pub use losses::*;
pub use permu::{
    embedding_std, permu_perturb, permu_select, permu_targets, Corruption, PermuMode, Selection, TargetDistributionSet,
    TARGET_FLOOR,
};
pub use run::{reinforce, tv_unlearn, uld_train_assistant, unlearn, Provenance, StepLog, UnlearnData, Unlearned};
