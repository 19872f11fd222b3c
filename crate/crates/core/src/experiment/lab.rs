//! In-memory pipeline: corpus, training mix, target and retain models,
//! unlearning runs and evaluation.

use std::sync::Arc;

use super::config::ExperimentConfig;
use crate::error::Result;
use crate::exec::Exec;
use crate::factworld::{Corpus, EncodedSample, Source, Split, Variant};
use crate::lm::ModelParams;
use crate::metrics::{evaluate, standard_splits, EvalSplit, MetricReport, ReportMeta};
use crate::rng::derive_seed;
use crate::sensitivity::ProfileCache;
use crate::train::{train_lm, QaPair};
use crate::unlearn::{unlearn, Adapted, MethodSpec, UnlearnConfig, UnlearnData, Unlearned};

/// Question/answer pairs for language-model training. Every sample appears
/// once; base questions appear `base_repeats` times in total and, when
/// `paraphrase_answers` is set, once more per paraphrased answer.
pub fn training_pairs(samples: &[EncodedSample], base_repeats: usize, paraphrase_answers: bool) -> Vec<QaPair> {
    let mut out = Vec::new();
    for s in samples {
        let copies = if s.variant == Variant::Base { base_repeats.max(1) } else { 1 };
        for _ in 0..copies {
            out.push((s.question.clone(), s.answer.clone()));
        }
        if paraphrase_answers && s.variant == Variant::Base {
            for p in &s.paraphrased {
                out.push((s.question.clone(), p.clone()));
            }
        }
    }
    out
}

pub struct Lab {
    pub config: ExperimentConfig,
    pub corpus: Corpus,
    pub encoded: Vec<EncodedSample>,
    pub splits: Vec<EvalSplit>,
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let corpus = Corpus::generate(&config.corpus_config())?;
        Ok(Self::from_corpus(config, corpus))
    }

    pub fn from_corpus(config: ExperimentConfig, corpus: Corpus) -> Self {
        let encoded = corpus.encode_all();
        let splits = standard_splits(&corpus);
        Self {
            config,
            corpus,
            encoded,
            splits,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Base forget samples of the main world: the set handed to unlearning.
    pub fn forget_set(&self) -> Vec<EncodedSample> {
        self.corpus.encoded(Source::Main, Split::Forget, Variant::Base)
    }

    /// Base retain samples of the main world, used by retain regularisers.
    pub fn retain_set(&self) -> Vec<EncodedSample> {
        self.corpus.encoded(Source::Main, Split::Retain, Variant::Base)
    }

    pub fn init_model(&self) -> Result<ModelParams> {
        let mc = self.config.model.model_config(self.corpus.vocab.len());
        ModelParams::init(mc, derive_seed(self.seed(), &[0x1417]))
    }

    fn train_on(&self, samples: &[EncodedSample], exec: Exec) -> Result<(ModelParams, Vec<f64>)> {
        let t = &self.config.train;
        let data = training_pairs(samples, t.base_repeats, t.paraphrase_answers);
        let tc = t.train_config(derive_seed(self.seed(), &[0x7a1]));
        train_lm(&self.init_model()?, &data, &tc, exec)
    }

    /// Model trained on every sample.
    pub fn train_target(&self, exec: Exec) -> Result<(ModelParams, Vec<f64>)> {
        self.train_on(&self.encoded, exec)
    }

    /// Model trained on the retain side only, from the same initialisation.
    pub fn train_retain(&self, exec: Exec) -> Result<(ModelParams, Vec<f64>)> {
        let retain: Vec<EncodedSample> = self.encoded.iter().filter(|s| s.split == Split::Retain).cloned().collect();
        self.train_on(&retain, exec)
    }

    pub fn unlearn_config(&self, spec: &MethodSpec) -> Result<UnlearnConfig> {
        self.config.unlearn_config(spec)
    }

    pub fn unlearn_with(&self, target: &ModelParams, cfg: &UnlearnConfig, profiles: Option<&ProfileCache>, exec: Exec) -> Result<Unlearned> {
        let forget = self.forget_set();
        let retain = self.retain_set();
        let idk = self.corpus.idk_answers();
        let data = UnlearnData {
            forget: &forget,
            retain: &retain,
            idk: &idk,
            vocab: &self.corpus.vocab,
            profiles,
        };
        unlearn(target, &data, cfg, exec)
    }

    pub fn unlearn(&self, target: &ModelParams, spec: &MethodSpec, profiles: Option<&ProfileCache>, exec: Exec) -> Result<Unlearned> {
        self.unlearn_with(target, &self.unlearn_config(spec)?, profiles, exec)
    }

    pub fn evaluate(&self, provider: &Adapted, meta: ReportMeta, exec: Exec) -> Result<MetricReport> {
        evaluate(provider, &self.splits, meta, &self.config.eval, exec)
    }

    pub fn meta(&self, method: &str, params: &ModelParams, config_hash: &str) -> ReportMeta {
        ReportMeta {
            method: method.to_string(),
            checkpoint_hash: params.content_hash(),
            config_hash: config_hash.to_string(),
            seed: self.seed(),
        }
    }
}

/// Wraps unlearning output as a distribution provider.
pub fn provider_of(u: &Unlearned) -> Adapted {
    Adapted {
        model: Arc::new(u.params.clone()),
        adaptor: u.adaptor.clone(),
    }
}
