//! Seeded synthetic fact world and its question/answer corpus.
//!
//! A world is a set of named entities linked by functional, injective
//! relations. Each fact is rendered as a base question plus rephrasings, an
//! alias-substituted question, a reversed-relation question and a one-hop
//! composition through a second fact.

mod catalog;
mod io;
mod perturb;
mod render;
mod split;
mod vocab;
mod world;

pub use catalog::{Namer, ICL_TEMPLATE, IDK_POOL, OBJECT_SLOT, PARAPHRASE_TEMPLATES, PERTURBED_TEMPLATE, SUBJECT_SLOT};
pub use io::{read_corpus, read_samples, write_corpus, write_samples, CorpusFiles};
pub use perturb::{apply_edit, discrete_rewrite, LetterEdit};
pub use render::{render_dataset, render_dataset_with, QASample, RenderOptions, Source, Split, Variant};
pub use split::{forget_count, leakage_violations, split_dataset};
pub use vocab::{build_vocab, EncodedSample, Vocab, SPECIALS};
pub use world::{generate_world, generate_world_with, Entity, Fact, FactWorld, Relation};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_facts: usize,
    pub forget_fraction: f64,
    /// Entities and facts in each of the two auxiliary worlds.
    pub aux_entities: usize,
    pub aux_facts: usize,
    pub n_perturbed: usize,
    /// Minimum fraction of facts whose object starts another fact.
    pub min_one_hop_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 60,
            n_relations: 8,
            n_facts: 200,
            forget_fraction: 0.25,
            aux_entities: 30,
            aux_facts: 40,
            n_perturbed: 3,
            min_one_hop_fraction: 0.5,
        }
    }
}

/// The main world with its forget/retain split, the two auxiliary worlds and
/// the shared vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub world: FactWorld,
    pub aux: Vec<FactWorld>,
    pub samples: Vec<QASample>,
    pub vocab: Vocab,
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        if config.n_perturbed < 3 {
            return Err(invalid("n_perturbed must be at least 3"));
        }
        let mut namer = Namer::new();
        let mut world = None;
        for attempt in 0..16u64 {
            let seed = if attempt == 0 { config.seed } else { derive_seed(config.seed, &[attempt]) };
            let mut trial_namer = namer.clone();
            let w = generate_world_with(&mut trial_namer, seed, config.n_entities, config.n_relations, config.n_facts)?;
            if w.facts.is_empty() || w.one_hop_coverage() >= config.min_one_hop_fraction {
                namer = trial_namer;
                world = Some(w);
                break;
            }
            log::info!("world seed {seed}: one-hop coverage {:.3} too low, redrawing", w.one_hop_coverage());
        }
        let world = world.ok_or_else(|| invalid("could not reach the requested one-hop coverage"))?;
        let main = render_dataset_with(
            &world,
            RenderOptions {
                n_perturbed: config.n_perturbed,
                source: Source::Main,
                base_only: false,
            },
        );
        let (forget, retain) = split_dataset(&main, config.forget_fraction, derive_seed(config.seed, &[0x5eed]))?;
        let leaks = leakage_violations(&forget, &retain);
        if !leaks.is_empty() {
            return Err(invalid(format!("forget sample {} leaks into retain sample {}", leaks[0].0, leaks[0].1)));
        }
        let mut samples: Vec<QASample> = forget.into_iter().chain(retain).collect();
        samples.sort_by(|a, b| a.id.cmp(&b.id));

        let mut aux = Vec::new();
        for (k, source) in [Source::RealAuthors, Source::WorldFacts].into_iter().enumerate() {
            let w = generate_world_with(
                &mut namer,
                derive_seed(config.seed, &[0xa0, k as u64]),
                config.aux_entities,
                config.n_relations,
                config.aux_facts,
            )?;
            samples.extend(render_dataset_with(
                &w,
                RenderOptions {
                    n_perturbed: config.n_perturbed,
                    source,
                    base_only: true,
                },
            ));
            aux.push(w);
        }
        let vocab = build_vocab(&samples);
        Ok(Self {
            config: config.clone(),
            world,
            aux,
            samples,
            vocab,
        })
    }

    pub fn select(&self, source: Source, split: Split, variant: Variant) -> Vec<&QASample> {
        self.samples
            .iter()
            .filter(|s| s.source == source && s.split == split && s.variant == variant)
            .collect()
    }

    pub fn encoded(&self, source: Source, split: Split, variant: Variant) -> Vec<EncodedSample> {
        self.select(source, split, variant)
            .into_iter()
            .map(|s| self.vocab.encode_sample(s))
            .collect()
    }

    pub fn encode_all(&self) -> Vec<EncodedSample> {
        self.samples.iter().map(|s| self.vocab.encode_sample(s)).collect()
    }

    pub fn forget_facts(&self) -> usize {
        self.select(Source::Main, Split::Forget, Variant::Base).len()
    }

    pub fn retain_facts(&self) -> usize {
        self.select(Source::Main, Split::Retain, Variant::Base).len()
    }

    pub fn idk_answers(&self) -> Vec<Vec<u32>> {
        IDK_POOL.iter().map(|t| {
            let mut v = self.vocab.encode_text(t);
            v.push(crate::lm::tokens::EOA);
            v
        }).collect()
    }

    /// Rows of `(split name, facts, samples)` for a summary table.
    pub fn split_table(&self) -> Vec<(String, usize, usize)> {
        let mut rows = Vec::new();
        for split in [Split::Forget, Split::Retain] {
            for v in Variant::ALL {
                let n = self.select(Source::Main, split, v).len();
                let name = format!("{}_{}", if split == Split::Forget { "forget" } else { "retain" }, v.as_str());
                let facts = self.select(Source::Main, split, Variant::Base).len();
                rows.push((name, facts, n));
            }
        }
        for s in [Source::RealAuthors, Source::WorldFacts] {
            let n = self.select(s, Split::Retain, Variant::Base).len();
            rows.push((s.as_str().to_string(), n, n));
        }
        rows
    }
}
