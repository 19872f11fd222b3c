use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::catalog::{OBJECT_SLOT, PARAPHRASE_TEMPLATES, PERTURBED_TEMPLATE, SUBJECT_SLOT};
use super::world::FactWorld;
use crate::rng::derived;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Rephrased,
    SubjectReplaced,
    RelationReversed,
    OneHop,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Base,
        Variant::Rephrased,
        Variant::SubjectReplaced,
        Variant::RelationReversed,
        Variant::OneHop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Rephrased => "rephrased",
            Variant::SubjectReplaced => "subject_replaced",
            Variant::RelationReversed => "reversed",
            Variant::OneHop => "one_hop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
}

/// Which world a sample comes from. The two auxiliary worlds play the role of
/// held-out general-knowledge sets for model utility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Main,
    RealAuthors,
    WorldFacts,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Main => "main",
            Source::RealAuthors => "real_authors",
            Source::WorldFacts => "world_facts",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub source: Source,
    /// Index of the originating fact in its world.
    pub fact: usize,
    pub variant: Variant,
    pub split: Split,
    pub question: Vec<String>,
    /// Correct answer words (the end-of-answer marker is added at encoding).
    pub answer: Vec<String>,
    /// `[start, end)` of the subject mention inside `question`.
    pub subject_span: Option<(usize, usize)>,
    pub paraphrased_answers: Vec<Vec<String>>,
    /// Wrong answers rendered with the same template as the first paraphrase.
    pub perturbed_answers: Vec<Vec<String>>,
    /// Wrong answers in the plain answer form, used as multiple-choice options.
    pub distractors: Vec<Vec<String>>,
}

impl QASample {
    pub fn subject(&self) -> Option<&[String]> {
        self.subject_span.map(|(s, e)| &self.question[s..e])
    }

    pub fn question_text(&self) -> String {
        self.question.join(" ")
    }

    pub fn answer_text(&self) -> String {
        self.answer.join(" ")
    }
}

/// Fills `slot` in `template` with `filler`, returning the words and the span of the filler.
pub(crate) fn fill(template: &str, slot: &str, filler: &[String]) -> (Vec<String>, (usize, usize)) {
    let mut out = Vec::new();
    let mut span = (0, 0);
    for w in template.split_whitespace() {
        if w == slot {
            span = (out.len(), out.len() + filler.len());
            out.extend_from_slice(filler);
        } else {
            out.push(w.to_string());
        }
    }
    (out, span)
}

#[derive(Debug, Clone, Copy)]
pub struct RenderOptions {
    pub n_perturbed: usize,
    pub source: Source,
    /// Only base samples (used for the auxiliary worlds).
    pub base_only: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            n_perturbed: 3,
            source: Source::Main,
            base_only: false,
        }
    }
}

pub fn render_dataset(world: &FactWorld) -> Vec<QASample> {
    render_dataset_with(world, RenderOptions::default())
}

/// Renders every variant of every fact. All samples start on the retain side;
/// [`super::split_dataset`] assigns the forget side at fact granularity.
pub fn render_dataset_with(world: &FactWorld, opts: RenderOptions) -> Vec<QASample> {
    let mut out = Vec::new();
    for (fi, fact) in world.facts.iter().enumerate() {
        let mut rng = derived(world.seed, &[0x7265_6e64, fi as u64]);
        let rel = &world.relations[fact.relation];
        let subj = &world.entities[fact.subject];
        let obj = &world.entities[fact.object];

        // wrong objects: other objects of the same relation
        let wrong_for = |correct: usize, pick_subjects: bool, relation: usize, rng: &mut crate::rng::Rng| {
            let mut pool: Vec<usize> = world
                .facts
                .iter()
                .filter(|f| f.relation == relation)
                .map(|f| if pick_subjects { f.subject } else { f.object })
                .filter(|&e| e != correct)
                .collect();
            pool.sort_unstable();
            pool.dedup();
            if pool.len() < opts.n_perturbed {
                let mut extra: Vec<usize> = (0..world.entities.len())
                    .filter(|e| *e != correct && !pool.contains(e))
                    .collect();
                extra.shuffle(rng);
                pool.extend(extra);
            }
            pool.shuffle(rng);
            pool.truncate(opts.n_perturbed);
            pool
        };
        let mk = |variant: Variant,
                  k: usize,
                  question: Vec<String>,
                  span: (usize, usize),
                  answer_entity: usize,
                  wrong: &[usize]| {
            let ans = &world.entities[answer_entity].name;
            QASample {
                id: format!("{}/{fi:03}/{}{k}", opts.source.as_str(), variant.as_str()),
                source: opts.source,
                fact: fi,
                variant,
                split: Split::Retain,
                question,
                answer: ans.clone(),
                subject_span: Some(span),
                paraphrased_answers: PARAPHRASE_TEMPLATES.iter().map(|t| fill(t, OBJECT_SLOT, ans).0).collect(),
                perturbed_answers: wrong
                    .iter()
                    .map(|&w| fill(PERTURBED_TEMPLATE, OBJECT_SLOT, &world.entities[w].name).0)
                    .collect(),
                distractors: wrong.iter().map(|&w| world.entities[w].name.clone()).collect(),
            }
        };

        let wrong = wrong_for(fact.object, false, fact.relation, &mut rng);
        for (k, template) in rel.templates.iter().enumerate() {
            if k > 0 && opts.base_only {
                break;
            }
            let (q, span) = fill(template, SUBJECT_SLOT, &subj.name);
            let variant = if k == 0 { Variant::Base } else { Variant::Rephrased };
            out.push(mk(variant, k.saturating_sub(1), q, span, fact.object, &wrong));
        }
        if opts.base_only {
            continue;
        }

        let alias = subj.aliases.choose(&mut rng).expect("entities have aliases");
        let (q, span) = fill(&rel.templates[0], SUBJECT_SLOT, alias);
        out.push(mk(Variant::SubjectReplaced, 0, q, span, fact.object, &wrong));

        match &rel.inverse {
            Some(inv) => {
                let (q, span) = fill(inv, OBJECT_SLOT, &obj.name);
                let wrong = wrong_for(fact.subject, true, fact.relation, &mut rng);
                out.push(mk(Variant::RelationReversed, 0, q, span, fact.subject, &wrong));
            }
            None => log::info!("relation `{}` has no inverse template; skipping reversed variant", rel.name),
        }

        let hops: Vec<usize> = world.facts_about(fact.object).map(|(i, _)| i).collect();
        if let Some(&hop) = hops.choose(&mut rng) {
            let second = world.facts[hop];
            let rel2 = &world.relations[second.relation];
            let (inner, inner_span) = fill(&rel.chain_phrase(), SUBJECT_SLOT, &subj.name);
            let (q, outer_span) = fill(&rel2.templates[0], SUBJECT_SLOT, &inner);
            let span = (outer_span.0 + inner_span.0, outer_span.0 + inner_span.1);
            let wrong = wrong_for(second.object, false, second.relation, &mut rng);
            out.push(mk(Variant::OneHop, 0, q, span, second.object, &wrong));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::generate_world;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn fill_reports_span() {
        let name = words("kalo miren");
        let (q, span) = fill("who is the rival of [S] ?", SUBJECT_SLOT, &name);
        assert_eq!(q.join(" "), "who is the rival of kalo miren ?");
        assert_eq!(span, (5, 7));
        assert_eq!(&q[span.0..span.1], name.as_slice());
    }

    #[test]
    fn variants_per_fact() {
        let w = generate_world(2, 30, 6, 80).unwrap();
        let s = render_dataset(&w);
        for fi in 0..w.facts.len() {
            let of: Vec<&QASample> = s.iter().filter(|x| x.fact == fi).collect();
            let count = |v| of.iter().filter(|x| x.variant == v).count();
            assert_eq!(count(Variant::Base), 1);
            assert_eq!(count(Variant::Rephrased), 2);
            assert_eq!(count(Variant::SubjectReplaced), 1);
            assert_eq!(count(Variant::RelationReversed), 1);
            assert!(count(Variant::OneHop) <= 1);
            let base = of.iter().find(|x| x.variant == Variant::Base).unwrap();
            for r in of.iter().filter(|x| x.variant == Variant::Rephrased) {
                assert_eq!(r.answer, base.answer);
            }
            let rev = of.iter().find(|x| x.variant == Variant::RelationReversed).unwrap();
            assert_eq!(rev.answer, w.entities[w.facts[fi].subject].name);
        }
        let ids: std::collections::BTreeSet<&str> = s.iter().map(|x| x.id.as_str()).collect();
        assert_eq!(ids.len(), s.len());
    }

    #[test]
    fn one_hop_answers_match_join() {
        let w = generate_world(5, 30, 6, 100).unwrap();
        for s in render_dataset(&w).iter().filter(|x| x.variant == Variant::OneHop) {
            let f = w.facts[s.fact];
            // brute-force join: some fact starting at f.object ends at the answer
            let joined = w
                .facts
                .iter()
                .any(|g| g.subject == f.object && w.entities[g.object].name == s.answer);
            assert!(joined, "{}", s.id);
            assert_eq!(s.subject().unwrap(), w.entities[f.subject].name.as_slice());
        }
    }

    #[test]
    fn perturbed_answers_are_wrong_and_templated() {
        let w = generate_world(7, 30, 6, 80).unwrap();
        for s in render_dataset(&w) {
            assert!(s.perturbed_answers.len() >= 3);
            for p in &s.perturbed_answers {
                assert!(!s.paraphrased_answers.contains(p));
                assert_ne!(p, &s.answer);
                assert_eq!(&p[..2], &["it".to_string(), "is".to_string()]);
            }
            for d in &s.distractors {
                assert_ne!(d, &s.answer);
            }
        }
    }
}
