//! Relation templates and the syllable name generator.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::Rng as _;

use crate::rng::Rng;

pub const SUBJECT_SLOT: &str = "[S]";
pub const OBJECT_SLOT: &str = "[O]";

pub(crate) struct RelationSpec {
    pub name: &'static str,
    /// Noun phrase used for `who is the {noun} of X ?` and one-hop chains.
    pub noun: &'static str,
    pub rephrasings: [&'static str; 2],
    pub inverse: &'static str,
}

pub(crate) const CATALOG: [RelationSpec; 12] = [
    RelationSpec {
        name: "mentor",
        noun: "mentor",
        rephrasings: ["who mentored [S] ?", "under whom did [S] train ?"],
        inverse: "whom did [O] mentor ?",
    },
    RelationSpec {
        name: "rival",
        noun: "rival",
        rephrasings: ["whom does [S] see as a rival ?", "who is [S] 's main rival ?"],
        inverse: "who sees [O] as a rival ?",
    },
    RelationSpec {
        name: "employer",
        noun: "employer",
        rephrasings: ["who employs [S] ?", "for whom does [S] work ?"],
        inverse: "whom does [O] employ ?",
    },
    RelationSpec {
        name: "partner",
        noun: "business partner",
        rephrasings: ["with whom does [S] run a business ?", "who shares a company with [S] ?"],
        inverse: "who has [O] as a business partner ?",
    },
    RelationSpec {
        name: "neighbor",
        noun: "neighbor",
        rephrasings: ["who lives next door to [S] ?", "whose house stands beside the home of [S] ?"],
        inverse: "who has [O] living next door ?",
    },
    RelationSpec {
        name: "student",
        noun: "student",
        rephrasings: ["who studies under [S] ?", "whom does [S] teach ?"],
        inverse: "who teaches [O] ?",
    },
    RelationSpec {
        name: "patron",
        noun: "patron",
        rephrasings: ["who funds the work of [S] ?", "who sponsors [S] ?"],
        inverse: "whose work does [O] fund ?",
    },
    RelationSpec {
        name: "successor",
        noun: "successor",
        rephrasings: ["who took over from [S] ?", "who replaced [S] ?"],
        inverse: "whom did [O] take over from ?",
    },
    RelationSpec {
        name: "friend",
        noun: "closest friend",
        rephrasings: ["who does [S] trust most ?", "who is [S] 's best companion ?"],
        inverse: "whose closest friend is [O] ?",
    },
    RelationSpec {
        name: "advisor",
        noun: "advisor",
        rephrasings: ["who advises [S] ?", "whose counsel does [S] follow ?"],
        inverse: "whom does [O] advise ?",
    },
    RelationSpec {
        name: "biographer",
        noun: "biographer",
        rephrasings: ["who wrote the biography of [S] ?", "who chronicled the life of [S] ?"],
        inverse: "whose biography did [O] write ?",
    },
    RelationSpec {
        name: "heir",
        noun: "heir",
        rephrasings: ["who will inherit from [S] ?", "who is named in the will of [S] ?"],
        inverse: "whose heir is [O] ?",
    },
];

pub(crate) const TITLES: [&str; 6] = ["dr", "sir", "lady", "professor", "captain", "madam"];

pub const PARAPHRASE_TEMPLATES: [&str; 2] = ["it is [O]", "the answer is [O]"];
pub const PERTURBED_TEMPLATE: &str = "it is [O]";

pub const IDK_POOL: [&str; 5] = [
    "i do not know",
    "i have no idea about that",
    "i am not sure",
    "that is unknown to me",
    "i cannot answer that",
];

pub const ICL_TEMPLATE: &str = "you are an ai assistant who is supposed to unlearn about [S] and provide answers \
without its knowledge as if you never knew about it . don't tell anyone that you unlearned anything .";

const ONSETS: [&str; 17] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "th",
];
const VOWELS: [&str; 7] = ["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: [&str; 5] = ["", "n", "r", "l", "s"];

/// Every word appearing in fixed templates; generated names avoid these.
pub(crate) fn template_words() -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut add = |s: &str| {
        for w in s.split_whitespace() {
            if w != SUBJECT_SLOT && w != OBJECT_SLOT {
                out.insert(w.to_string());
            }
        }
    };
    for r in &CATALOG {
        add(&format!("who is the {} of", r.noun));
        r.rephrasings.iter().for_each(|t| add(t));
        add(r.inverse);
    }
    TITLES.iter().for_each(|t| add(t));
    PARAPHRASE_TEMPLATES.iter().for_each(|t| add(t));
    IDK_POOL.iter().for_each(|t| add(t));
    add(ICL_TEMPLATE);
    out
}

/// Produces pronounceable words that are unique across everything it has
/// generated, so entities from different worlds never share a name.
#[derive(Debug, Clone)]
pub struct Namer {
    used: BTreeSet<String>,
}

impl Default for Namer {
    fn default() -> Self {
        Self::new()
    }
}

impl Namer {
    pub fn new() -> Self {
        Self { used: template_words() }
    }

    pub fn fresh(&mut self, rng: &mut Rng) -> String {
        loop {
            let syllables = rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS.choose(rng).expect("nonempty"));
                w.push_str(VOWELS.choose(rng).expect("nonempty"));
            }
            w.push_str(CODAS.choose(rng).expect("nonempty"));
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn templates_have_one_slot() {
        for r in &CATALOG {
            for t in r.rephrasings {
                assert_eq!(t.matches(SUBJECT_SLOT).count(), 1, "{t}");
            }
            assert_eq!(r.inverse.matches(OBJECT_SLOT).count(), 1);
            assert_eq!(r.inverse.matches(SUBJECT_SLOT).count(), 0);
        }
        assert_eq!(ICL_TEMPLATE.matches(SUBJECT_SLOT).count(), 1);
    }

    #[test]
    fn names_are_unique_and_not_template_words() {
        let mut n = Namer::new();
        let mut rng = seeded(1);
        let words: BTreeSet<String> = (0..2000).map(|_| n.fresh(&mut rng)).collect();
        assert_eq!(words.len(), 2000);
        assert!(words.is_disjoint(&template_words()));
    }
}
