use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::catalog::{Namer, CATALOG, TITLES};
use crate::error::{invalid, Result};
use crate::rng::{derived, seeded};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub id: usize,
    /// Canonical name as words (`first last`).
    pub name: Vec<String>,
    pub aliases: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub id: usize,
    pub name: String,
    pub noun: String,
    /// Forward question templates with one `[S]` slot; the first is the base form.
    pub templates: Vec<String>,
    /// Question about the subject given the object, with one `[O]` slot.
    pub inverse: Option<String>,
}

impl Relation {
    /// Prefix used to chain this relation inside another question.
    pub fn chain_phrase(&self) -> String {
        format!("the {} of [S]", self.noun)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactWorld {
    pub seed: u64,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    pub idk_pool: Vec<String>,
}

impl FactWorld {
    /// Facts whose subject is `entity`.
    pub fn facts_about(&self, entity: usize) -> impl Iterator<Item = (usize, &Fact)> {
        self.facts.iter().enumerate().filter(move |(_, f)| f.subject == entity)
    }

    /// Fraction of facts whose object is itself the subject of some fact.
    pub fn one_hop_coverage(&self) -> f64 {
        if self.facts.is_empty() {
            return 0.0;
        }
        let n = self.facts.iter().filter(|f| self.facts_about(f.object).next().is_some()).count();
        n as f64 / self.facts.len() as f64
    }

    pub fn object_of(&self, subject: usize, relation: usize) -> Option<usize> {
        self.facts
            .iter()
            .find(|f| f.subject == subject && f.relation == relation)
            .map(|f| f.object)
    }

    /// Checks functional, injective, alias and template invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        let mut objects = std::collections::BTreeSet::new();
        for f in &self.facts {
            if f.subject >= self.entities.len() || f.object >= self.entities.len() || f.relation >= self.relations.len() {
                return Err(invalid("fact references a missing entity or relation"));
            }
            if !seen.insert((f.subject, f.relation)) {
                return Err(invalid(format!("subject {} has two objects for relation {}", f.subject, f.relation)));
            }
            if !objects.insert((f.object, f.relation)) {
                return Err(invalid(format!("object {} repeated for relation {}", f.object, f.relation)));
            }
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.entities {
            if e.aliases.is_empty() || e.aliases.len() > 3 {
                return Err(invalid(format!("entity {} has {} aliases", e.id, e.aliases.len())));
            }
            for n in std::iter::once(&e.name).chain(&e.aliases) {
                if !names.insert(n.clone()) {
                    return Err(invalid(format!("name `{}` used twice", n.join(" "))));
                }
            }
        }
        for r in &self.relations {
            for t in &r.templates {
                if t.matches("[S]").count() != 1 {
                    return Err(invalid(format!("template `{t}` must contain one subject slot")));
                }
            }
        }
        Ok(())
    }
}

fn make_entities(n: usize, namer: &mut Namer, rng: &mut crate::rng::Rng) -> Vec<Entity> {
    (0..n)
        .map(|id| {
            let first = namer.fresh(rng);
            let last = namer.fresh(rng);
            let mut kinds = [0usize, 1, 2];
            kinds.shuffle(rng);
            let count = rng.random_range(1..=3);
            let aliases = kinds[..count]
                .iter()
                .map(|&k| match k {
                    0 => vec![TITLES[rng.random_range(0..TITLES.len())].to_string(), last.clone()],
                    1 => vec![first.clone(), namer.fresh(rng)],
                    _ => vec![namer.fresh(rng)],
                })
                .collect();
            Entity {
                id,
                name: vec![first, last],
                aliases,
            }
        })
        .collect()
}

/// Builds a world sharing `namer` with other worlds so that names stay disjoint.
pub fn generate_world_with(
    namer: &mut Namer,
    seed: u64,
    n_entities: usize,
    n_relations: usize,
    n_facts: usize,
) -> Result<FactWorld> {
    if n_relations == 0 || n_relations > CATALOG.len() {
        return Err(invalid(format!("n_relations must be in 1..={}, got {n_relations}", CATALOG.len())));
    }
    if n_entities < 2 && n_facts > 0 {
        return Err(invalid("facts need at least two entities"));
    }
    // Objects are distinct per relation and never equal to the subject.
    let capacity = n_relations * n_entities.saturating_sub(1);
    if n_facts > capacity {
        return Err(invalid(format!(
            "{n_facts} facts do not fit {n_entities} entities and {n_relations} functional injective relations (max {capacity})"
        )));
    }
    let mut rng = seeded(seed);
    let entities = make_entities(n_entities, namer, &mut rng);

    let mut catalog_ids: Vec<usize> = (0..CATALOG.len()).collect();
    catalog_ids.shuffle(&mut rng);
    catalog_ids.truncate(n_relations);
    catalog_ids.sort_unstable();
    let relations: Vec<Relation> = catalog_ids
        .iter()
        .enumerate()
        .map(|(id, &c)| {
            let spec = &CATALOG[c];
            let mut templates = vec![format!("who is the {} of [S] ?", spec.noun)];
            templates.extend(spec.rephrasings.iter().map(|s| s.to_string()));
            Relation {
                id,
                name: spec.name.to_string(),
                noun: spec.noun.to_string(),
                templates,
                inverse: Some(spec.inverse.to_string()),
            }
        })
        .collect();

    // Choose (subject, relation) slots with at most n_entities - 1 per relation.
    let mut slots: Vec<(usize, usize)> = (0..n_relations)
        .flat_map(|r| (0..n_entities).map(move |s| (s, r)))
        .collect();
    slots.shuffle(&mut rng);
    let mut per_rel = vec![0usize; n_relations];
    let mut chosen = Vec::with_capacity(n_facts);
    for (s, r) in slots {
        if chosen.len() == n_facts {
            break;
        }
        if per_rel[r] + 1 < n_entities {
            per_rel[r] += 1;
            chosen.push((s, r));
        }
    }
    chosen.sort_unstable_by_key(|&(s, r)| (r, s));

    let mut facts = Vec::with_capacity(n_facts);
    for r in 0..n_relations {
        let mut pool: Vec<usize> = (0..n_entities).collect();
        pool.shuffle(&mut rng);
        for &(s, _) in chosen.iter().filter(|&&(_, rr)| rr == r) {
            let k = pool.iter().position(|&o| o != s).expect("at least two unused objects remain");
            facts.push(Fact {
                subject: s,
                relation: r,
                object: pool.remove(k),
            });
        }
    }
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(&mut derived(seed, &[1]));
    let facts = order.into_iter().map(|i| facts[i]).collect();

    let world = FactWorld {
        seed,
        entities,
        relations,
        facts,
        idk_pool: super::catalog::IDK_POOL.iter().map(|s| s.to_string()).collect(),
    };
    world.validate()?;
    Ok(world)
}

pub fn generate_world(seed: u64, n_entities: usize, n_relations: usize, n_facts: usize) -> Result<FactWorld> {
    generate_world_with(&mut Namer::new(), seed, n_entities, n_relations, n_facts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate_world(3, 20, 4, 50).unwrap(), generate_world(3, 20, 4, 50).unwrap());
        assert_ne!(generate_world(3, 20, 4, 50).unwrap(), generate_world(4, 20, 4, 50).unwrap());
    }

    #[test]
    fn empty_and_infeasible() {
        let w = generate_world(1, 10, 3, 0).unwrap();
        assert!(w.facts.is_empty());
        assert!(generate_world(1, 3, 2, 5).is_err());
        assert!(generate_world(1, 3, 2, 4).is_ok());
        assert!(generate_world(1, 10, 13, 5).is_err());
    }

    #[test]
    fn default_world_invariants() {
        let w = generate_world(0, 60, 8, 200).unwrap();
        w.validate().unwrap();
        assert_eq!(w.facts.len(), 200);
        assert!(w.one_hop_coverage() > 0.9);
        assert!(w.entities.iter().all(|e| (1..=3).contains(&e.aliases.len())));
    }
}
