use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::render::{QASample, Source, Split};
use crate::error::{invalid, Result};
use crate::rng::seeded;

/// Number of forget facts for a fraction of `n_facts`.
pub fn forget_count(n_facts: usize, forget_fraction: f64) -> usize {
    (forget_fraction * n_facts as f64).round() as usize
}

/// Splits at fact granularity: every variant of a fact lands on the same side.
/// Returns `(forget, retain)` with split tags set.
pub fn split_dataset(samples: &[QASample], forget_fraction: f64, seed: u64) -> Result<(Vec<QASample>, Vec<QASample>)> {
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) {
        return Err(invalid(format!("forget_fraction must be in (0, 1), got {forget_fraction}")));
    }
    let facts: Vec<(Source, usize)> = samples
        .iter()
        .map(|s| (s.source, s.fact))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let k = forget_count(facts.len(), forget_fraction);
    if k == 0 || k == facts.len() {
        return Err(invalid(format!(
            "forget_fraction {forget_fraction} on {} facts leaves one side empty",
            facts.len()
        )));
    }
    let mut order = facts.clone();
    order.shuffle(&mut seeded(seed));
    let forget: BTreeSet<(Source, usize)> = order[..k].iter().copied().collect();
    let mut f = Vec::new();
    let mut r = Vec::new();
    for s in samples {
        let mut s = s.clone();
        if forget.contains(&(s.source, s.fact)) {
            s.split = Split::Forget;
            f.push(s);
        } else {
            s.split = Split::Retain;
            r.push(s);
        }
    }
    Ok((f, r))
}

/// Forget samples whose full question-plus-answer word sequence occurs inside
/// some retain sample's question-plus-answer sequence.
pub fn leakage_violations(forget: &[QASample], retain: &[QASample]) -> Vec<(String, String)> {
    let joined = |s: &QASample| format!(" {} | {} ", s.question_text(), s.answer_text());
    let retain_text: Vec<(String, &str)> = retain.iter().map(|r| (joined(r), r.id.as_str())).collect();
    let mut out = Vec::new();
    for f in forget {
        let needle = joined(f);
        for (hay, id) in &retain_text {
            if hay.contains(&needle) {
                out.push((f.id.clone(), id.to_string()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{generate_world, render_dataset};

    #[test]
    fn quarter_of_200_facts() {
        let w = generate_world(0, 60, 8, 200).unwrap();
        let s = render_dataset(&w);
        let (f, r) = split_dataset(&s, 0.25, 9).unwrap();
        let ff: BTreeSet<usize> = f.iter().map(|x| x.fact).collect();
        let rf: BTreeSet<usize> = r.iter().map(|x| x.fact).collect();
        assert_eq!(ff.len(), 50);
        assert!(ff.is_disjoint(&rf));
        assert_eq!(f.len() + r.len(), s.len());
        assert!(leakage_violations(&f, &r).is_empty());
        let (f2, _) = split_dataset(&s, 0.25, 9).unwrap();
        assert_eq!(f, f2);
    }

    #[test]
    fn degenerate_fractions_rejected() {
        let w = generate_world(0, 10, 2, 4).unwrap();
        let s = render_dataset(&w);
        assert!(split_dataset(&s, 0.0, 1).is_err());
        assert!(split_dataset(&s, 1.0, 1).is_err());
        assert!(split_dataset(&s, 0.05, 1).is_err());
    }
}
