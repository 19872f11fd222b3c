//! Logit-lens rank curves.

use crate::autograd::Graph;
use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::factworld::EncodedSample;
use crate::lm::{bind, forward_hidden, lens_logits, prompt, ModelParams, ProbDist, SeqSpec};

/// Rank (0 = most likely, ties by id) of the first answer token at the last
/// question position, read through the final norm and unembedding after
/// every block.
pub fn layer_rank_curve(params: &ModelParams, sample: &EncodedSample) -> Result<Vec<usize>> {
    let first = *sample
        .answer
        .first()
        .ok_or_else(|| invalid(format!("sample {} has an empty answer", sample.id)))?;
    let seq = prompt(&sample.question);
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let h = forward_hidden(&mut g, params, &bound, &[SeqSpec::plain(&seq)])?;
    let mut ranks = Vec::with_capacity(h.hidden.len());
    for &layer in &h.hidden {
        let last = g.select_rows(layer, &[seq.len() - 1])?;
        let logits = lens_logits(&mut g, params, &bound, last)?;
        ranks.push(ProbDist::from_logits(g.value(logits).row(0)).rank_of(first));
    }
    Ok(ranks)
}

pub fn layer_rank_curves(params: &ModelParams, samples: &[EncodedSample], exec: Exec) -> Result<Vec<Vec<usize>>> {
    exec.try_map(samples, |s| layer_rank_curve(params, s))
}

/// Mean rank per layer over samples.
pub fn mean_curve(curves: &[Vec<usize>]) -> Vec<f64> {
    let Some(first) = curves.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; first.len()];
    for c in curves {
        for (o, &r) in out.iter_mut().zip(c) {
            *o += r as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= curves.len() as f64);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{Source, Split, Variant};
    use crate::lm::{logit_lens, ModelConfig};

    #[test]
    fn matches_logit_lens() {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 3,
            n_heads: 2,
            context_len: 12,
            d_ff: 16,
            ..Default::default()
        };
        let p = ModelParams::init(cfg, 4).unwrap();
        let s = EncodedSample {
            id: "x".into(),
            source: Source::Main,
            fact: 0,
            variant: Variant::Base,
            split: Split::Forget,
            question: vec![5, 6, 7],
            answer: vec![9, 2],
            subject_span: Some((1, 2)),
            paraphrased: vec![],
            perturbed: vec![],
            distractors: vec![],
        };
        let c = layer_rank_curve(&p, &s).unwrap();
        assert_eq!(c.len(), 3);
        for (l, &r) in c.iter().enumerate() {
            assert_eq!(r, logit_lens(&p, &prompt(&s.question), l).unwrap().rank_of(9));
            assert!(r < 20);
        }
    }
}
