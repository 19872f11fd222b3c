use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::{template_words, IDK_POOL};
use super::render::{QASample, Source, Split, Variant};
use crate::lm::tokens;

pub const SPECIALS: [&str; tokens::N_SPECIAL] = ["<pad>", "<bos>", "<eoa>", "<unk>"];

/// Word-level vocabulary: the special tokens first, then every corpus word in sorted order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let set: BTreeSet<String> = words
            .into_iter()
            .filter(|w| !SPECIALS.contains(&w.as_str()))
            .collect();
        let words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(set).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(tokens::UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.words.get(i as usize).cloned().unwrap_or_else(|| SPECIALS[3].to_string()))
            .collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        self.decode(ids).join(" ")
    }

    /// Content hash over the ordered word list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Answer ids with the end-of-answer marker appended.
    pub fn encode_answer(&self, words: &[String]) -> Vec<u32> {
        let mut v = self.encode(words);
        v.push(tokens::EOA);
        v
    }

    pub fn encode_sample(&self, s: &QASample) -> EncodedSample {
        EncodedSample {
            id: s.id.clone(),
            source: s.source,
            fact: s.fact,
            variant: s.variant,
            split: s.split,
            question: self.encode(&s.question),
            answer: self.encode_answer(&s.answer),
            subject_span: s.subject_span,
            paraphrased: s.paraphrased_answers.iter().map(|a| self.encode_answer(a)).collect(),
            perturbed: s.perturbed_answers.iter().map(|a| self.encode_answer(a)).collect(),
            distractors: s.distractors.iter().map(|a| self.encode_answer(a)).collect(),
        }
    }
}

/// Word-level vocabulary over every surface string of the samples plus the
/// fixed refusal pool and instruction templates.
pub fn build_vocab(samples: &[QASample]) -> Vocab {
    let mut words: BTreeSet<String> = template_words();
    for t in IDK_POOL {
        words.extend(t.split_whitespace().map(str::to_string));
    }
    for s in samples {
        let all = std::iter::once(&s.question)
            .chain(std::iter::once(&s.answer))
            .chain(&s.paraphrased_answers)
            .chain(&s.perturbed_answers)
            .chain(&s.distractors);
        for seq in all {
            words.extend(seq.iter().cloned());
        }
    }
    Vocab::from_words(words)
}

/// A sample in token ids. Answers (correct, paraphrased, perturbed and
/// distractor) all end with the end-of-answer token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSample {
    pub id: String,
    pub source: Source,
    pub fact: usize,
    pub variant: Variant,
    pub split: Split,
    pub question: Vec<u32>,
    pub answer: Vec<u32>,
    pub subject_span: Option<(usize, usize)>,
    pub paraphrased: Vec<Vec<u32>>,
    pub perturbed: Vec<Vec<u32>>,
    pub distractors: Vec<Vec<u32>>,
}

impl EncodedSample {
    /// Answer without the end marker, the reference for overlap metrics.
    pub fn reference(&self) -> &[u32] {
        match self.answer.split_last() {
            Some((&tokens::EOA, rest)) => rest,
            _ => &self.answer,
        }
    }

    pub fn subject(&self) -> Option<&[u32]> {
        self.subject_span.map(|(s, e)| &self.question[s..e])
    }

    /// Question indices covered by the subject mention.
    pub fn subject_positions(&self) -> Vec<usize> {
        self.subject_span.map(|(s, e)| (s..e).collect()).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{generate_world, render_dataset};

    #[test]
    fn closed_world_round_trip() {
        let w = generate_world(1, 20, 5, 40).unwrap();
        let samples = render_dataset(&w);
        let v = build_vocab(&samples);
        for s in &samples {
            let ids = v.encode(&s.question);
            assert!(ids.iter().all(|&i| i != tokens::UNK));
            assert_eq!(v.decode(&ids), s.question);
        }
        assert_eq!(v.id("<eoa>"), tokens::EOA);
        assert_eq!(v.id("no-such-word"), tokens::UNK);
        let sorted: Vec<&String> = v.words()[tokens::N_SPECIAL..].iter().collect();
        assert!(sorted.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn encoded_answers_end_with_marker() {
        let w = generate_world(1, 20, 5, 40).unwrap();
        let samples = render_dataset(&w);
        let v = build_vocab(&samples);
        let e = v.encode_sample(&samples[0]);
        assert_eq!(*e.answer.last().unwrap(), tokens::EOA);
        assert_eq!(e.reference().len(), samples[0].answer.len());
        assert!(e.perturbed.iter().all(|p| *p.last().unwrap() == tokens::EOA));
    }
}
