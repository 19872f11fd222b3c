//! Letter-level edits of subject words for discrete-token perturbation.

use rand::Rng as _;

use super::vocab::{EncodedSample, Vocab};
use crate::error::{invalid, Result};
use crate::rng::Rng;

const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LetterEdit {
    Delete,
    Alter,
    Add,
}

pub fn apply_edit(word: &str, edit: LetterEdit, rng: &mut Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    match edit {
        LetterEdit::Delete if !chars.is_empty() => {
            chars.remove(rng.random_range(0..chars.len()));
        }
        LetterEdit::Alter if !chars.is_empty() => {
            let i = rng.random_range(0..chars.len());
            chars[i] = LETTERS[rng.random_range(0..LETTERS.len())] as char;
        }
        _ => {
            let i = rng.random_range(0..=chars.len());
            chars.insert(i, LETTERS[rng.random_range(0..LETTERS.len())] as char);
        }
    }
    chars.into_iter().collect()
}

/// Rewrites one subject word with a random letter edit and re-tokenizes the
/// question. Edits that reproduce the original word are redrawn up to ten
/// times, after which a letter is deleted outright.
pub fn discrete_rewrite(sample: &EncodedSample, vocab: &Vocab, rng: &mut Rng) -> Result<EncodedSample> {
    let (s, e) = sample
        .subject_span
        .filter(|(s, e)| s < e)
        .ok_or_else(|| invalid(format!("sample {} has no subject span", sample.id)))?;
    let words = vocab.decode(&sample.question);
    let pos = rng.random_range(s..e);
    let original = &words[pos];
    let mut edited = None;
    for _ in 0..10 {
        let edit = [LetterEdit::Delete, LetterEdit::Alter, LetterEdit::Add][rng.random_range(0..3)];
        let w = apply_edit(original, edit, rng);
        if &w != original && !w.is_empty() {
            edited = Some(w);
            break;
        }
    }
    let edited = match edited {
        Some(w) => w,
        None => {
            let w = apply_edit(original, LetterEdit::Delete, rng);
            if w.is_empty() {
                apply_edit(original, LetterEdit::Add, rng)
            } else {
                w
            }
        }
    };
    let mut words = words;
    words[pos] = edited;
    let mut out = sample.clone();
    out.question = vocab.encode(&words);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factworld::{build_vocab, generate_world, render_dataset};
    use crate::lm::tokens;
    use crate::rng::seeded;

    #[test]
    fn edits_change_the_word() {
        let mut rng = seeded(3);
        for _ in 0..200 {
            assert_ne!(apply_edit("kalo", LetterEdit::Delete, &mut rng), "kalo");
            assert_ne!(apply_edit("kalo", LetterEdit::Add, &mut rng), "kalo");
        }
    }

    #[test]
    fn rewrite_changes_question_text() {
        let w = generate_world(1, 20, 5, 30).unwrap();
        let samples = render_dataset(&w);
        let v = build_vocab(&samples);
        let mut rng = seeded(4);
        for s in samples.iter().take(40) {
            let e = v.encode_sample(s);
            let r = discrete_rewrite(&e, &v, &mut rng).unwrap();
            assert_eq!(r.question.len(), e.question.len());
            assert_ne!(v.decode_text(&r.question), s.question_text());
            let (a, b) = s.subject_span.unwrap();
            for i in (0..e.question.len()).filter(|i| !(a..b).contains(i)) {
                assert_eq!(r.question[i], e.question[i]);
            }
            // edited words almost always fall outside the closed vocabulary
            assert!(r.question.iter().filter(|&&t| t == tokens::UNK).count() <= 1);
        }
    }
}
