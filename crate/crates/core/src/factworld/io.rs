//! Line-delimited JSON export of samples plus the vocabulary and worlds.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::render::QASample;
use super::vocab::Vocab;
use super::world::FactWorld;
use super::{Corpus, CorpusConfig};
use crate::error::{Error, Result};

pub struct CorpusFiles;

impl CorpusFiles {
    pub const SAMPLES: &'static str = "samples.jsonl";
    pub const VOCAB: &'static str = "vocab.txt";
    pub const WORLD: &'static str = "world.json";

    pub fn all() -> [&'static str; 3] {
        [Self::SAMPLES, Self::VOCAB, Self::WORLD]
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    config: CorpusConfig,
    vocab_hash: String,
    world: FactWorld,
    aux: Vec<FactWorld>,
}

pub fn write_samples(path: &Path, samples: &[QASample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<QASample>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes the corpus files into `dir` and returns their paths.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let samples = dir.join(CorpusFiles::SAMPLES);
    write_samples(&samples, &corpus.samples)?;
    let vocab = dir.join(CorpusFiles::VOCAB);
    fs::write(&vocab, corpus.vocab.words().join("\n") + "\n")?;
    let world = dir.join(CorpusFiles::WORLD);
    let wf = WorldFile {
        config: corpus.config.clone(),
        vocab_hash: corpus.vocab.hash(),
        world: corpus.world.clone(),
        aux: corpus.aux.clone(),
    };
    fs::write(&world, serde_json::to_string_pretty(&wf)? + "\n")?;
    Ok(vec![samples, vocab, world])
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let world_path = dir.join(CorpusFiles::WORLD);
    if !world_path.exists() {
        return Err(Error::MissingInput(world_path));
    }
    let wf: WorldFile = serde_json::from_slice(&fs::read(&world_path)?)?;
    let samples = read_samples(&dir.join(CorpusFiles::SAMPLES))?;
    let vocab_path = dir.join(CorpusFiles::VOCAB);
    if !vocab_path.exists() {
        return Err(Error::MissingInput(vocab_path));
    }
    let words: Vec<String> = fs::read_to_string(&vocab_path)?.lines().map(str::to_string).collect();
    let vocab = Vocab::from_words(words);
    if vocab.hash() != wf.vocab_hash {
        return Err(Error::VocabMismatch {
            checkpoint: wf.vocab_hash,
            dataset: vocab.hash(),
        });
    }
    Ok(Corpus {
        config: wf.config,
        world: wf.world,
        aux: wf.aux,
        samples,
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_stable() {
        let cfg = CorpusConfig {
            n_entities: 20,
            n_facts: 40,
            aux_entities: 10,
            aux_facts: 8,
            ..Default::default()
        };
        let c = Corpus::generate(&cfg).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_corpus(a.path(), &c).unwrap();
        let back = read_corpus(a.path()).unwrap();
        assert_eq!(back.samples, c.samples);
        assert_eq!(back.vocab, c.vocab);
        write_corpus(b.path(), &Corpus::generate(&cfg).unwrap()).unwrap();
        for f in CorpusFiles::all() {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
