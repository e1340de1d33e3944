//! Line-delimited JSON datasets and the synthetic toy corpus.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{file_err, Error, Result};
use crate::model::Source;
use crate::vocab::Vocabulary;

/// One dataset line as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub paragraphs: Vec<String>,
    pub summary: String,
}

/// A tokenized, truncated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub title: Vec<usize>,
    /// Paragraphs in rank order.
    pub paragraphs: Vec<Vec<usize>>,
    pub summary: Vec<usize>,
}

impl Sample {
    /// Tokenizes `record`, keeping at most `max_paragraphs` paragraphs of at
    /// most `max_paragraph_len` tokens. Returns the sample and how many
    /// truncations were applied.
    pub fn from_record(record: &RawRecord, vocab: &Vocabulary, config: &ModelConfig) -> (Self, usize) {
        let mut truncations = 0;
        let mut clip = |mut ids: Vec<usize>| {
            if ids.len() > config.max_paragraph_len {
                ids.truncate(config.max_paragraph_len);
                truncations += 1;
            }
            ids
        };
        let title = clip(vocab.encode(&record.title));
        let paragraphs = record
            .paragraphs
            .iter()
            .take(config.max_paragraphs)
            .map(|p| clip(vocab.encode(p)))
            .collect();
        if record.paragraphs.len() > config.max_paragraphs {
            truncations += 1;
        }
        let sample = Self {
            id: record.id.clone(),
            title,
            paragraphs,
            summary: vocab.encode(&record.summary),
        };
        (sample, truncations)
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> RawRecord {
        RawRecord {
            id: self.id.clone(),
            title: vocab.decode(&self.title),
            paragraphs: self.paragraphs.iter().map(|p| vocab.decode(p)).collect(),
            summary: vocab.decode(&self.summary),
        }
    }

    /// Model input: the title as rank 0 when enabled and non-empty, then the
    /// leading paragraphs, never more than `max_paragraphs` in total.
    pub fn source(&self, config: &ModelConfig) -> Source {
        let mut paragraphs = Vec::with_capacity(config.max_paragraphs);
        if config.include_title && !self.title.is_empty() {
            paragraphs.push(self.title.clone());
        }
        let room = config.max_paragraphs - paragraphs.len();
        paragraphs.extend(self.paragraphs.iter().take(room).cloned());
        Source::new(paragraphs)
    }

    /// Whether [`Sample::source`] puts the title first.
    pub fn title_included(&self, config: &ModelConfig) -> bool {
        config.include_title && !self.title.is_empty()
    }
}

/// Loaded samples plus the warnings raised while reading them.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub malformed: usize,
    pub truncations: usize,
}

/// Parses every non-blank line; malformed lines are skipped and counted.
pub fn read_records(path: impl AsRef<Path>) -> Result<(Vec<RawRecord>, usize)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(file_err(path))?;
    let mut records = Vec::new();
    let mut malformed = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("{}:{}: skipping malformed record: {e}", path.display(), lineno + 1);
                malformed += 1;
            }
        }
    }
    Ok((records, malformed))
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary, config: &ModelConfig) -> Result<Dataset> {
    let path = path.as_ref();
    let (records, malformed) = read_records(path)?;
    let mut out = Dataset {
        malformed,
        ..Dataset::default()
    };
    for r in &records {
        let (s, t) = Sample::from_record(r, vocab, config);
        if t > 0 {
            log::warn!("{}: record {} truncated", path.display(), r.id);
        }
        out.truncations += t;
        out.samples.push(s);
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[RawRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(file_err(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(file_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample], vocab: &Vocabulary) -> Result<()> {
    let records: Vec<RawRecord> = samples.iter().map(|s| s.to_record(vocab)).collect();
    write_records(path, &records)
}

/// All text in `records`, one string per title, paragraph and summary.
pub fn corpus_text(records: &[RawRecord]) -> Vec<&str> {
    let mut out = Vec::new();
    for r in records {
        out.push(r.title.as_str());
        out.extend(r.paragraphs.iter().map(String::as_str));
        out.push(r.summary.as_str());
    }
    out
}

/// Shape of the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    pub samples: usize,
    pub min_paragraphs: usize,
    pub max_paragraphs: usize,
    pub paragraph_words: usize,
    /// Words copied from each key paragraph into the summary.
    pub key_words: usize,
    /// Upper bound on key paragraphs per sample (at least one).
    pub max_keys: usize,
    pub lexicon_size: usize,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            samples: 20,
            min_paragraphs: 3,
            max_paragraphs: 5,
            paragraph_words: 8,
            key_words: 3,
            max_keys: 2,
            lexicon_size: 80,
            seed: 7,
        }
    }
}

/// Where the summary of a toy record came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRecord {
    pub record: RawRecord,
    /// Indices into `record.paragraphs` whose leading words form the summary.
    pub key_paragraphs: Vec<usize>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ne", "ru", "ta", "vi", "so", "pe", "du", "go", "ze", "ha", "bo", "fi", "wu",
];

fn lexicon(size: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("syllables")).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Generates records whose summary is the first `key_words` words of one
/// or more key paragraphs, joined by commas. Summary words are unique within
/// a sample and never appear in the other paragraphs.
pub fn generate_toy_corpus(config: &ToyCorpusConfig) -> Result<Vec<ToyRecord>> {
    let c = config;
    if c.min_paragraphs == 0 || c.min_paragraphs > c.max_paragraphs || c.max_keys == 0 {
        return Err(Error::Config(
            "toy corpus needs 1 <= min_paragraphs <= max_paragraphs and max_keys >= 1".into(),
        ));
    }
    if c.key_words == 0 || c.key_words > c.paragraph_words {
        return Err(Error::Config("key_words must be in 1..=paragraph_words".into()));
    }
    let budget = c.key_words * c.max_keys.min(c.max_paragraphs) + 4;
    if c.lexicon_size < budget {
        return Err(Error::Config(format!("lexicon_size must be at least {budget}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let words = lexicon(c.lexicon_size, &mut rng);
    let mut out = Vec::with_capacity(c.samples);
    for i in 0..c.samples {
        let m = rng.gen_range(c.min_paragraphs..=c.max_paragraphs);
        let keys_n = rng.gen_range(1..=c.max_keys.min(m));
        let mut keys: Vec<usize> = rand::seq::index::sample(&mut rng, m, keys_n).into_vec();
        keys.sort_unstable();
        let mut pool: Vec<&str> = words.iter().map(String::as_str).collect();
        pool.shuffle(&mut rng);
        let (key_pool, filler) = pool.split_at(c.key_words * keys_n);
        let mut paragraphs = Vec::with_capacity(m);
        let mut pieces = Vec::with_capacity(keys_n);
        for p in 0..m {
            let mut sentence: Vec<&str> = Vec::with_capacity(c.paragraph_words);
            if let Some(k) = keys.iter().position(|&q| q == p) {
                let lead = &key_pool[k * c.key_words..(k + 1) * c.key_words];
                sentence.extend_from_slice(lead);
                pieces.push(lead.join(" "));
            }
            while sentence.len() < c.paragraph_words {
                sentence.push(filler.choose(&mut rng).expect("filler words"));
            }
            paragraphs.push(sentence.join(" "));
        }
        let title = (0..2)
            .map(|_| *filler.choose(&mut rng).expect("filler words"))
            .collect::<Vec<_>>()
            .join(" ");
        out.push(ToyRecord {
            record: RawRecord {
                id: format!("toy-{i:04}"),
                title,
                paragraphs,
                summary: pieces.join(", "),
            },
            key_paragraphs: keys,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> ModelConfig {
        ModelConfig {
            max_paragraphs: 3,
            max_paragraph_len: 4,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "").unwrap();
        let vocab = Vocabulary::build(&["ab"], 8).unwrap();
        let d = load_dataset(&path, &vocab, &config()).unwrap();
        assert!(d.samples.is_empty());
        assert_eq!((d.malformed, d.truncations), (0, 0));
    }

    #[test]
    fn missing_file_names_the_path() {
        let vocab = Vocabulary::build(&["ab"], 8).unwrap();
        let err = load_dataset("/nonexistent/x.jsonl", &vocab, &config()).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.jsonl"));
    }

    #[test]
    fn malformed_lines_are_counted_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = r#"{"id":"a","title":"t","paragraphs":["x y"],"summary":"x"}"#;
        std::fs::write(&path, format!("{good}\nnot json\n\n{{\"id\":\"b\"}}\n{good}\n")).unwrap();
        let vocab = Vocabulary::build(&["t x y"], 12).unwrap();
        let d = load_dataset(&path, &vocab, &config()).unwrap();
        assert_eq!(d.samples.len(), 2);
        assert_eq!(d.malformed, 2);
    }

    #[test]
    fn long_records_are_truncated_in_order() {
        let record = RawRecord {
            id: "r".into(),
            title: String::new(),
            paragraphs: (0..45).map(|i| format!("p{i} a b c d e")).collect(),
            summary: "a".into(),
        };
        let text: Vec<&str> = corpus_text(std::slice::from_ref(&record));
        let vocab = Vocabulary::build(&text, 40).unwrap();
        let (s, t) = Sample::from_record(&record, &vocab, &config());
        assert_eq!(s.paragraphs.len(), 3);
        assert_eq!(t, 4);
        for (i, p) in s.paragraphs.iter().enumerate() {
            let full = vocab.encode(&record.paragraphs[i]);
            assert_eq!(p[..], full[..4]);
        }
    }

    #[test]
    fn write_then_load_round_trips() {
        let toy = generate_toy_corpus(&ToyCorpusConfig {
            samples: 6,
            ..ToyCorpusConfig::default()
        })
        .unwrap();
        let records: Vec<RawRecord> = toy.into_iter().map(|t| t.record).collect();
        let vocab = Vocabulary::build(&corpus_text(&records), 300).unwrap();
        let cfg = ModelConfig {
            max_paragraph_len: 100,
            ..ModelConfig::desk()
        };
        let samples: Vec<Sample> = records.iter().map(|r| Sample::from_record(r, &vocab, &cfg).0).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &samples, &vocab).unwrap();
        let back = load_dataset(&path, &vocab, &cfg).unwrap();
        assert_eq!(back.samples, samples);
        assert_eq!(back.truncations, 0);
    }

    #[test]
    fn source_puts_title_first_within_limit() {
        let s = Sample {
            id: "x".into(),
            title: vec![7],
            paragraphs: vec![vec![8], vec![9], vec![10]],
            summary: vec![8],
        };
        let mut cfg = config();
        let src = s.source(&cfg);
        assert_eq!(src.paragraphs, vec![vec![7], vec![8], vec![9]]);
        assert_eq!(src.ranks, vec![0, 1, 2]);
        cfg.include_title = false;
        assert_eq!(s.source(&cfg).paragraphs, vec![vec![8], vec![9], vec![10]]);
        assert!(!s.title_included(&cfg));
    }

    #[test]
    fn toy_corpus_is_deterministic_and_grounded() {
        let cfg = ToyCorpusConfig::default();
        let a = generate_toy_corpus(&cfg).unwrap();
        assert_eq!(a, generate_toy_corpus(&cfg).unwrap());
        assert_eq!(a.len(), 20);
        for t in &a {
            let r = &t.record;
            let summary_words: Vec<&str> = r.summary.split([' ', ',']).filter(|w| !w.is_empty()).collect();
            assert_eq!(summary_words.len(), t.key_paragraphs.len() * cfg.key_words);
            for (i, p) in r.paragraphs.iter().enumerate() {
                let words: Vec<&str> = p.split(' ').collect();
                let shared = words.iter().filter(|w| summary_words.contains(w)).count();
                if t.key_paragraphs.contains(&i) {
                    assert_eq!(shared, cfg.key_words);
                } else {
                    assert_eq!(shared, 0);
                }
            }
        }
        let other = generate_toy_corpus(&ToyCorpusConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, other);
    }
}
