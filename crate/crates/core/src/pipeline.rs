//! End-to-end glue: alignment labels, predictor training, generation and evaluation.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{extract_label, AttentionPredictor, LabelRecord, LabelledEmbeddings};
use crate::config::ModelConfig;
use crate::data::Sample;
use crate::decoding::{beam_search, build_scorer, compress_source, DecodeConfig, PhtStepper, ScorerKind};
use crate::error::{file_err, Error, Result};
use crate::eval::{attention_similarity, gold_attention, rouge_l, rouge_n, tokenize, DocumentFrequencies};
use crate::model::Pht;
use crate::vocab::Vocabulary;

/// Fails unless a checkpoint was built against `vocab`.
pub fn check_vocab(vocab: &Vocabulary, found: &str, what: &str) -> Result<()> {
    let expected = vocab.hash();
    if expected != found {
        return Err(Error::VocabMismatch(format!(
            "{what} was built with vocabulary {found}, but the supplied vocabulary is {expected}"
        )));
    }
    Ok(())
}

/// Alignment labels of every sample: the paragraph attention of a
/// teacher-forced pass on its reference summary.
pub fn extract_labels(model: &Pht, samples: &[Sample]) -> Result<(Vec<LabelRecord>, Vec<LabelledEmbeddings>)> {
    let mut records = Vec::with_capacity(samples.len());
    let mut pairs = Vec::with_capacity(samples.len());
    for s in samples {
        let enc = model.encode(&s.source(model.config()))?;
        let attention = model.reference_attention(&enc, &s.summary)?;
        let eta = extract_label(&attention, &enc.paragraph_mask())?;
        records.push(LabelRecord {
            id: s.id.clone(),
            m: eta.len(),
            eta: eta.clone(),
        });
        pairs.push(LabelledEmbeddings {
            embeddings: enc.paragraph_embeddings,
            eta,
        });
    }
    Ok((records, pairs))
}

/// Pairs cached labels with freshly computed paragraph embeddings, by sample id.
pub fn attach_embeddings(model: &Pht, samples: &[Sample], labels: &[LabelRecord]) -> Result<Vec<LabelledEmbeddings>> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    labels
        .iter()
        .map(|l| {
            let s = by_id
                .get(l.id.as_str())
                .ok_or_else(|| Error::Input(format!("label for unknown sample {}", l.id)))?;
            let enc = model.encode(&s.source(model.config()))?;
            if enc.num_paragraphs() != l.m {
                return Err(Error::Input(format!(
                    "label for {} covers {} paragraphs, the model sees {}",
                    l.id,
                    l.m,
                    enc.num_paragraphs()
                )));
            }
            Ok(LabelledEmbeddings {
                embeddings: enc.paragraph_embeddings,
                eta: l.eta.clone(),
            })
        })
        .collect()
}

/// One generated summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub summary: String,
    pub tokens: Vec<usize>,
    pub score: f64,
    /// Normalized paragraph attention of the output, over the kept paragraphs.
    pub eta_y: Vec<f64>,
    /// Predicted attention over the kept paragraphs.
    pub eta_hat: Option<Vec<f64>>,
    /// Source indices (title included) that were decoded against.
    pub kept_paragraphs: Vec<usize>,
    pub title_included: bool,
    pub truncated: bool,
    pub degenerate: bool,
}

pub struct Summarizer<'a> {
    model: &'a Pht,
    predictor: Option<&'a AttentionPredictor>,
    vocab: &'a Vocabulary,
    config: DecodeConfig,
}

impl<'a> Summarizer<'a> {
    pub fn new(
        model: &'a Pht,
        predictor: Option<&'a AttentionPredictor>,
        vocab: &'a Vocabulary,
        mut config: DecodeConfig,
    ) -> Result<Self> {
        config.validate()?;
        if predictor.is_none() {
            if config.scorer == ScorerKind::AttAlign {
                return Err(Error::Config(
                    "the attalign scorer requires an attention predictor checkpoint".into(),
                ));
            }
            if config.compress.is_some() {
                return Err(Error::Config(
                    "source compression requires an attention predictor checkpoint".into(),
                ));
            }
        }
        if vocab.len() != model.config().vocab_size {
            return Err(Error::VocabMismatch(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                model.config().vocab_size
            )));
        }
        let limit = model.config().max_target_len;
        if config.max_len > limit {
            log::warn!(
                "max_len {} exceeds the model's target length; using {limit}",
                config.max_len
            );
            config.max_len = limit;
        }
        Ok(Self {
            model,
            predictor,
            vocab,
            config,
        })
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn summarize(&self, sample: &Sample) -> Result<GenerationRecord> {
        let mcfg = self.model.config();
        let source = sample.source(mcfg);
        let mut enc = self.model.encode(&source)?;
        let mut eta_hat = match self.predictor {
            Some(p) => Some(p.predict(&enc.paragraph_embeddings)?),
            None => None,
        };
        let mut kept: Vec<usize> = (0..source.len()).collect();
        if let (Some(s), Some(eta)) = (self.config.compress, eta_hat.as_ref()) {
            let c = compress_source(&source, eta, s)?;
            if c.kept.len() < source.len() {
                enc = self.model.encode(&c.source)?;
            }
            kept = c.kept;
            eta_hat = Some(c.eta_hat);
        }
        let scorer = build_scorer(
            self.config.scorer,
            self.config.beta,
            self.config.str_cov_weight,
            eta_hat.as_deref(),
        )?;
        let stepper = PhtStepper::new(self.model, &enc);
        let out = beam_search(&stepper, &self.config, scorer.as_ref())?;
        if out.degenerate {
            log::warn!("{}: every continuation was blocked; forced end of sequence", sample.id);
        }
        let best = out.best();
        Ok(GenerationRecord {
            id: sample.id.clone(),
            summary: self.vocab.decode(best.content()),
            tokens: best.content().to_vec(),
            score: best.score,
            eta_y: best.eta()?,
            eta_hat,
            kept_paragraphs: kept,
            title_included: sample.title_included(mcfg),
            truncated: best.truncated,
            degenerate: best.degenerate,
        })
    }

    /// Summarizes every sample, spreading them over `threads` workers; output
    /// order follows `samples`.
    pub fn summarize_all(&self, samples: &[Sample], threads: usize) -> Result<Vec<GenerationRecord>> {
        let threads = threads.clamp(1, samples.len().max(1));
        if threads == 1 {
            return samples.iter().map(|s| self.summarize(s)).collect();
        }
        let chunk = samples.len().div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| self.summarize(s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(samples.len());
            for h in handles {
                out.extend(h.join().expect("summarizer thread panicked")?);
            }
            Ok(out)
        })
    }
}

pub fn write_generations(path: impl AsRef<Path>, records: &[GenerationRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(file_err(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(file_err(path))?;
    }
    w.flush().map_err(file_err(path))
}

pub fn read_generations(path: impl AsRef<Path>) -> Result<Vec<GenerationRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(file_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(file_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    /// Cosine between the output attention and the tf-idf reference attention.
    pub attention_cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub mean_rouge_1: f64,
    pub mean_rouge_2: f64,
    pub mean_rouge_l: f64,
    pub mean_attention_cosine: Option<f64>,
    /// Generations whose id is absent from the dataset.
    pub unmatched: usize,
    pub per_sample: Vec<SampleReport>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores generations against the reference summaries in `samples`.
/// `corpus_idf` switches the reference attention to corpus-wide idf.
pub fn evaluate(
    generations: &[GenerationRecord],
    samples: &[Sample],
    vocab: &Vocabulary,
    config: &ModelConfig,
    corpus_idf: bool,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let text_of = |s: &Sample| -> Vec<Vec<String>> {
        s.source(config)
            .paragraphs
            .iter()
            .map(|p| tokenize(&vocab.decode(p)))
            .collect()
    };
    let idf = corpus_idf.then(|| {
        let mut docs = Vec::new();
        for s in samples {
            docs.extend(text_of(s));
            docs.push(tokenize(&vocab.decode(&s.summary)));
        }
        DocumentFrequencies::from_documents(&docs)
    });
    let mut per_sample = Vec::with_capacity(generations.len());
    let mut unmatched = 0;
    for g in generations {
        let Some(sample) = by_id.get(g.id.as_str()) else {
            log::warn!("generation {} has no reference sample", g.id);
            unmatched += 1;
            continue;
        };
        let reference = tokenize(&vocab.decode(&sample.summary));
        let candidate = tokenize(&g.summary);
        let paragraphs = text_of(sample);
        let kept: Vec<Vec<String>> = g
            .kept_paragraphs
            .iter()
            .filter_map(|&i| paragraphs.get(i).cloned())
            .collect();
        let attention_cosine = if kept.len() == g.eta_y.len() {
            match gold_attention(&reference, &kept, idf.as_ref()) {
                Ok(gold) => attention_similarity(&g.eta_y, &gold.weights).ok(),
                Err(_) => None,
            }
        } else {
            None
        };
        per_sample.push(SampleReport {
            id: g.id.clone(),
            rouge_1: rouge_n(&candidate, &reference, 1).f1,
            rouge_2: rouge_n(&candidate, &reference, 2).f1,
            rouge_l: rouge_l(&candidate, &reference).f1,
            attention_cosine,
        });
    }
    Ok(EvalReport {
        samples: per_sample.len(),
        mean_rouge_1: mean(per_sample.iter().map(|r| r.rouge_1)).unwrap_or(0.0),
        mean_rouge_2: mean(per_sample.iter().map(|r| r.rouge_2)).unwrap_or(0.0),
        mean_rouge_l: mean(per_sample.iter().map(|r| r.rouge_l)).unwrap_or(0.0),
        mean_attention_cosine: mean(per_sample.iter().filter_map(|r| r.attention_cosine)),
        unmatched,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{PredictorConfig, PredictorTraining};

    struct Fixture {
        vocab: Vocabulary,
        model: Pht,
        samples: Vec<Sample>,
    }

    fn fixture() -> Fixture {
        let records = vec![
            crate::data::RawRecord {
                id: "a".into(),
                title: "go".into(),
                paragraphs: vec!["ab ba ab".into(), "ca ac".into()],
                summary: "ab ca".into(),
            },
            crate::data::RawRecord {
                id: "b".into(),
                title: String::new(),
                paragraphs: vec!["ba, cc".into(), "ab".into(), "ac ab".into()],
                summary: "cc ab".into(),
            },
        ];
        let vocab = Vocabulary::build(&crate::data::corpus_text(&records), 24).unwrap();
        let config = ModelConfig {
            vocab_size: vocab.len(),
            model_dim: 8,
            ffn_dim: 16,
            num_heads: 2,
            num_layers: 1,
            max_paragraphs: 3,
            max_paragraph_len: 6,
            max_target_len: 8,
            ..ModelConfig::desk()
        }
        .with_dropout(0.0);
        let samples = records
            .iter()
            .map(|r| Sample::from_record(r, &vocab, &config).0)
            .collect();
        Fixture {
            model: Pht::new(config, 5).unwrap(),
            vocab,
            samples,
        }
    }

    fn predictor(f: &Fixture) -> AttentionPredictor {
        let (_, pairs) = extract_labels(&f.model, &f.samples).unwrap();
        let mut p = AttentionPredictor::new(PredictorConfig::for_model(f.model.config()), 1).unwrap();
        p.train(
            &pairs,
            &PredictorTraining {
                steps: 5,
                ..PredictorTraining::default()
            },
        )
        .unwrap();
        p
    }

    #[test]
    fn labels_are_distributions_over_the_source() {
        let f = fixture();
        let (records, pairs) = extract_labels(&f.model, &f.samples).unwrap();
        assert_eq!(records[0].m, 3);
        for r in &records {
            assert!((r.eta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let again = attach_embeddings(&f.model, &f.samples, &records).unwrap();
        assert_eq!(again[1].embeddings, pairs[1].embeddings);
    }

    #[test]
    fn attalign_without_predictor_is_a_config_error() {
        let f = fixture();
        let cfg = DecodeConfig {
            scorer: ScorerKind::AttAlign,
            ..DecodeConfig::default()
        };
        assert!(matches!(
            Summarizer::new(&f.model, None, &f.vocab, cfg),
            Err(Error::Config(_))
        ));
        let compress = DecodeConfig {
            compress: Some(1),
            ..DecodeConfig::default()
        };
        assert!(matches!(
            Summarizer::new(&f.model, None, &f.vocab, compress),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn vanilla_runs_without_predictor_and_threads_agree() {
        let f = fixture();
        let s = Summarizer::new(&f.model, None, &f.vocab, DecodeConfig::default()).unwrap();
        assert_eq!(s.config().max_len, 8);
        let one = s.summarize_all(&f.samples, 1).unwrap();
        let two = s.summarize_all(&f.samples, 2).unwrap();
        assert_eq!(one, two);
        assert_eq!(one[0].kept_paragraphs, vec![0, 1, 2]);
        assert!(one[0].title_included && !one[1].title_included);
        assert!(one[0].eta_hat.is_none());
        assert!(one.iter().all(|r| r.tokens.len() <= 8));
    }

    #[test]
    fn compression_to_one_keeps_the_argmax() {
        let f = fixture();
        let p = predictor(&f);
        let cfg = DecodeConfig {
            scorer: ScorerKind::AttAlign,
            compress: Some(1),
            ..DecodeConfig::default()
        };
        let s = Summarizer::new(&f.model, Some(&p), &f.vocab, cfg).unwrap();
        let r = s.summarize(&f.samples[1]).unwrap();
        let enc = f.model.encode(&f.samples[1].source(f.model.config())).unwrap();
        let eta = p.predict(&enc.paragraph_embeddings).unwrap();
        let argmax = (0..eta.len()).fold(0, |b, i| if eta[i] > eta[b] { i } else { b });
        assert_eq!(r.kept_paragraphs, vec![argmax]);
        assert_eq!(r.eta_hat, Some(vec![1.0]));
        assert_eq!(r.eta_y, vec![1.0]);
    }

    #[test]
    fn vocab_hash_mismatch_is_fatal() {
        let f = fixture();
        assert!(check_vocab(&f.vocab, &f.vocab.hash(), "model").is_ok());
        assert!(matches!(
            check_vocab(&f.vocab, "0000", "model"),
            Err(Error::VocabMismatch(_))
        ));
    }

    #[test]
    fn generations_round_trip_and_evaluate() {
        let f = fixture();
        let s = Summarizer::new(&f.model, None, &f.vocab, DecodeConfig::default()).unwrap();
        let gens = s.summarize_all(&f.samples, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        write_generations(&path, &gens).unwrap();
        assert_eq!(read_generations(&path).unwrap(), gens);

        let mut perfect = gens.clone();
        for (g, smp) in perfect.iter_mut().zip(&f.samples) {
            g.summary = f.vocab.decode(&smp.summary);
        }
        let report = evaluate(&perfect, &f.samples, &f.vocab, f.model.config(), false).unwrap();
        assert_eq!(report.samples, 2);
        assert_eq!(
            (report.mean_rouge_1, report.mean_rouge_2, report.mean_rouge_l),
            (1.0, 1.0, 1.0)
        );
        assert!(report.mean_attention_cosine.is_some());
        let corpus = evaluate(&gens, &f.samples, &f.vocab, f.model.config(), true).unwrap();
        assert!(corpus.per_sample.iter().all(|r| (0.0..=1.0).contains(&r.rouge_1)));
        let mut stray = gens;
        stray[0].id = "zzz".into();
        assert_eq!(
            evaluate(&stray, &f.samples, &f.vocab, f.model.config(), false)
                .unwrap()
                .unmatched,
            1
        );
    }
}
