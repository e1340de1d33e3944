//! ROUGE and paragraph-attention agreement metrics.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One side had nothing to match, so the score is zero by convention.
    #[serde(default)]
    pub degenerate: bool,
}

impl RougeScore {
    fn from_counts(hits: usize, cand: usize, refr: usize) -> Self {
        if cand == 0 || refr == 0 {
            return Self {
                degenerate: true,
                ..Self::default()
            };
        }
        let precision = hits as f64 / cand as f64;
        let recall = hits as f64 / refr as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            degenerate: false,
        }
    }
}

/// Lower-cased whitespace tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-N with clipped n-gram counts.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    let cand = ngram_counts(candidate, n);
    let refr = ngram_counts(reference, n);
    let hits = cand
        .iter()
        .map(|(g, &c)| c.min(refr.get(g).copied().unwrap_or(0)))
        .sum();
    RougeScore::from_counts(hits, cand.values().sum(), refr.values().sum())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L from the longest common subsequence.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore::from_counts(lcs_len(candidate, reference), candidate.len(), reference.len())
}

/// Document frequencies for a corpus-wide idf.
#[derive(Clone, Debug, Default)]
pub struct DocumentFrequencies {
    pub documents: usize,
    pub counts: HashMap<String, usize>,
}

impl DocumentFrequencies {
    pub fn from_documents<S: AsRef<str>>(docs: &[Vec<S>]) -> Self {
        let mut counts = HashMap::new();
        for d in docs {
            let uniq: HashSet<&str> = d.iter().map(AsRef::as_ref).collect();
            for t in uniq {
                *counts.entry(t.to_string()).or_insert(0) += 1;
            }
        }
        Self {
            documents: docs.len(),
            counts,
        }
    }

    /// Smoothed idf `ln((1 + N) / (1 + df)) + 1`.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.counts.get(term).copied().unwrap_or(0);
        ((1 + self.documents) as f64 / (1 + df) as f64).ln() + 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GoldAttention {
    pub weights: Vec<f64>,
    /// No paragraph shared a term with the summary; weights are uniform.
    pub fallback: bool,
}

fn tfidf<S: AsRef<str>>(doc: &[S], df: &DocumentFrequencies) -> HashMap<String, f64> {
    let mut tf: HashMap<String, f64> = HashMap::new();
    for t in doc {
        *tf.entry(t.as_ref().to_string()).or_insert(0.0) += 1.0;
    }
    tf.into_iter()
        .map(|(t, c)| {
            let w = c * df.idf(&t);
            (t, w)
        })
        .collect()
}

fn sparse_cosine(a: &HashMap<String, f64>, b: &HashMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(t, x)| b.get(t).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Normalized tf-idf cosine similarity of the summary to each paragraph.
/// With `corpus` unset, idf comes from this sample's paragraphs plus summary.
pub fn gold_attention<S: AsRef<str>>(
    summary: &[S],
    paragraphs: &[Vec<S>],
    corpus: Option<&DocumentFrequencies>,
) -> Result<GoldAttention> {
    if paragraphs.iter().all(Vec::is_empty) {
        return Err(Error::Contract("gold attention needs a non-empty paragraph".into()));
    }
    let local;
    let df = match corpus {
        Some(c) => c,
        None => {
            let mut docs: Vec<Vec<&str>> = paragraphs
                .iter()
                .map(|p| p.iter().map(AsRef::as_ref).collect())
                .collect();
            docs.push(summary.iter().map(AsRef::as_ref).collect());
            local = DocumentFrequencies::from_documents(&docs);
            &local
        }
    };
    let s = tfidf(summary, df);
    let sims: Vec<f64> = paragraphs.iter().map(|p| sparse_cosine(&s, &tfidf(p, df))).collect();
    let total: f64 = sims.iter().sum();
    if total > 0.0 {
        return Ok(GoldAttention {
            weights: sims.iter().map(|v| v / total).collect(),
            fallback: false,
        });
    }
    let live = paragraphs.iter().filter(|p| !p.is_empty()).count() as f64;
    Ok(GoldAttention {
        weights: paragraphs
            .iter()
            .map(|p| if p.is_empty() { 0.0 } else { 1.0 / live })
            .collect(),
        fallback: true,
    })
}

/// Cosine similarity of two attention distributions.
pub fn attention_similarity(model: &[f64], gold: &[f64]) -> Result<f64> {
    if model.len() != gold.len() {
        return Err(Error::Contract(format!(
            "attention lengths differ: {} vs {}",
            model.len(),
            gold.len()
        )));
    }
    let dot: f64 = model.iter().zip(gold).map(|(a, b)| a * b).sum();
    let na = model.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = gold.iter().map(|b| b * b).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Contract("cosine similarity of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn rouge_n_examples() {
        let s = rouge_n(&toks("a b c"), &toks("a b c"), 2);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = rouge_n(&toks("a b"), &toks("a b c"), 1);
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.8).abs() < 1e-12);
        let s = rouge_n(&toks("x y"), &toks("a b"), 1);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = rouge_n(&toks("a b"), &toks("a"), 2);
        assert!(s.degenerate && s.f1 == 0.0);
    }

    #[test]
    fn clipping_and_case_folding() {
        let s = rouge_n(&toks("The the THE"), &toks("the cat"), 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn rouge_l_examples() {
        assert_eq!(rouge_l(&toks("a b c"), &toks("a b c")).f1, 1.0);
        let s = rouge_l(&toks("a c b"), &toks("a b c"));
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-15 && (s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(lcs_len(&toks("c b a"), &toks("a b c")), 1);
        let e: Vec<String> = Vec::new();
        assert!(rouge_l(&e, &toks("a")).degenerate);
    }

    #[test]
    fn gold_attention_examples() {
        let one = gold_attention(&toks("a b"), &[toks("a c")], None).unwrap();
        assert_eq!(one.weights, vec![1.0]);
        let g = gold_attention(&toks("x y z"), &[toks("x y z"), toks("p q")], None).unwrap();
        assert_eq!(g.weights, vec![1.0, 0.0]);
        let g = gold_attention(&toks("x y"), &[toks("x q"), toks("x q")], None).unwrap();
        assert!((g.weights[0] - 0.5).abs() < 1e-15 && (g.weights[1] - 0.5).abs() < 1e-15);
        let g = gold_attention(&toks("k"), &[toks("a"), toks("b")], None).unwrap();
        assert!(g.fallback);
        assert_eq!(g.weights, vec![0.5, 0.5]);
        let empty: Vec<Vec<String>> = vec![vec![]];
        assert!(gold_attention(&toks("a"), &empty, None).is_err());
    }

    #[test]
    fn corpus_idf_is_accepted() {
        let docs = vec![toks("a b"), toks("a c"), toks("a d")];
        let df = DocumentFrequencies::from_documents(&docs);
        assert!((df.idf("a") - 1.0).abs() < 1e-15);
        assert!(df.idf("zzz") > df.idf("b"));
        let g = gold_attention(&toks("b"), &[toks("a b"), toks("a c")], Some(&df)).unwrap();
        assert_eq!(g.weights[1], 0.0);
    }

    #[test]
    fn similarity_examples() {
        assert!((attention_similarity(&[0.3, 0.7], &[0.3, 0.7]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(attention_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = attention_similarity(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(attention_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(attention_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }
}
