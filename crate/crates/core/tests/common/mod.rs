//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use pht_core::decoding::StepModel;
use pht_core::{ModelConfig, Pht, Source, StepOutput};
use pht_tensor::gradcheck::relative_error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn minimal_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        model_dim: 8,
        ffn_dim: 16,
        num_heads: 2,
        num_layers: 1,
        max_paragraphs: 2,
        max_paragraph_len: 3,
        max_target_len: 3,
        ..ModelConfig::desk()
    }
    .with_dropout(0.0)
}

/// Worst relative error between backpropagated gradients and central
/// differences of the eval-mode loss, over every parameter value.
pub fn model_gradient_error(model: &mut Pht, batch: &[(Source, Vec<usize>)], h: f64) -> f64 {
    let refs: Vec<(&Source, &[usize])> = batch.iter().map(|(s, y)| (s, y.as_slice())).collect();
    let (_, grads) = model.loss_and_grads(&refs, None).unwrap();
    let ids: Vec<_> = model.params().iter().map(|(id, _, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; model.params().get(id).numel()]);
        for i in 0..analytic.len() {
            let orig = model.params().get(id).data()[i];
            model.params_mut().get_mut(id).data_mut()[i] = orig + h;
            let up = model.loss(&refs).unwrap();
            model.params_mut().get_mut(id).data_mut()[i] = orig - h;
            let down = model.loss(&refs).unwrap();
            model.params_mut().get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    worst
}

/// Multiset n-gram overlap computed by explicit removal.
pub fn brute_overlap(cand: &[&str], refr: &[&str], n: usize) -> usize {
    let grams = |t: &[&str]| -> Vec<Vec<String>> {
        if t.len() < n {
            return Vec::new();
        }
        (0..=t.len() - n)
            .map(|i| t[i..i + n].iter().map(|s| s.to_string()).collect())
            .collect()
    };
    let mut pool = grams(refr);
    let mut hits = 0;
    for g in grams(cand) {
        if let Some(pos) = pool.iter().position(|r| *r == g) {
            pool.swap_remove(pos);
            hits += 1;
        }
    }
    hits
}

/// Longest common subsequence by full enumeration of candidate subsequences
/// is exponential, so this uses the textbook quadratic table.
pub fn lcs_table<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn random_distribution(rng: &mut ChaCha8Rng, n: usize, sharpness: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| (rng.gen_range(-1.0..1.0) * sharpness).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

/// Decoder whose outputs are a pseudo-random function of the prefix.
pub struct TableModel {
    pub vocab: usize,
    pub m: usize,
    pub tokens: usize,
    pub seed: u64,
}

impl TableModel {
    fn rng_for(&self, prefix: &[usize]) -> ChaCha8Rng {
        let mut h = self.seed.wrapping_mul(0x100_0000_01b3);
        for &t in prefix {
            h = (h ^ (t as u64 + 1)).wrapping_mul(0x100_0000_01b3).rotate_left(17);
        }
        ChaCha8Rng::seed_from_u64(h)
    }
}

impl StepModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn num_paragraphs(&self) -> usize {
        self.m
    }
    fn num_source_tokens(&self) -> usize {
        self.tokens
    }
    fn step(&self, tokens: &[usize]) -> pht_core::Result<StepOutput> {
        let mut rng = self.rng_for(tokens);
        let p = random_distribution(&mut rng, self.vocab, 3.0);
        Ok(StepOutput {
            log_probs: p.iter().map(|v| v.ln()).collect(),
            paragraph_attention: random_distribution(&mut rng, self.m, 2.5),
            token_attention: random_distribution(&mut rng, self.tokens, 2.5),
        })
    }
}
