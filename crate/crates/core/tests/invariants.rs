mod common;

use std::collections::HashSet;

use common::{brute_overlap, lcs_table, random_distribution, TableModel};
use pht_core::align::{att_align_score, extract_label, AttentionPredictor, PredictorConfig, PredictorTraining};
use pht_core::data::{corpus_text, generate_toy_corpus, RawRecord, Sample, ToyCorpusConfig};
use pht_core::decoding::{
    beam_search, build_scorer, compress_source, Constraints, DecodeConfig, Features, Scorer, ScorerKind,
};
use pht_core::eval::{gold_attention, lcs_len, rouge_l, rouge_n, DocumentFrequencies};
use pht_core::pipeline::{extract_labels, Summarizer};
use pht_core::train::{checkpoint_name, TrainConfig, Trainer};
use pht_core::vocab::{COMMA, EOS};
use pht_core::{ModelConfig, Pht, Source, Vocabulary};
use pht_tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
        let t: f64 = v.iter().sum();
        v.iter().map(|x| x / t).collect()
    })
}

struct Shifted {
    inner: Box<dyn Scorer>,
    shift: f64,
}

impl Scorer for Shifted {
    fn score(&self, f: &Features<'_>) -> f64 {
        self.inner.score(f) + self.shift
    }
    fn upper_bound(&self, f: &Features<'_>, max_len: usize) -> f64 {
        self.inner.upper_bound(f, max_len) + self.shift
    }
}

fn scorer_kind() -> impl Strategy<Value = ScorerKind> {
    prop::sample::select(ScorerKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn align_score_is_monotone_and_ignores_excess(
        (eta_y, eta_hat, p, bump) in (1usize..7).prop_flat_map(|m| (distribution(m), distribution(m), 0..m, 0.0f64..0.5))
    ) {
        let base = att_align_score(&eta_y, &eta_hat).unwrap();
        let mut up = eta_y.clone();
        up[p] += bump;
        prop_assert!(att_align_score(&up, &eta_hat).unwrap() >= base);
        // mass above the prediction earns nothing further
        let mut capped = eta_y.clone();
        capped[p] = capped[p].max(eta_hat[p]);
        let mut over = capped.clone();
        over[p] += bump;
        prop_assert_eq!(att_align_score(&capped, &eta_hat).unwrap(), att_align_score(&over, &eta_hat).unwrap());
    }

    #[test]
    fn labels_ignore_positive_rescaling(k in 1usize..8, m in 1usize..6, scale in 0.01f64..100.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<f64> = (0..k).flat_map(|_| random_distribution(&mut rng, m, 2.0)).collect();
        let a = Tensor::new(vec![k, m], rows.clone()).unwrap();
        let b = Tensor::new(vec![k, m], rows.iter().map(|v| v * scale).collect()).unwrap();
        let mask = vec![true; m];
        let (la, lb) = (extract_label(&a, &mask).unwrap(), extract_label(&b, &mask).unwrap());
        for (x, y) in la.iter().zip(&lb) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn predictor_outputs_a_distribution(m in 1usize..9, seed in 0u64..20, values in prop::collection::vec(-50.0f64..50.0, 8 * 8)) {
        let cfg = PredictorConfig { model_dim: 8, ffn_dim: 16, num_heads: 2, num_layers: 2, dropout: 0.5, layer_norm_eps: 1e-6 };
        let p = AttentionPredictor::new(cfg, seed).unwrap();
        let phi = Tensor::new(vec![m, 8], values[..m * 8].to_vec()).unwrap();
        let eta = p.predict(&phi).unwrap();
        prop_assert_eq!(eta.len(), m);
        prop_assert!(eta.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((eta.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shifting_every_score_keeps_the_ranking(kind in scorer_kind(), shift in -50.0f64..50.0, seed in any::<u64>(), beam in 1usize..6) {
        let model = TableModel { vocab: 7, m: 3, tokens: 4, seed };
        let eta_hat = [0.5, 0.3, 0.2];
        let cfg = DecodeConfig { beam_size: beam, max_len: 5, scorer: kind, ..DecodeConfig::default() };
        let plain = build_scorer(kind, 0.7, 1.0, Some(&eta_hat)).unwrap();
        let shifted = Shifted { inner: build_scorer(kind, 0.7, 1.0, Some(&eta_hat)).unwrap(), shift };
        let a = beam_search(&model, &cfg, plain.as_ref()).unwrap();
        let b = beam_search(&model, &cfg, &shifted).unwrap();
        let ta: Vec<_> = a.hypotheses.iter().map(|h| h.tokens.clone()).collect();
        let tb: Vec<_> = b.hypotheses.iter().map(|h| h.tokens.clone()).collect();
        prop_assert_eq!(ta, tb);
    }

    #[test]
    fn constrained_outputs_obey_the_rules(kind in scorer_kind(), seed in any::<u64>(), beam in 1usize..6, max_len in 1usize..25) {
        let model = TableModel { vocab: 8, m: 2, tokens: 3, seed };
        let cfg = DecodeConfig { beam_size: beam, max_len, scorer: kind, constraints: Constraints::default(), ..DecodeConfig::default() };
        let scorer = build_scorer(kind, 0.8, 1.0, Some(&[0.6, 0.4])).unwrap();
        let out = beam_search(&model, &cfg, scorer.as_ref()).unwrap();
        prop_assert!(out.steps <= max_len);
        for h in &out.hypotheses {
            prop_assert!(h.tokens.len() <= max_len);
            let y: Vec<usize> = h.tokens.iter().copied().filter(|&t| t != EOS).collect();
            let mut seen = HashSet::new();
            for w in y.windows(3) {
                prop_assert!(seen.insert(w.to_vec()), "repeated trigram {:?} in {:?}", w, y);
            }
            for t in 0..y.len() {
                for back in 1..=2 {
                    if t >= back && y[t] != COMMA {
                        prop_assert_ne!(y[t], y[t - back]);
                    }
                }
            }
        }
    }

    #[test]
    fn compression_keeps_order(m in 1usize..8, s in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eta = random_distribution(&mut rng, m, 3.0);
        let src = Source::new((0..m).map(|i| vec![5 + i]).collect());
        let c = compress_source(&src, &eta, s).unwrap();
        prop_assert_eq!(c.kept.len(), s.min(m));
        prop_assert!(c.kept.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(c.source.ranks.windows(2).all(|w| w[0] < w[1]));
        prop_assert!((c.eta_hat.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_bounds_identity_and_symmetry(
        a in prop::collection::vec(0u8..5, 0..20),
        b in prop::collection::vec(0u8..5, 0..20),
        n in 1usize..3,
    ) {
        for s in [rouge_n(&a, &b, n), rouge_l(&a, &b)] {
            for v in [s.precision, s.recall, s.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        if a.len() >= n {
            prop_assert_eq!(rouge_n(&a, &a, n).f1, 1.0);
        }
        prop_assert!((rouge_n(&a, &b, n).f1 - rouge_n(&b, &a, n).f1).abs() < 1e-15);
        prop_assert!((rouge_l(&a, &b).f1 - rouge_l(&b, &a).f1).abs() < 1e-15);
    }

    #[test]
    fn rouge_matches_brute_force(
        a in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..=20),
        b in prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..=20),
        n in 1usize..3,
    ) {
        let s = rouge_n(&a, &b, n);
        let hits = brute_overlap(&a, &b, n);
        if a.len() >= n && b.len() >= n {
            prop_assert_eq!(s.precision, hits as f64 / (a.len() + 1 - n) as f64);
            prop_assert_eq!(s.recall, hits as f64 / (b.len() + 1 - n) as f64);
        } else {
            prop_assert!(s.degenerate);
        }
    }

    #[test]
    fn lcs_matches_table(a in prop::collection::vec(0u8..4, 0..=30), b in prop::collection::vec(0u8..4, 0..=30)) {
        prop_assert_eq!(lcs_len(&a, &b), lcs_table(&a, &b));
    }

    #[test]
    fn duplicating_an_unrelated_paragraph_keeps_the_ranking(
        paras in prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..6), 2..5),
        summary in prop::collection::vec(prop::sample::select(vec!["a", "b", "c"]), 1..6),
        background in prop::collection::vec(prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "x"]), 1..6), 0..6),
    ) {
        let idf = DocumentFrequencies::from_documents(&background);
        let base = gold_attention(&summary, &paras, Some(&idf)).unwrap();
        prop_assume!(!base.fallback);
        let unrelated = vec!["x", "y"];
        let mut more = paras.clone();
        more.push(unrelated.clone());
        more.push(unrelated);
        let dup = gold_attention(&summary, &more, Some(&idf)).unwrap();
        let m = paras.len();
        for i in 0..m {
            for j in 0..m {
                if base.weights[i] > base.weights[j] + 1e-12 {
                    prop_assert!(dup.weights[i] > dup.weights[j]);
                }
            }
        }
        prop_assert_eq!(dup.weights[m], 0.0);
        prop_assert_eq!(dup.weights[m + 1], 0.0);
    }
}

// With idf taken from the sample itself, extra documents change N and so the
// relative idf of the summary terms; near-tied paragraphs can swap.
#[test]
fn per_sample_idf_can_reorder_near_ties_when_paragraphs_are_added() {
    let paras = vec![vec!["c"], vec!["e"], vec!["c", "a", "d", "c"], vec!["c"]];
    let summary = vec!["c", "a", "c"];
    let base = gold_attention(&summary, &paras, None).unwrap();
    let mut more = paras.clone();
    more.push(vec!["x", "y"]);
    more.push(vec!["x", "y"]);
    let dup = gold_attention(&summary, &more, None).unwrap();
    let expected_base = [
        0.333_626_221_867_080_85,
        0.0,
        0.332_747_556_265_838_24,
        0.333_626_221_867_080_85,
    ];
    let expected_dup = [
        0.333_301_713_418_650_95,
        0.0,
        0.333_396_573_162_698_05,
        0.333_301_713_418_650_95,
        0.0,
        0.0,
    ];
    for (got, want) in base
        .weights
        .iter()
        .zip(expected_base)
        .chain(dup.weights.iter().zip(expected_dup))
    {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert!(base.weights[0] > base.weights[2] && dup.weights[0] < dup.weights[2]);
}

fn toy(samples: usize) -> (Vocabulary, ModelConfig, Vec<Sample>) {
    let toy = generate_toy_corpus(&ToyCorpusConfig {
        samples,
        ..ToyCorpusConfig::default()
    })
    .unwrap();
    let records: Vec<RawRecord> = toy.into_iter().map(|t| t.record).collect();
    let vocab = Vocabulary::build(&corpus_text(&records), 1000).unwrap();
    let config = ModelConfig {
        vocab_size: vocab.len(),
        model_dim: 32,
        ffn_dim: 64,
        num_heads: 2,
        num_layers: 1,
        max_paragraphs: 6,
        max_paragraph_len: 16,
        max_target_len: 16,
        ..ModelConfig::desk()
    }
    .with_dropout(0.1);
    let samples = records
        .iter()
        .map(|r| Sample::from_record(r, &vocab, &config).0)
        .collect();
    (vocab, config, samples)
}

fn train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 8,
        base_rate: 1.0,
        warmup_steps: 50,
        checkpoint_every: 0,
        seed: 1,
        log_every: 0,
    }
}

#[test]
fn predictor_beats_uniform_on_held_out_samples() {
    let (vocab, config, samples) = toy(40);
    let (train, held) = samples.split_at(20);
    let ex: Vec<_> = train.iter().map(|s| (s.source(&config), s.summary.clone())).collect();
    let mut t = Trainer::new(Pht::new(config, 1).unwrap(), train_config(300), vocab.hash()).unwrap();
    t.run(&ex, &[], None).unwrap();
    let model = t.into_model();
    let (_, pairs) = extract_labels(&model, train).unwrap();
    let mut p = AttentionPredictor::new(PredictorConfig::for_model(model.config()), 1).unwrap();
    p.train(&pairs, &PredictorTraining::default()).unwrap();
    let (_, test) = extract_labels(&model, held).unwrap();
    let mse: f64 = test.iter().map(|h| p.mse(h).unwrap()).sum::<f64>() / test.len() as f64;
    let uniform: f64 = test
        .iter()
        .map(|h| {
            let m = h.eta.len() as f64;
            h.eta.iter().map(|e| (e - 1.0 / m).powi(2)).sum::<f64>() / m
        })
        .sum::<f64>()
        / test.len() as f64;
    assert!(mse < uniform, "held-out mse {mse} vs uniform {uniform}");
}

#[test]
fn fixed_seed_gives_identical_checkpoints_and_generations() {
    let (vocab, config, samples) = toy(8);
    let ex: Vec<_> = samples.iter().map(|s| (s.source(&config), s.summary.clone())).collect();
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(Pht::new(config.clone(), 1).unwrap(), train_config(30), vocab.hash()).unwrap();
        t.run(&ex, &[], Some(dir.path())).unwrap();
        let bytes = std::fs::read(dir.path().join(checkpoint_name(30))).unwrap();
        let model = t.into_model();
        let s = Summarizer::new(&model, None, &vocab, DecodeConfig::default()).unwrap();
        let gens = s.summarize_all(&samples, 3).unwrap();
        (bytes, gens)
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a == b, "checkpoints differ");
    assert_eq!(ga, gb);
}
