mod common;

use common::{minimal_config, model_gradient_error};
use pht_core::vocab::BOS;
use pht_core::{ModelConfig, Pht, Source};
use proptest::prelude::*;

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut model = Pht::new(minimal_config(12), 3).unwrap();
    let batch = vec![(Source::new(vec![vec![5, 6, 7], vec![8, 9]]), vec![10, 11])];
    let err = model_gradient_error(&mut model, &batch, 1e-5);
    assert!(err < 1e-3, "max relative error {err:e}");
}

#[test]
fn eval_passes_are_bit_identical() {
    let model = Pht::new(minimal_config(12), 4).unwrap();
    let src = Source::new(vec![vec![5, 6], vec![7, 8, 9]]);
    let a = model.decode(&[BOS, 5, 6], &model.encode(&src).unwrap()).unwrap();
    let b = model.decode(&[BOS, 5, 6], &model.encode(&src).unwrap()).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.attention_sum, b.attention_sum);
}

fn small_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 16,
        model_dim: 8,
        ffn_dim: 12,
        num_heads: 2,
        num_layers: 2,
        max_paragraphs: 5,
        max_paragraph_len: 5,
        max_target_len: 6,
        ..ModelConfig::desk()
    }
    .with_dropout(0.0)
}

fn source_strategy() -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::vec(5usize..16, 1..=5), 1..=5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn decode_shapes_follow_the_input(paras in source_strategy(), prefix in prop::collection::vec(5usize..16, 0..5), seed in 0u64..50) {
        let model = Pht::new(small_config(), seed).unwrap();
        let enc = model.encode(&Source::new(paras.clone())).unwrap();
        let mut p = vec![BOS];
        p.extend(prefix);
        let out = model.decode(&p, &enc).unwrap();
        let (k, m) = (p.len(), paras.len());
        prop_assert_eq!(out.logits.shape(), &[k, 16]);
        prop_assert_eq!(out.attention_sum.shape(), &[k, m]);
        for a in &out.layer_attention {
            prop_assert_eq!(a.shape(), &[k, m]);
            for t in 0..k {
                prop_assert!((a.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(out.logits.all_finite());
    }

    #[test]
    fn paragraph_permutation_is_equivariant(paras in source_strategy(), seed in 0u64..50, perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let model = Pht::new(small_config(), seed).unwrap();
        let m = paras.len();
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let src = Source::new(paras);
        let permuted = src.select(&order);
        let prefix = [BOS, 6, 7, 8];
        let a = model.decode(&prefix, &model.encode(&src).unwrap()).unwrap();
        let b = model.decode(&prefix, &model.encode(&permuted).unwrap()).unwrap();
        for (x, y) in a.logits.data().iter().zip(b.logits.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        for t in 0..prefix.len() {
            for (j, &orig) in order.iter().enumerate() {
                prop_assert!((b.attention_sum.get(&[t, j]) - a.attention_sum.get(&[t, orig])).abs() <= 1e-9);
            }
        }
    }
}
