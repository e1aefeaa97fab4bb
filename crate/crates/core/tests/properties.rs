mod common;

use std::collections::BTreeSet;

use biaslab::biastrie::{teacher_forced_sets, PrefixTree, TrieCursor};
use biaslab::pointer::{forward_step, interpolate, InterpolationMode, PgParams};
use biaslab::tokenizer::{TokenId, Vocab};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn word_lists() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-f]{1,6}", 0..8)
}

proptest! {
    #[test]
    fn detokenize_inverts_tokenize(words in word_lists(), extra in word_lists()) {
        let mut inventory = words.clone();
        inventory.extend(extra);
        inventory.push("x".into());
        let vocab = Vocab::build(&inventory).unwrap();
        let tok = vocab.tokenize(&words).unwrap();
        prop_assert_eq!(tok.tokens.last().copied(), Some(vocab.eos()));
        prop_assert_eq!(vocab.detokenize(&tok.tokens), words.clone());
    }

    #[test]
    fn boundaries_mark_exactly_word_starts(words in word_lists()) {
        let mut inventory = words.clone();
        inventory.push("x".into());
        let vocab = Vocab::build(&inventory).unwrap();
        let tok = vocab.tokenize(&words).unwrap();
        let starts: BTreeSet<usize> = tok.word_spans.iter().map(|s| s.start).collect();
        for (i, &t) in tok.tokens.iter().enumerate() {
            prop_assert_eq!(vocab.is_boundary(t), starts.contains(&i));
        }
        let covered: usize = tok.word_spans.iter().map(|s| s.end - s.start).sum();
        prop_assert_eq!(covered + 1, tok.len());
    }

    #[test]
    fn trie_matches_brute_force(seed in any::<u64>()) {
        let inst = common::random_trie_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let tree = PrefixTree::build(&inst.vocab, &inst.words).unwrap();
        let mut cursor = TrieCursor::new();
        for k in 0..=inst.stream.len() {
            let expected = common::trie_oracle(&inst.vocab, &inst.words, &inst.stream[..k]);
            prop_assert_eq!(tree.valid_set(&cursor), expected, "after {} tokens", k);
            if k < inst.stream.len() {
                cursor = tree.advance(&cursor, inst.stream[k]);
            }
        }
        let forced = teacher_forced_sets(&tree, &inst.stream);
        for (k, set) in forced.iter().enumerate() {
            prop_assert_eq!(set, &common::trie_oracle(&inst.vocab, &inst.words, &inst.stream[..k]));
        }
    }

    #[test]
    fn scaled_interpolation_is_normalized(
        seed in any::<u64>(),
        weights in prop::collection::vec(0.0f64..1.0, 9),
        members in prop::collection::btree_set(0u32..9, 0..9),
        h in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let total: f64 = weights.iter().sum::<f64>() + 1e-3;
        let p_mdl: Vec<f64> = weights.iter().map(|w| (w + 1e-3 / 9.0) / total).collect();
        let params = PgParams::init(seed, 9, 4, 5).unwrap();
        let valid: BTreeSet<TokenId> = members.into_iter().map(TokenId).collect();
        let step = forward_step(&params, &h, &valid).unwrap();
        let out = interpolate(&p_mdl, &step, InterpolationMode::Scaled).unwrap();
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "sum {}", sum);
        prop_assert!(out.iter().all(|p| *p >= 0.0));
    }
}
