//! Property tests for the invariants that hold over whole input families.

mod common;

use proptest::prelude::*;
use storylab_core::objectives::ranking_loss_from_scores;
use storylab_core::sampler::nucleus_filter;
use storylab_core::tokenizer::Vocab;
use storylab_core::{Graph, Tensor};

const ALPHABET: [char; 14] = [
    'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'o', 'n', 't', 'r', 's', 'm',
];

fn fixture_vocab() -> Vocab {
    // "aa bb cc ..." puts every alphabet character into the vocabulary in
    // both word-internal and word-final position
    let coverage: String = ALPHABET
        .iter()
        .map(|c| format!("{c}{c}"))
        .collect::<Vec<_>>()
        .join(" ");
    let corpus = [
        coverage.as_str(),
        "the cat sat on the mat and the dog ran to them",
        "some other notes on bent grass and fresh corn",
    ];
    Vocab::train(corpus.iter().copied(), 4 + 2 * ALPHABET.len() + 24).unwrap()
}

fn word_strategy() -> impl Strategy<Value = String> {
    // words over the trained alphabet
    proptest::collection::vec(proptest::sample::select(ALPHABET.to_vec()), 1..8)
        .prop_map(|chars| chars.into_iter().collect())
}

fn text_strategy() -> impl Strategy<Value = String> {
    proptest::collection::vec(word_strategy(), 1..12).prop_map(|words| words.join(" "))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tokenizer_round_trip_identity(text in text_strategy()) {
        let vocab = fixture_vocab();
        let enc = vocab.encode(&text).unwrap();
        prop_assert_eq!(vocab.decode(&enc.token_ids).unwrap(), text);
    }

    #[test]
    fn token_count_bounded_by_char_count(text in text_strategy()) {
        let vocab = fixture_vocab();
        let enc = vocab.encode(&text).unwrap();
        prop_assert!(enc.len() <= text.chars().count());
    }

    #[test]
    fn word_starts_partition_into_word_count_groups(text in text_strategy()) {
        let vocab = fixture_vocab();
        let enc = vocab.encode(&text).unwrap();
        let n_words = text.split_whitespace().count();
        let starts = enc.word_starts.iter().filter(|s| **s).count();
        prop_assert_eq!(starts, n_words);

        // joining per-word decodings with single spaces rebuilds the text
        let mut groups: Vec<Vec<u32>> = Vec::new();
        for (id, start) in enc.token_ids.iter().zip(&enc.word_starts) {
            if *start {
                groups.push(vec![*id]);
            } else {
                groups.last_mut().unwrap().push(*id);
            }
        }
        let rebuilt = groups
            .iter()
            .map(|g| vocab.decode(g).unwrap())
            .collect::<Vec<_>>()
            .join(" ");
        prop_assert_eq!(rebuilt, text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        vals in proptest::collection::vec(-30.0f64..30.0, 8),
        shift in -50.0f64..50.0,
    ) {
        let mut graph = Graph::new();
        let x = graph.leaf(Tensor::matrix(2, 4, vals.clone()));
        let s = graph.softmax_rows(x).unwrap();
        for row in graph.values(s).chunks(4) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
        let mut graph2 = Graph::new();
        let x2 = graph2.leaf(Tensor::matrix(2, 4, shifted));
        let s2 = graph2.softmax_rows(x2).unwrap();
        for (a, b) in graph.values(s).iter().zip(graph2.values(s2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // argmax positions agree exactly
        for (row_a, row_b) in graph.values(s).chunks(4).zip(graph2.values(s2).chunks(4)) {
            let arg = |r: &[f64]| r.iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0;
            prop_assert_eq!(arg(row_a), arg(row_b));
        }
    }

    #[test]
    fn ranking_loss_shift_invariant_and_positive(
        scores in proptest::collection::vec(-8.0f64..0.0, 2..6),
        offset in -5.0f64..5.0,
    ) {
        let base = ranking_loss_from_scores(&scores, 0);
        prop_assert!(base >= 0.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + offset).collect();
        let moved = ranking_loss_from_scores(&shifted, 0);
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn nucleus_keeps_argmax_and_renormalizes(
        raw in proptest::collection::vec(1e-6f64..1.0, 3..20),
        p in 0.05f64..1.0,
    ) {
        let total: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let nucleus = nucleus_filter(&probs, p).unwrap();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as u32;
        prop_assert!(nucleus.contains(argmax));
        let kept: f64 = nucleus.token_ids.iter().map(|&i| probs[i as usize]).sum();
        prop_assert!(kept >= p - 1e-9);
        let renorm: f64 = nucleus.probs.iter().sum();
        prop_assert!((renorm - 1.0).abs() < 1e-12);
        // minimality: dropping the least-probable kept token falls below p
        if nucleus.token_ids.len() > 1 {
            let min_kept = nucleus
                .token_ids
                .iter()
                .map(|&i| probs[i as usize])
                .fold(f64::INFINITY, f64::min);
            prop_assert!(kept - min_kept < p);
        }
    }

    #[test]
    fn backward_of_shared_subgraph_matches_expanded(
        vals in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        let shared = {
            let mut graph = Graph::new();
            let x = graph.param(Tensor::row(vals.clone()));
            let u = graph.gelu(x).unwrap();
            let prod = graph.mul(u, u).unwrap();
            let loss = graph.sum(prod).unwrap();
            graph.backward(loss).unwrap();
            graph.grad(x).unwrap().to_vec()
        };
        let expanded = {
            let mut graph = Graph::new();
            let x = graph.param(Tensor::row(vals.clone()));
            let u1 = graph.gelu(x).unwrap();
            let u2 = graph.gelu(x).unwrap();
            let prod = graph.mul(u1, u2).unwrap();
            let loss = graph.sum(prod).unwrap();
            graph.backward(loss).unwrap();
            graph.grad(x).unwrap().to_vec()
        };
        for (a, b) in shared.iter().zip(&expanded) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn finite_inputs_never_produce_non_finite_outputs(
        vals in proptest::collection::vec(-100.0f64..100.0, 8),
    ) {
        let mut graph = Graph::new();
        let x = graph.leaf(Tensor::matrix(2, 4, vals));
        let s = graph.softmax_rows(x).unwrap();
        let g = graph.gelu(s).unwrap();
        let ls = graph.log_softmax_rows(g).unwrap();
        let m = graph.mean(ls).unwrap();
        prop_assert!(graph.values(m)[0].is_finite());
    }
}
