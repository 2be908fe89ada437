use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use dbkd::augment::{augment, default_stopwords, sample_alpha, AugmentConfig, SynonymLexicon, TokenSequence};
use dbkd::core::{argmax_decision, DecisionDistribution, LogitsVector};
use dbkd::distill::soft_label;
use dbkd::solver::{composition_count, compositions};

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,8}"
}

proptest! {
    #[test]
    fn counts_give_multiples_of_one_over_n(counts in prop::collection::vec(0usize..20, 2..6)) {
        prop_assume!(counts.iter().sum::<usize>() > 0);
        let d = DecisionDistribution::from_counts(&counts).unwrap();
        let n: usize = counts.iter().sum();
        prop_assert_eq!(d.sample_count(), Some(n));
        let sum: f64 = d.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        for (p, c) in d.probs().iter().zip(&counts) {
            prop_assert!((p - *c as f64 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_picks_lowest_index_maximum(values in prop::collection::vec(-10.0f64..10.0, 2..8)) {
        let z = LogitsVector::new(values.clone()).unwrap();
        let i = argmax_decision(&z);
        for (j, v) in values.iter().enumerate() {
            prop_assert!(*v <= values[i]);
            if *v == values[i] {
                prop_assert!(i <= j);
            }
        }
    }

    #[test]
    fn soft_labels_are_simplex_points(
        values in prop::collection::vec(-20.0f64..20.0, 2..8),
        tau in 0.1f64..10.0,
    ) {
        let z = LogitsVector::new(values).unwrap();
        let p = soft_label(&z, tau).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn soft_label_preserves_order(
        values in prop::collection::vec(-5.0f64..5.0, 2..6),
        tau in 0.1f64..10.0,
    ) {
        let z = LogitsVector::new(values.clone()).unwrap();
        let p = soft_label(&z, tau).unwrap();
        for i in 0..values.len() {
            for j in 0..values.len() {
                if values[i] > values[j] {
                    prop_assert!(p[i] > p[j]);
                }
            }
        }
    }

    #[test]
    fn composition_enumeration_matches_count(n in 0usize..12, l in 2usize..5) {
        let all = compositions(n, l);
        prop_assert_eq!(all.len(), composition_count(n, l));
        for c in &all {
            prop_assert_eq!(c.len(), l);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
        }
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), all.len());
    }

    #[test]
    fn alpha_draws_stay_in_unit_interval(
        expectation in 0.01f64..0.5,
        seed in 0u64..1000,
    ) {
        let cfg = AugmentConfig::new(
            expectation,
            seed,
            SynonymLexicon::default(),
            default_stopwords(),
        ).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let a = sample_alpha(&cfg, &mut rng);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn augmentation_is_deterministic_and_non_empty(
        words in prop::collection::vec(word(), 1..10),
        seed in 0u64..500,
        draw in 1usize..20,
    ) {
        let cfg = AugmentConfig::new(
            0.2,
            seed,
            SynonymLexicon::default(),
            default_stopwords(),
        ).unwrap();
        let x = TokenSequence::tokenize(&words.join(" "), &cfg.stopwords).unwrap();
        let a = augment(&x, draw, &cfg);
        let b = augment(&x, draw, &cfg);
        prop_assert_eq!(&a, &b);
        prop_assert!(!a.tokens().is_empty());
    }

    #[test]
    fn tokenize_joins_back(words in prop::collection::vec(word(), 1..10)) {
        let stop = default_stopwords();
        let text = words.join(" ");
        let seq = TokenSequence::tokenize(&text, &stop).unwrap();
        prop_assert_eq!(seq.text(), text);
    }
}
