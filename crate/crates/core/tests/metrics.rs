use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secr::eval::{bleu4, cider, EvalCorpus, EvalItem};

mod support;
use support::metric_oracle::*;

#[test]
fn metrics_match_direct_formulas_on_micro_corpora() {
    for seed in 0..20 {
        let items = micro_corpus(seed);
        let c = corpus(&items);
        let b = bleu4(&c).unwrap();
        assert!((b - oracle_bleu(&items)).abs() < 1e-9, "bleu seed {seed}: {b} vs {}", oracle_bleu(&items));
        let got = cider(&c).unwrap();
        let want = oracle_cider(&items);
        for (g, w) in got.per_image.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "cider seed {seed}: {g} vs {w}");
        }
        let mean = want.iter().sum::<f64>() / want.len() as f64;
        assert!((got.mean - mean).abs() < 1e-9);
    }
}

#[test]
fn bleu_hand_cases() {
    let s = "a small red circle above a large blue square".to_string();
    let identity = corpus(&[(s.clone(), vec![s.clone()])]);
    assert!((bleu4(&identity).unwrap() - 1.0).abs() < 1e-12);

    let reference = "a b c d e f".to_string();
    let short = corpus(&[("a b c d e".to_string(), vec![reference])]);
    assert!((bleu4(&short).unwrap() - (-0.2f64).exp()).abs() < 1e-12);
    assert!((bleu4(&short).unwrap() - 0.818731).abs() < 1e-6);
}

#[test]
fn cider_disjoint_two_image_corpus_is_ten() {
    let c = corpus(&[
        ("red circle".to_string(), vec!["red circle".to_string()]),
        ("blue square".to_string(), vec!["blue square".to_string()]),
    ]);
    let s = cider(&c).unwrap();
    assert!((s.mean - 10.0).abs() < 1e-12);
    assert!(s.per_image.iter().all(|x| (x - 10.0).abs() < 1e-12));
}

#[test]
fn corpus_validation() {
    let bad = vec![EvalItem { image_id: 0, candidate: " ".into(), references: vec!["a".into()] }];
    assert!(EvalCorpus::new(bad).is_err());
    let bad = vec![EvalItem { image_id: 0, candidate: "a".into(), references: vec![] }];
    assert!(EvalCorpus::new(bad).is_err());
    let one = corpus(&[("a".to_string(), vec!["a".to_string()])]);
    assert!(cider(&one).is_err());
}

proptest! {
    #[test]
    fn scores_are_bounded_and_match_the_oracle(seed in 0u64..10_000) {
        let items = micro_corpus(seed);
        let c = corpus(&items);
        let b = bleu4(&c).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        prop_assert!((b - oracle_bleu(&items)).abs() < 1e-9);
        let s = cider(&c).unwrap();
        prop_assert!(s.per_image.iter().all(|x| x.is_finite() && *x >= 0.0));
    }

    #[test]
    fn a_caption_against_itself_scores_full_bleu(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["a", "red", "small", "circle", "above"];
        let items: Vec<(String, Vec<String>)> = (0..rng.gen_range(1..4))
            .map(|_| {
                let s = random_sentence(&mut rng, &words);
                (s.clone(), vec![s])
            })
            .collect();
        prop_assert!((bleu4(&corpus(&items)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_corpus_order(seed in 0u64..1000, rot in 0usize..5) {
        let items = micro_corpus(seed);
        let mut rotated = items.clone();
        let k = rot % rotated.len();
        rotated.rotate_left(k);
        let (a, b) = (corpus(&items), corpus(&rotated));
        prop_assert!((bleu4(&a).unwrap() - bleu4(&b).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&a).unwrap().mean - cider(&b).unwrap().mean).abs() < 1e-9);
    }
}
