use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use secr::gradcheck::tiny_config;
use secr::params::{normal, Bind};
use secr::{Model64, ModelBundle, Tape, Tensor};

fn instance(seed: u64) -> (Model64, Tensor<f64>, Vec<usize>) {
    let model = ModelBundle::<f64>::new(&tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_v = model.cfg.vision.tokens();
    let prefix = normal(vec![n_v, model.lm.d()], 1.0, &mut rng);
    let len = rng.gen_range(1..6);
    let tokens = (0..len).map(|_| rng.gen_range(0..model.vocab.len())).collect();
    (model, prefix, tokens)
}

#[test]
fn cached_and_uncached_greedy_decoding_agree() {
    for seed in 0..30 {
        let (m, prefix, prompt) = instance(seed);
        let max_new = m.lm.cfg.max_seq - prefix.rows() - prompt.len();
        let eos = m.vocab.eos;
        let a = m.lm.decode_greedy(&m.store, &prefix, &prompt, max_new, eos, true).unwrap();
        let b = m.lm.decode_greedy(&m.store, &prefix, &prompt, max_new, eos, false).unwrap();
        assert_eq!(a.ids, b.ids, "seed {seed}");
        // A never-emitted stop id forces decoding to run to the budget.
        let a = m.lm.decode_greedy(&m.store, &prefix, &prompt, max_new, usize::MAX, true).unwrap();
        let b = m.lm.decode_greedy(&m.store, &prefix, &prompt, max_new, usize::MAX, false).unwrap();
        assert_eq!(a.ids.len(), max_new);
        assert_eq!(a.ids, b.ids);
    }
}

#[test]
fn future_tokens_never_change_past_logits() {
    for seed in 0..20 {
        let (m, prefix, mut tokens) = instance(seed);
        tokens.extend([5, 6, 7]);
        let base = m.lm.forward_infer(&m.store, &prefix, &tokens).unwrap();
        let j = 1 + (seed as usize) % (tokens.len() - 1);
        let mut changed = tokens.clone();
        changed[j] = (changed[j] + 1) % m.vocab.len();
        let other = m.lm.forward_infer(&m.store, &prefix, &changed).unwrap();
        for r in 0..j {
            assert_eq!(base.row(r), other.row(r), "seed {seed}, row {r}");
        }
        assert_ne!(base.row(j), other.row(j));
    }
}

#[test]
fn taped_and_inference_forwards_agree() {
    for seed in 0..5 {
        let (m, prefix, tokens) = instance(seed);
        let mut tape = Tape::new();
        let p = tape.constant(prefix.clone()).unwrap();
        let out = m.lm.forward(&mut tape, &Bind::frozen(&m.store), p, &tokens).unwrap();
        let infer = m.lm.forward_infer(&m.store, &prefix, &tokens).unwrap();
        assert!(tape.value(out.logits).max_abs_diff(&infer) < 1e-12);
    }
}

#[test]
fn the_visual_prefix_conditions_the_logits() {
    let (m, prefix, tokens) = instance(3);
    let zero = Tensor::zeros(prefix.shape().to_vec());
    let a = m.lm.forward_infer(&m.store, &prefix, &tokens).unwrap();
    let b = m.lm.forward_infer(&m.store, &zero, &tokens).unwrap();
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn zero_budget_decodes_nothing() {
    let (m, prefix, prompt) = instance(4);
    let d = m.lm.decode_greedy(&m.store, &prefix, &prompt, 0, m.vocab.eos, true).unwrap();
    assert!(d.ids.is_empty());
    assert_eq!(d.logprob, 0.0);
}

#[test]
fn overlong_sequences_are_rejected() {
    let (m, prefix, _) = instance(5);
    let tokens = vec![5; m.lm.cfg.max_seq - prefix.rows() + 1];
    assert!(matches!(
        m.lm.forward_infer(&m.store, &prefix, &tokens),
        Err(secr::Error::SequenceOverflow { .. })
    ));
    assert!(matches!(
        m.lm.forward_infer(&m.store, &prefix, &[m.vocab.len()]),
        Err(secr::Error::TokenIdOutOfRange { .. })
    ));
}

#[test]
fn sequence_logprob_follows_the_chain_rule_and_cross_entropy() {
    for seed in 0..5 {
        let (m, prefix, ctx) = instance(seed);
        let cont = vec![5, 9, 12, 1];
        let total = m.lm.sequence_logprob(&m.store, &prefix, &ctx, &cont).unwrap();
        let mut acc = 0.0;
        for j in 0..cont.len() {
            let mut c = ctx.clone();
            c.extend_from_slice(&cont[..j]);
            acc += m.lm.sequence_logprob(&m.store, &prefix, &c, &cont[j..=j]).unwrap();
        }
        assert!((total - acc).abs() < 1e-10);

        let mut input = ctx.clone();
        input.extend_from_slice(&cont[..cont.len() - 1]);
        let mut tape = Tape::new();
        let p = tape.constant(prefix.clone()).unwrap();
        let out = m.lm.forward(&mut tape, &Bind::frozen(&m.store), p, &input).unwrap();
        let rows = tape.slice_rows(out.logits, ctx.len() - 1, cont.len()).unwrap();
        let ce = tape.cross_entropy(rows, &cont).unwrap();
        let ce = tape.value(ce).item().unwrap();
        assert!((total + cont.len() as f64 * ce).abs() < 1e-10);
    }
}

#[test]
fn uniform_logits_give_minus_t_log_v() {
    let (mut m, prefix, ctx) = instance(6);
    let embed = m.lm.embed;
    m.store.get_mut(embed).data_mut().iter_mut().for_each(|x| *x = 0.0);
    let cont = vec![5, 6, 7, 8, 9];
    let lp = m.lm.sequence_logprob(&m.store, &prefix, &ctx, &cont).unwrap();
    let v = m.vocab.len() as f64;
    assert!((lp + cont.len() as f64 * v.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cache_matches_recompute_for_any_instance(seed in any::<u64>()) {
        let (m, prefix, prompt) = instance(seed);
        let max_new = 8;
        let a = m.lm.decode_greedy(&m.store, &prefix, &prompt, max_new, usize::MAX, true).unwrap();
        let b = m.lm.decode_greedy(&m.store, &prefix, &prompt, max_new, usize::MAX, false).unwrap();
        prop_assert_eq!(a.ids, b.ids);
    }

    #[test]
    fn logits_are_finite(seed in any::<u64>()) {
        let (m, prefix, tokens) = instance(seed);
        let logits = m.lm.forward_infer(&m.store, &prefix, &tokens).unwrap();
        prop_assert_eq!(logits.shape(), &[tokens.len(), m.vocab.len()]);
        prop_assert!(logits.is_finite());
    }
}
