use secr::gradcheck::{full_suite, model_losses, op_round, vector_rel_error};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..3 {
        for case in op_round(&mut rng).unwrap() {
            assert!(case.rel_error < 1e-4, "{} rel err {}", case.name, case.rel_error);
        }
    }
}

#[test]
fn training_objectives_match_central_differences() {
    let cases = model_losses(5, 3).unwrap();
    for stage in ["stage0", "stage1", "stage2"] {
        assert!(cases.iter().any(|c| c.name.starts_with(stage) && c.analytic_norm > 0.0), "{stage} has no gradient");
    }
    for case in &cases {
        assert!(case.rel_error < 1e-4, "{} rel err {}", case.name, case.rel_error);
    }
}

#[test]
fn suite_reaches_the_case_budget() {
    assert!(full_suite(1, 5).unwrap().len() >= 100);
}

#[test]
fn relative_error_is_scale_free() {
    assert_eq!(vector_rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    let e = vector_rel_error(&[3.0, 4.0], &[3.0, 4.5]);
    assert!((e - 0.5 / 4.5f64.hypot(3.0)).abs() < 1e-15);
    assert_eq!(vector_rel_error(&[0.0], &[0.0]), 0.0);
}
