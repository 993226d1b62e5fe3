mod common;

use common::{gradient_point, model_gradient_point, MODEL_GRAD_PARAMS};

const TOLERANCE: f64 = 1e-3;

#[test]
fn every_operation_matches_finite_differences() {
    let mut worst: Vec<(String, f64)> = Vec::new();
    for seed in 0..10 {
        for (name, err) in gradient_point(seed) {
            assert!(err < TOLERANCE, "seed {seed}: {name} relative error {err:e}");
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((name, err)),
            }
        }
    }
    assert!(worst.len() >= 25, "suite shrank to {} checks", worst.len());
}

#[test]
fn total_objective_through_the_model() {
    for seed in 0..10 {
        for (name, err) in model_gradient_point(seed, &MODEL_GRAD_PARAMS) {
            assert!(err < TOLERANCE, "seed {seed}: {name} relative error {err:e}");
        }
    }
}
