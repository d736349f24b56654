mod common;

use proptest::prelude::*;
use rand::Rng;

use triage_core::pls::{nipals_fit_traced, ORTHOGONALITY_TOLERANCE};
use triage_core::{extract_coefficients, nipals_fit, predict, rpls_update, DataBlock, PlsModel};

use common::{ols, NaivePls};

fn design(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0..5.0f64, cols - 1), rows).prop_map(|rows| {
        rows.into_iter()
            .map(|mut r| {
                r.insert(0, 1.0);
                r
            })
            .collect()
    })
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn exhausted_fit_matches_normal_equations() {
    let mut r = common::rng(11);
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|_| (0..4).map(|j| if j == 0 { 1.0 } else { r.random_range(-1.0..1.0) }).collect())
        .collect();
    let y: Vec<f64> = rows.iter().map(|x| 2.0 * x[1] - x[2] + 0.3 + r.random_range(-0.1..0.1)).collect();
    let model = nipals_fit(&DataBlock::from_rows(&rows, &y).unwrap(), 1e-12).unwrap();
    let beta = extract_coefficients(&model).unwrap().beta;
    assert!(max_abs_diff(&beta, &ols(&rows, &y)) < 1e-9);
}

#[test]
fn recursive_chain_replays_exactly() {
    // Replay oracle: the same samples in the same order give bit-identical
    // models.
    let samples: Vec<(Vec<f64>, f64)> = (0..40)
        .map(|i| {
            let a = (i as f64 * 0.37).sin();
            let b = (i as f64 * 1.3).cos();
            (vec![1.0, a, b], 1.0 + 2.0 * a - b)
        })
        .collect();
    let run = || {
        samples
            .iter()
            .fold(PlsModel::cold(3, 1e-10), |m, (x, y)| rpls_update(&m, x, *y, 1e-10).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn consistent_data_is_recovered_recursively() {
    let beta_star = [0.5, -1.0, 2.5];
    let mut model = PlsModel::cold(3, 1e-10);
    for i in 0..30 {
        let x = vec![1.0, (i as f64).sqrt(), ((i * 7) % 11) as f64 - 5.0];
        let y: f64 = x.iter().zip(&beta_star).map(|(a, b)| a * b).sum();
        model = rpls_update(&model, &x, y, 1e-10).unwrap();
    }
    let beta = extract_coefficients(&model).unwrap().beta;
    assert!(max_abs_diff(&beta, &beta_star) < 1e-8, "{beta:?}");
    assert_eq!(model.samples_absorbed(), 30);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_orthonormal_and_residuals_shrink(rows in design(12, 4), y in prop::collection::vec(-3.0..3.0f64, 12)) {
        let trace = nipals_fit_traced(&DataBlock::from_rows(&rows, &y).unwrap(), 1e-10).unwrap();
        for (i, a) in trace.scores.iter().enumerate() {
            prop_assert!((a.norm() - 1.0).abs() < 1e-9);
            for b in &trace.scores[..i] {
                prop_assert!(a.dot(b).abs() <= ORTHOGONALITY_TOLERANCE);
            }
        }
        for pair in trace.residual_norms.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9);
        }
    }

    #[test]
    fn predictions_are_linear(
        rows in design(10, 3),
        y in prop::collection::vec(-3.0..3.0f64, 10),
        a in prop::collection::vec(-2.0..2.0f64, 3),
        b in prop::collection::vec(-2.0..2.0f64, 3),
        s in -3.0..3.0f64,
    ) {
        let model = nipals_fit(&DataBlock::from_rows(&rows, &y).unwrap(), 1e-10).unwrap();
        let combo: Vec<f64> = a.iter().zip(&b).map(|(x, z)| x + s * z).collect();
        let lhs = predict(&model, &combo).unwrap();
        let rhs = predict(&model, &a).unwrap() + s * predict(&model, &b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()));
    }

    #[test]
    fn recursive_updates_track_naive_cascade(
        rows in design(25, 4),
        y in prop::collection::vec(-3.0..3.0f64, 25),
        probe in prop::collection::vec(-3.0..3.0f64, 4),
    ) {
        let mut model = PlsModel::cold(4, 1e-10);
        let mut naive = NaivePls::fit(&rows[..1], &y[..1], 1e-10);
        model = rpls_update(&model, &rows[0], y[0], 1e-10).unwrap();
        for (x, target) in rows.iter().zip(&y).skip(1) {
            model = rpls_update(&model, x, *target, 1e-10).unwrap();
            naive = naive.absorb(x, *target, 1e-10);
        }
        let ours = predict(&model, &probe).unwrap();
        prop_assert!((ours - naive.predict(&probe)).abs() <= 1e-6 * (1.0 + ours.abs()));
    }
}
