use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfsq_core::data::{gen_axis_partition, gen_friedman1, AxisPartition, AxisThreshold};
use rfsq_core::exec::Execution;
use rfsq_core::forest::{fit_forest, ForestConfig, LeafSummary};
use rfsq_core::mlr::MlrFitConfig;
use rfsq_core::surrogate::{
    extract_leaf_dataset, squash_forest, squash_forest_with, PredictionMode, SurrogateError,
};

fn config(n: usize, k: usize, d: usize, m: usize, seed: u64) -> ForestConfig {
    ForestConfig { n, k, d, m, min_leaf: 1, leaf_summary: LeafSummary::Mean, seed }
}

/// Fraction of each tree's own rows on which the surrogate picks the leaf
/// the tree would.
fn agreement(forest: &rfsq_core::forest::Forest, squashed: &rfsq_core::surrogate::SurrogateForest, ds: &rfsq_core::data::Dataset) -> f64 {
    let (mut same, mut total) = (0usize, 0usize);
    for ((tree, sur), rows) in forest.trees().iter().zip(squashed.surrogates()).zip(forest.subsample_row_ids()) {
        for &r in rows {
            let x = ds.row(r);
            same += usize::from(tree.traverse(x).unwrap() == sur.route(x).unwrap());
            total += 1;
        }
    }
    same as f64 / total as f64
}

#[test]
fn depth_one_surrogates_recover_the_split() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature = rng.gen_range(0..3);
        let cut = rng.gen_range(0.2..0.8);
        let partition = AxisPartition::new(vec![AxisThreshold { feature, cutpoint: cut }], vec![rng.gen_range(-5.0..0.0), rng.gen_range(0.5..5.0)])
            .with_features(3)
            .with_margin(0.01);
        let ds = gen_axis_partition(500, &partition, seed).unwrap();
        let forest = fit_forest(&ds, &config(500, 3, 1, 1, seed)).unwrap();
        let squashed = squash_forest(&forest, &ds, &MlrFitConfig::default(), PredictionMode::Argmax).unwrap();
        assert!(squashed.fits.iter().all(|f| f.converged), "seed {seed}");
        let a = agreement(&forest, &squashed.forest, &ds);
        assert!(a >= 0.99, "seed {seed}: agreement {a}");
    }
}

#[test]
fn quadrant_leaves_are_linearly_routable() {
    // Two perpendicular cuts give four convex leaf regions, which an argmax
    // of four affine functions can represent exactly.
    let partition = AxisPartition::new(
        vec![AxisThreshold { feature: 0, cutpoint: 0.5 }, AxisThreshold { feature: 1, cutpoint: 0.5 }],
        vec![0.0, 1.0, 1.0, 0.0],
    )
    .with_features(2)
    .with_margin(0.02);
    let ds = gen_axis_partition(800, &partition, 4).unwrap();
    let forest = fit_forest(&ds, &config(800, 2, 2, 1, 1)).unwrap();
    assert_eq!(forest.trees()[0].n_leaves(), 4);
    let squashed = squash_forest(&forest, &ds, &MlrFitConfig::default(), PredictionMode::Argmax).unwrap();
    let a = agreement(&forest, &squashed.forest, &ds);
    println!("quadrant leaf agreement: {a:.4}");
    assert!(a >= 0.99, "agreement {a}");
}

#[test]
fn expectation_stays_within_leaf_range() {
    let ds = gen_friedman1(400, 1.0, 6).unwrap();
    let forest = fit_forest(&ds, &ForestConfig { min_leaf: 5, ..config(200, 3, 3, 5, 2) }).unwrap();
    let squashed = squash_forest(&forest, &ds, &MlrFitConfig::default(), PredictionMode::Expectation).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..500 {
        // Probe well outside the training box too.
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..4.0)).collect();
        for sur in squashed.forest.surrogates() {
            let v = sur.predict(&x).unwrap();
            let lo = sur.leaf_values().iter().copied().fold(f64::INFINITY, f64::min);
            let hi = sur.leaf_values().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
        }
    }
}

#[test]
fn depth_zero_forests_are_lossless() {
    let ds = gen_friedman1(300, 1.0, 7).unwrap();
    let forest = fit_forest(&ds, &config(120, 3, 0, 10, 3)).unwrap();
    let squashed = squash_forest(&forest, &ds, &MlrFitConfig::default(), PredictionMode::Expectation).unwrap();
    assert!(squashed.fits.iter().all(|f| f.method.is_none() && f.n_leaves == 1));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [PredictionMode::Argmax, PredictionMode::Expectation] {
        let sf = squashed.forest.clone().with_mode(mode);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..2.0)).collect();
            assert_eq!(sf.predict(&x).unwrap(), forest.predict(&x).unwrap());
        }
    }
}

#[test]
fn squashed_prediction_recomputes_from_parts() {
    let ds = gen_friedman1(500, 1.0, 8).unwrap();
    let forest = fit_forest(&ds, &ForestConfig { min_leaf: 5, ..config(250, 3, 3, 10, 5) }).unwrap();
    let squashed = squash_forest(&forest, &ds, &MlrFitConfig::default(), PredictionMode::Expectation).unwrap();
    assert_eq!(squashed.fits.len(), 10);
    let argmax = squashed.forest.clone().with_mode(PredictionMode::Argmax);
    for i in (0..500).step_by(23) {
        let x = ds.row(i);
        let (mut expectation, mut most_likely) = (0.0, 0.0);
        for (sur, tree) in squashed.forest.surrogates().iter().zip(forest.trees()) {
            assert_eq!(sur.leaf_values(), tree.leaf_values().as_slice());
            let probs = sur.model().unwrap().class_probabilities(x).unwrap();
            expectation += probs.iter().zip(sur.leaf_values()).map(|(p, v)| p * v).sum::<f64>();
            let best = (0..probs.len()).fold(0, |b, j| if probs[j] > probs[b] { j } else { b });
            most_likely += sur.leaf_values()[best];
        }
        assert!((squashed.forest.predict(x).unwrap() - expectation / 10.0).abs() < 1e-12);
        assert!((argmax.predict(x).unwrap() - most_likely / 10.0).abs() < 1e-12);
    }
}

#[test]
fn squashing_is_deterministic_and_thread_independent() {
    let ds = gen_friedman1(400, 1.0, 9).unwrap();
    let forest = fit_forest(&ds, &ForestConfig { min_leaf: 5, ..config(200, 3, 3, 6, 1) }).unwrap();
    let cfg = MlrFitConfig::default();
    let a = squash_forest(&forest, &ds, &cfg, PredictionMode::Expectation).unwrap();
    let b = squash_forest(&forest, &ds, &cfg, PredictionMode::Expectation).unwrap();
    let seq = squash_forest_with(&forest, &ds, &cfg, PredictionMode::Expectation, Execution::Sequential).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, seq);
}

#[test]
fn leaf_dataset_reproduces_leaf_counts() {
    let ds = gen_friedman1(300, 1.0, 10).unwrap();
    let forest = fit_forest(&ds, &ForestConfig { min_leaf: 4, ..config(150, 3, 4, 3, 1) }).unwrap();
    for (tree, rows) in forest.trees().iter().zip(forest.subsample_row_ids()) {
        let leaves = extract_leaf_dataset(tree, &ds, rows).unwrap();
        let counts: Vec<usize> = tree.leaves().iter().map(|l| l.count as usize).collect();
        assert_eq!(leaves.histogram(), counts);
        assert_eq!(leaves.labels.len(), rows.len());
        // Rows the tree never saw do not reproduce its counts.
        let shifted: Vec<usize> = rows.iter().map(|r| (r + 1) % 300).collect();
        assert!(extract_leaf_dataset(tree, &ds, &shifted).is_err());
    }
}

#[test]
fn squash_needs_the_training_data() {
    let ds = gen_friedman1(200, 1.0, 11).unwrap();
    let other = gen_friedman1(200, 1.0, 12).unwrap();
    let forest = fit_forest(&ds, &config(100, 3, 2, 2, 0)).unwrap();
    let err = squash_forest(&forest, &other, &MlrFitConfig::default(), PredictionMode::Argmax).unwrap_err();
    assert_eq!(err, SurrogateError::DatasetMismatch);
}
