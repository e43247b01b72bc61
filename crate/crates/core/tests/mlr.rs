use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfsq_core::mlr::{
    fit_mlr, fit_mlr_from, multinomial_pmf, penalized_gradient, penalized_log_likelihood, MlrFitConfig,
    MlrModel, Optimizer,
};

fn random_model(rng: &mut ChaCha8Rng, k: usize, p: usize, scale: f64) -> MlrModel {
    let intercepts = (0..k - 1).map(|_| rng.gen_range(-scale..scale)).collect();
    let coefficients = (0..(k - 1) * p).map(|_| rng.gen_range(-scale..scale)).collect();
    MlrModel::new(k, p, intercepts, coefficients).unwrap()
}

fn random_problem(rng: &mut ChaCha8Rng, n: usize, p: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let features = (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..k)).collect();
    (features, labels)
}

fn tight(lambda: f64) -> MlrFitConfig {
    MlrFitConfig { l2_penalty: lambda, max_iterations: 200, gradient_tolerance: 1e-10, ..Default::default() }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn softmax_sums_to_one_including_huge_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for trial in 0..10_000 {
        let k = rng.gen_range(2..9);
        let p = rng.gen_range(1..5);
        // Every tenth model has logits on the order of 1e3.
        let scale = if trial % 10 == 0 { 1e3 } else { rng.gen_range(0.01..20.0) };
        let model = random_model(&mut rng, k, p, scale);
        let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probs = model.class_probabilities(&x).unwrap();
        assert!(probs.iter().all(|q| q.is_finite() && *q >= 0.0));
        worst = worst.max((probs.iter().sum::<f64>() - 1.0).abs());
    }
    assert!(worst < 1e-12, "worst |sum - 1| = {worst:e}");
}

/// All vectors of `k` non-negative counts summing to `n`.
fn compositions(n: u64, k: usize) -> Vec<Vec<u64>> {
    if k == 1 {
        return vec![vec![n]];
    }
    (0..=n)
        .flat_map(|first| {
            compositions(n - first, k - 1).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

#[test]
fn multinomial_pmf_has_unit_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 1..=3 {
        for n in 0..=4 {
            for _ in 0..20 {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let mut theta: Vec<f64> = raw.iter().map(|v| v / total).collect();
                // Renormalize the last entry so the sum is 1 to the last bit.
                theta[k - 1] = 1.0 - theta[..k - 1].iter().sum::<f64>();
                let mass: f64 = compositions(n, k)
                    .iter()
                    .map(|c| multinomial_pmf(c, &theta, n).unwrap())
                    .sum();
                assert!((mass - 1.0).abs() < 1e-12, "k={k} n={n} mass={mass}");
            }
        }
    }
}

#[test]
fn pmf_matches_binomial_closed_form() {
    // C(4,1) * 0.3 * 0.7^3
    let v = multinomial_pmf(&[1, 3], &[0.3, 0.7], 4).unwrap();
    assert!((v - 4.0 * 0.3 * 0.343).abs() < 1e-14);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-5;
    for trial in 0..100 {
        let (n, p, k) = if trial == 0 { (6, 2, 3) } else { (rng.gen_range(3..10), rng.gen_range(1..4), rng.gen_range(2..5)) };
        let (features, labels) = random_problem(&mut rng, n, p, k);
        let lambda = if trial % 2 == 0 { 0.0 } else { rng.gen_range(0.0..1.0) };
        let model = random_model(&mut rng, k, p, 1.5);
        let analytic = penalized_gradient(&model, &features, &labels, lambda).unwrap();
        let flat = model.to_flat();
        let numeric: Vec<f64> = (0..flat.len())
            .map(|i| {
                let mut up = flat.clone();
                let mut down = flat.clone();
                up[i] += h;
                down[i] -= h;
                let f = |v: &[f64]| {
                    let m = MlrModel::from_flat(k, p, v).unwrap();
                    penalized_log_likelihood(&m, &features, &labels, lambda).unwrap()
                };
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect();
        let norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let err = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / norm;
        assert!(err < 1e-6, "trial {trial}: relative error {err:e}");
    }
}

#[test]
fn uniform_model_log_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (features, labels) = random_problem(&mut rng, 13, 3, 4);
    let ll = penalized_log_likelihood(&MlrModel::zeros(4, 3).unwrap(), &features, &labels, 0.0).unwrap();
    assert!((ll + 13.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn fit_beats_every_grid_point() {
    let features = [-1.0, 0.3, 0.8, 2.0];
    let labels = [1, 0, 1, 0];
    let lambda = 0.1;
    let fit = fit_mlr(&features, 1, &labels, 2, &tight(lambda)).unwrap();
    assert!(fit.converged);
    let best = penalized_log_likelihood(&fit.model, &features, &labels, lambda).unwrap();
    let steps = (10.0 / 0.05f64).round() as i32;
    for a in 0..=steps {
        for b in 0..=steps {
            let (alpha, beta) = (-5.0 + 0.05 * a as f64, -5.0 + 0.05 * b as f64);
            let m = MlrModel::new(2, 1, vec![alpha], vec![beta]).unwrap();
            let v = penalized_log_likelihood(&m, &features, &labels, lambda).unwrap();
            assert!(best >= v - 1e-12, "grid point ({alpha}, {beta}) is better: {v} > {best}");
        }
    }
}

/// Penalized binary logistic regression coded from scratch: plain Newton on
/// raw features, `P(y = 1) = 1 / (1 + exp(-(a + x.b)))`.
fn binary_logistic(features: &[f64], p: usize, y: &[bool], lambda: f64) -> Vec<f64> {
    let w = p + 1;
    let mut theta = vec![0.0; w];
    for _ in 0..100 {
        let mut grad: Vec<f64> = theta.iter().map(|t| -lambda * t).collect();
        let mut hess = vec![0.0; w * w];
        for i in 0..w {
            hess[i * w + i] = lambda;
        }
        for (x, &yi) in features.chunks_exact(p).zip(y) {
            let z: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
            let eta: f64 = z.iter().zip(&theta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            let r = f64::from(u8::from(yi)) - mu;
            for a in 0..w {
                grad[a] += r * z[a];
                for b in 0..w {
                    hess[a * w + b] += mu * (1.0 - mu) * z[a] * z[b];
                }
            }
        }
        let step = gauss_solve(hess, grad.clone(), w);
        theta.iter_mut().zip(&step).for_each(|(t, s)| *t += s);
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) < 1e-12 {
            break;
        }
    }
    theta
}

/// Gaussian elimination with partial pivoting.
fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Vec<f64> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs())).unwrap();
        for c in 0..n {
            a.swap(col * n + c, pivot * n + c);
        }
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for c in col..n {
                a[row * n + c] -= f * a[col * n + c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|c| a[row * n + c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row * n + row];
    }
    x
}

#[test]
fn two_category_fit_matches_binary_logistic() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let lambda = 0.01;
    for trial in 0..20 {
        let n = rng.gen_range(20..=200);
        let p = rng.gen_range(1..=5);
        let features: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let truth: Vec<f64> = (0..=p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        // Category 0 plays the role of y = 1; category 1 is the base.
        let labels: Vec<usize> = features
            .chunks_exact(p)
            .map(|x| {
                let eta = truth[0] + x.iter().zip(&truth[1..]).map(|(a, b)| a * b).sum::<f64>();
                usize::from(rng.gen::<f64>() >= 1.0 / (1.0 + (-eta).exp()))
            })
            .collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 0).collect();
        let reference = binary_logistic(&features, p, &y, lambda);
        let fit = fit_mlr(&features, p, &labels, 2, &tight(lambda)).unwrap();
        assert!(fit.converged, "trial {trial} did not converge");
        let diff = max_diff(&fit.model.to_flat(), &reference);
        assert!(diff < 1e-6, "trial {trial}: max-norm difference {diff:e}");
    }
}

#[test]
fn refits_from_different_starts_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..10 {
        let (n, p, k) = (rng.gen_range(10..60), rng.gen_range(1..4), rng.gen_range(2..6));
        let (features, labels) = random_problem(&mut rng, n, p, k);
        let from_zero = fit_mlr(&features, p, &labels, k, &tight(0.05)).unwrap();
        let start = random_model(&mut rng, k, p, 3.0);
        let from_random = fit_mlr_from(&features, &labels, &start, &tight(0.05)).unwrap();
        assert!(from_zero.converged && from_random.converged);
        let diff = max_diff(&from_zero.model.to_flat(), &from_random.model.to_flat());
        assert!(diff < 1e-6, "difference {diff:e}");
    }
}

#[test]
fn separable_one_dimensional_classes_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut features = Vec::new();
    while features.len() < 50 {
        let x: f64 = rng.gen();
        if (x - 0.5).abs() > 0.02 {
            features.push(x);
        }
    }
    let labels: Vec<usize> = features.iter().map(|&x| usize::from(x > 0.5)).collect();
    let fit = fit_mlr(&features, 1, &labels, 2, &MlrFitConfig::default()).unwrap();
    for (&x, &l) in features.iter().zip(&labels) {
        assert_eq!(fit.model.predict_class(&[x]).unwrap(), l, "x = {x}");
    }
}

#[test]
fn optimizers_reach_the_same_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let (features, labels) = random_problem(&mut rng, 80, 3, 4);
    let newton = fit_mlr(&features, 3, &labels, 4, &MlrFitConfig { optimizer: Optimizer::Newton, ..tight(0.1) }).unwrap();
    let first_order = fit_mlr(
        &features,
        3,
        &labels,
        4,
        &MlrFitConfig { optimizer: Optimizer::FirstOrder, max_iterations: 5000, ..tight(0.1) },
    )
    .unwrap();
    assert!(newton.converged && first_order.converged);
    assert!(max_diff(&newton.model.to_flat(), &first_order.model.to_flat()) < 1e-6);
}

#[test]
fn many_category_newton_reaches_a_stationary_point() {
    // 40 categories x 11 parameters is past the dense-factorization size.
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let (p, k, n) = (10, 40, 600);
    let features: Vec<f64> = (0..n * p).map(|_| rng.gen::<f64>()).collect();
    let labels: Vec<usize> = features
        .chunks_exact(p)
        .map(|x| ((x[0] * 8.0) as usize).min(7) * 5 + ((x[1] * 5.0) as usize).min(4))
        .collect();
    let lambda = 1e-3;
    let fit = fit_mlr(&features, p, &labels, k, &MlrFitConfig { l2_penalty: lambda, ..Default::default() }).unwrap();
    assert!(fit.converged, "gradient norm {}", fit.gradient_norm);
    let raw = penalized_gradient(&fit.model, &features, &labels, lambda).unwrap();
    let norm = raw.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(norm < 1e-4, "raw gradient max-norm {norm:e}");
    let lbfgs = fit_mlr(
        &features,
        p,
        &labels,
        k,
        &MlrFitConfig { l2_penalty: lambda, optimizer: Optimizer::FirstOrder, max_iterations: 300, ..Default::default() },
    )
    .unwrap();
    let ll = |m: &MlrModel| penalized_log_likelihood(m, &features, &labels, lambda).unwrap();
    assert!(ll(&fit.model) >= ll(&lbfgs.model) - 1e-6);
}

proptest! {
    #[test]
    fn flat_round_trip(k in 2usize..6, p in 0usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, k, p, 5.0);
        let again = MlrModel::from_flat(k, p, &model.to_flat()).unwrap();
        prop_assert_eq!(again, model);
    }

    #[test]
    fn predicted_class_is_most_probable(k in 2usize..7, p in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = random_model(&mut rng, k, p, 4.0);
        let x: Vec<f64> = (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let probs = model.class_probabilities(&x).unwrap();
        let class = model.predict_class(&x).unwrap();
        prop_assert!(probs.iter().all(|&q| q <= probs[class]));
    }
}
