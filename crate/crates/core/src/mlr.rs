//! Multinomial logistic regression.
//!
//! For `K` categories with the last one (`K-1`) as base, category `j < K-1`
//! has log-odds `log(theta_j / theta_base) = alpha_j + x . beta_j`. Binary
//! logistic regression is the `K = 2` case. Parameters are fitted by
//! maximizing the L2-penalized log-likelihood
//!
//! ```text
//! sum_i log theta_{i, label_i} - lambda/2 * sum_j (alpha_j^2 + |beta_j|^2)
//! ```
//!
//! with exact Newton steps (step-halving on any decrease) for moderate
//! parameter counts and L-BFGS beyond that. Features are standardized
//! internally; the penalty is always applied to the raw-scale parameters, so
//! standardization only changes the conditioning, not the optimum.
//!
//! Flat parameter vectors use the order `alpha_1, beta_1, ..., alpha_{K-1},
//! beta_{K-1}`, i.e. `K-1` blocks of `p + 1` values.

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MlrError {
    #[error("need at least 2 categories, got {0}")]
    TooFewCategories(usize),
    #[error("no training rows")]
    Empty,
    #[error("label {label} at row {row} is out of range for {k} categories")]
    LabelOutOfRange { row: usize, label: usize, k: usize },
    #[error("expected {expected} values, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Probability of observing `counts` in `n` independent trials with event
/// probabilities `theta` (the multinomial mass function). Evaluated in log
/// space; a zero-probability cell with zero count contributes a factor 1.
pub fn multinomial_pmf(counts: &[u64], theta: &[f64], n: u64) -> Result<f64, MlrError> {
    if counts.len() != theta.len() {
        return Err(MlrError::DimensionMismatch { expected: counts.len(), found: theta.len() });
    }
    if counts.iter().sum::<u64>() != n {
        return Err(MlrError::InvalidArgument(format!("counts do not sum to n = {n}")));
    }
    if theta.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(MlrError::InvalidArgument("probabilities must be finite and non-negative".into()));
    }
    if (theta.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(MlrError::InvalidArgument("probabilities do not sum to 1".into()));
    }
    let mut log_p = ln_gamma(n as f64 + 1.0);
    for (&c, &t) in counts.iter().zip(theta) {
        if c == 0 {
            continue;
        }
        if t == 0.0 {
            return Ok(0.0);
        }
        log_p += c as f64 * t.ln() - ln_gamma(c as f64 + 1.0);
    }
    Ok(log_p.exp())
}

/// Writes a numerically stable softmax of `logits` into `out` and returns
/// the log of the normalizer.
fn softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    max + total.ln()
}

/// Fitted coefficients. The base category is always the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlrModel {
    n_classes: usize,
    n_features: usize,
    intercepts: Vec<f64>,
    /// `(K-1) x p`, row-major.
    coefficients: Vec<f64>,
}

impl MlrModel {
    pub fn new(
        n_classes: usize,
        n_features: usize,
        intercepts: Vec<f64>,
        coefficients: Vec<f64>,
    ) -> Result<Self, MlrError> {
        if n_classes < 2 {
            return Err(MlrError::TooFewCategories(n_classes));
        }
        if intercepts.len() != n_classes - 1 {
            return Err(MlrError::DimensionMismatch { expected: n_classes - 1, found: intercepts.len() });
        }
        if coefficients.len() != (n_classes - 1) * n_features {
            return Err(MlrError::DimensionMismatch {
                expected: (n_classes - 1) * n_features,
                found: coefficients.len(),
            });
        }
        if intercepts.iter().chain(&coefficients).any(|v| !v.is_finite()) {
            return Err(MlrError::NonFinite("model coefficients".into()));
        }
        Ok(Self { n_classes, n_features, intercepts, coefficients })
    }

    pub fn zeros(n_classes: usize, n_features: usize) -> Result<Self, MlrError> {
        Self::new(
            n_classes,
            n_features,
            vec![0.0; n_classes.saturating_sub(1)],
            vec![0.0; n_classes.saturating_sub(1) * n_features],
        )
    }

    /// Builds a model from a flat `(alpha_j, beta_j)` block vector.
    pub fn from_flat(n_classes: usize, n_features: usize, params: &[f64]) -> Result<Self, MlrError> {
        if n_classes < 2 {
            return Err(MlrError::TooFewCategories(n_classes));
        }
        let width = n_features + 1;
        if params.len() != (n_classes - 1) * width {
            return Err(MlrError::DimensionMismatch {
                expected: (n_classes - 1) * width,
                found: params.len(),
            });
        }
        let intercepts = params.chunks_exact(width).map(|b| b[0]).collect();
        let coefficients = params.chunks_exact(width).flat_map(|b| b[1..].iter().copied()).collect();
        Self::new(n_classes, n_features, intercepts, coefficients)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_parameters());
        for j in 0..self.n_classes - 1 {
            out.push(self.intercepts[j]);
            out.extend_from_slice(self.beta(j));
        }
        out
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Number of stored regression parameters, `(K-1)(p+1)`.
    pub fn n_parameters(&self) -> usize {
        (self.n_classes - 1) * (self.n_features + 1)
    }

    pub fn base_category(&self) -> usize {
        self.n_classes - 1
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.intercepts
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn beta(&self, j: usize) -> &[f64] {
        &self.coefficients[j * self.n_features..(j + 1) * self.n_features]
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), MlrError> {
        if x.len() != self.n_features {
            return Err(MlrError::DimensionMismatch { expected: self.n_features, found: x.len() });
        }
        Ok(())
    }

    /// Logits with the base category pinned at zero.
    pub(crate) fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out[..self.n_classes - 1].iter_mut().enumerate() {
            *o = self.intercepts[j] + dot(self.beta(j), x);
        }
        out[self.n_classes - 1] = 0.0;
    }

    /// Category probabilities; returns the log normalizer.
    pub(crate) fn probabilities_into(&self, x: &[f64], logits: &mut [f64], out: &mut [f64]) -> f64 {
        self.logits_into(x, logits);
        softmax_into(logits, out)
    }

    pub fn class_probabilities(&self, x: &[f64]) -> Result<Vec<f64>, MlrError> {
        self.check_dim(x)?;
        let mut logits = vec![0.0; self.n_classes];
        let mut out = vec![0.0; self.n_classes];
        self.probabilities_into(x, &mut logits, &mut out);
        Ok(out)
    }

    /// Most probable category; ties go to the lowest index.
    pub fn predict_class(&self, x: &[f64]) -> Result<usize, MlrError> {
        self.check_dim(x)?;
        let mut logits = vec![0.0; self.n_classes];
        self.logits_into(x, &mut logits);
        Ok(argmax(&logits))
    }
}

/// First index of the maximum.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_problem(
    features: &[f64],
    n_features: usize,
    labels: &[usize],
    n_classes: usize,
) -> Result<(), MlrError> {
    if n_classes < 2 {
        return Err(MlrError::TooFewCategories(n_classes));
    }
    if labels.is_empty() {
        return Err(MlrError::Empty);
    }
    if features.len() != labels.len() * n_features {
        return Err(MlrError::DimensionMismatch {
            expected: labels.len() * n_features,
            found: features.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
        return Err(MlrError::LabelOutOfRange { row, label, k: n_classes });
    }
    if let Some(i) = features.iter().position(|v| !v.is_finite()) {
        return Err(MlrError::NonFinite(format!(
            "feature at row {}, column {}",
            i / n_features.max(1),
            i % n_features.max(1)
        )));
    }
    Ok(())
}

/// Penalized log-likelihood of `labels` given row-major `features`, with
/// the penalty `lambda/2` times the squared norm of all parameters.
pub fn penalized_log_likelihood(
    model: &MlrModel,
    features: &[f64],
    labels: &[usize],
    lambda: f64,
) -> Result<f64, MlrError> {
    let p = model.n_features;
    check_problem(features, p, labels, model.n_classes)?;
    let k = model.n_classes;
    let mut logits = vec![0.0; k];
    let mut ll = 0.0;
    for (x, &label) in features.chunks_exact(p.max(1)).zip(labels) {
        let x = &x[..p];
        model.logits_into(x, &mut logits);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        ll += logits[label] - lse;
    }
    let sq: f64 = model.intercepts.iter().chain(&model.coefficients).map(|v| v * v).sum();
    Ok(ll - 0.5 * lambda * sq)
}

/// Gradient of [`penalized_log_likelihood`] in flat parameter order.
pub fn penalized_gradient(
    model: &MlrModel,
    features: &[f64],
    labels: &[usize],
    lambda: f64,
) -> Result<Vec<f64>, MlrError> {
    let p = model.n_features;
    check_problem(features, p, labels, model.n_classes)?;
    let k = model.n_classes;
    let width = p + 1;
    let mut grad = model.to_flat();
    grad.iter_mut().for_each(|g| *g *= -lambda);
    let mut logits = vec![0.0; k];
    let mut probs = vec![0.0; k];
    for (x, &label) in features.chunks_exact(p.max(1)).zip(labels) {
        let x = &x[..p];
        model.probabilities_into(x, &mut logits, &mut probs);
        for j in 0..k - 1 {
            let r = f64::from(u8::from(label == j)) - probs[j];
            let block = &mut grad[j * width..(j + 1) * width];
            block[0] += r;
            for (g, xv) in block[1..].iter_mut().zip(x) {
                *g += r * xv;
            }
        }
    }
    Ok(grad)
}

/// Which ascent method to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Optimizer {
    /// Newton when the parameter count is at most [`NEWTON_MAX_PARAMETERS`],
    /// L-BFGS otherwise.
    #[default]
    Auto,
    Newton,
    FirstOrder,
}

/// Parameter-count ceiling for exact Newton under [`Optimizer::Auto`].
pub const NEWTON_MAX_PARAMETERS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlrFitConfig {
    pub l2_penalty: f64,
    pub max_iterations: usize,
    /// Stop once the max-norm of the penalized gradient is at most this.
    pub gradient_tolerance: f64,
    pub optimizer: Optimizer,
}

impl Default for MlrFitConfig {
    fn default() -> Self {
        Self { l2_penalty: 1e-6, max_iterations: 100, gradient_tolerance: 1e-6, optimizer: Optimizer::Auto }
    }
}

impl MlrFitConfig {
    fn validate(&self) -> Result<(), MlrError> {
        if !(self.l2_penalty >= 0.0) || !self.l2_penalty.is_finite() {
            return Err(MlrError::InvalidArgument(format!("l2 penalty must be >= 0, got {}", self.l2_penalty)));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(MlrError::InvalidArgument(format!(
                "gradient tolerance must be > 0, got {}",
                self.gradient_tolerance
            )));
        }
        Ok(())
    }
}

/// The method that actually ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Newton,
    Lbfgs,
}

/// A fitted model plus optimizer diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct MlrFit {
    pub model: MlrModel,
    /// True when the gradient tolerance was met, false when the iteration
    /// budget ran out or the line search could make no further progress.
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the penalized gradient at the returned parameters, in the
    /// standardized coordinates the optimizer works in.
    pub gradient_norm: f64,
    pub objective: f64,
    pub method: Method,
}

/// Fits from all-zero coefficients.
pub fn fit_mlr(
    features: &[f64],
    n_features: usize,
    labels: &[usize],
    n_classes: usize,
    config: &MlrFitConfig,
) -> Result<MlrFit, MlrError> {
    let start = MlrModel::zeros(n_classes.max(2), n_features)?;
    check_problem(features, n_features, labels, n_classes)?;
    fit_mlr_from(features, labels, &start, config)
}

/// Fits starting from `start`, which fixes `K` and `p`.
pub fn fit_mlr_from(
    features: &[f64],
    labels: &[usize],
    start: &MlrModel,
    config: &MlrFitConfig,
) -> Result<MlrFit, MlrError> {
    config.validate()?;
    check_problem(features, start.n_features, labels, start.n_classes)?;
    let problem = Problem::new(features, labels, start.n_classes, start.n_features, config.l2_penalty);
    let theta = problem.to_standardized(&start.to_flat());
    let method = match config.optimizer {
        Optimizer::Newton => Method::Newton,
        Optimizer::FirstOrder => Method::Lbfgs,
        Optimizer::Auto if start.n_parameters() <= NEWTON_MAX_PARAMETERS => Method::Newton,
        Optimizer::Auto => Method::Lbfgs,
    };
    let outcome = match method {
        Method::Newton => newton(&problem, theta, config),
        Method::Lbfgs => lbfgs(&problem, theta, config),
    };
    let raw = problem.to_raw(&outcome.theta);
    let model = MlrModel::from_flat(start.n_classes, start.n_features, &raw)?;
    Ok(MlrFit {
        model,
        converged: outcome.converged,
        iterations: outcome.iterations,
        gradient_norm: outcome.gradient_norm,
        objective: outcome.objective,
        method,
    })
}

/// The objective in standardized coordinates. Row `i` of `design` is
/// `(1, (x_i - mean) / scale)`.
struct Problem<'a> {
    labels: &'a [usize],
    design: Vec<f64>,
    n_classes: usize,
    width: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
    lambda: f64,
    /// `T^T T` where `T` maps a standardized block to raw coordinates.
    penalty_gram: DMatrix<f64>,
}

struct Evaluation {
    objective: f64,
    gradient: Vec<f64>,
}

struct Outcome {
    theta: Vec<f64>,
    converged: bool,
    iterations: usize,
    gradient_norm: f64,
    objective: f64,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl<'a> Problem<'a> {
    fn new(features: &[f64], labels: &'a [usize], n_classes: usize, p: usize, lambda: f64) -> Self {
        let n = labels.len();
        let width = p + 1;
        let mut mean = vec![0.0; p];
        let mut scale = vec![1.0; p];
        for c in 0..p {
            let m = (0..n).map(|i| features[i * p + c]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (features[i * p + c] - m).powi(2)).sum::<f64>() / n as f64;
            mean[c] = m;
            let sd = var.sqrt();
            // Constant columns standardize to zero; their coefficient is
            // pinned at zero by the penalty.
            if sd > 1e-12 * m.abs().max(1e-300) && sd > 0.0 {
                scale[c] = sd;
            }
        }
        let mut design = Vec::with_capacity(n * width);
        for i in 0..n {
            design.push(1.0);
            for c in 0..p {
                design.push((features[i * p + c] - mean[c]) / scale[c]);
            }
        }
        let mut t = DMatrix::<f64>::zeros(width, width);
        t[(0, 0)] = 1.0;
        for c in 0..p {
            t[(0, c + 1)] = -mean[c] / scale[c];
            t[(c + 1, c + 1)] = 1.0 / scale[c];
        }
        let penalty_gram = t.transpose() * &t;
        Self { labels, design, n_classes, width, mean, scale, lambda, penalty_gram }
    }

    fn n_params(&self) -> usize {
        (self.n_classes - 1) * self.width
    }

    fn to_raw(&self, theta: &[f64]) -> Vec<f64> {
        let mut raw = theta.to_vec();
        for block in raw.chunks_exact_mut(self.width) {
            let mut shift = 0.0;
            for c in 0..self.width - 1 {
                block[c + 1] /= self.scale[c];
                shift += self.mean[c] * block[c + 1];
            }
            block[0] -= shift;
        }
        raw
    }

    fn to_standardized(&self, raw: &[f64]) -> Vec<f64> {
        let mut theta = raw.to_vec();
        for block in theta.chunks_exact_mut(self.width) {
            let shift: f64 = (0..self.width - 1).map(|c| self.mean[c] * block[c + 1]).sum();
            block[0] += shift;
            for c in 0..self.width - 1 {
                block[c + 1] *= self.scale[c];
            }
        }
        theta
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.width..(i + 1) * self.width]
    }

    /// Fills `probs` for row `i`; returns the log normalizer and the
    /// row's logits stay in `logits`.
    fn row_probabilities(&self, theta: &[f64], i: usize, logits: &mut [f64], probs: &mut [f64]) -> f64 {
        let z = self.row(i);
        for (j, l) in logits[..self.n_classes - 1].iter_mut().enumerate() {
            *l = dot(&theta[j * self.width..(j + 1) * self.width], z);
        }
        logits[self.n_classes - 1] = 0.0;
        softmax_into(logits, probs)
    }

    fn penalty(&self, theta: &[f64]) -> f64 {
        let raw = self.to_raw(theta);
        0.5 * self.lambda * raw.iter().map(|v| v * v).sum::<f64>()
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let k = self.n_classes;
        let mut logits = vec![0.0; k];
        let mut probs = vec![0.0; k];
        let mut ll = 0.0;
        for (i, &label) in self.labels.iter().enumerate() {
            let lse = self.row_probabilities(theta, i, &mut logits, &mut probs);
            ll += logits[label] - lse;
        }
        ll - self.penalty(theta)
    }

    fn evaluate(&self, theta: &[f64]) -> Evaluation {
        let k = self.n_classes;
        let w = self.width;
        let mut logits = vec![0.0; k];
        let mut probs = vec![0.0; k];
        let mut gradient = vec![0.0; self.n_params()];
        let mut ll = 0.0;
        for (i, &label) in self.labels.iter().enumerate() {
            let lse = self.row_probabilities(theta, i, &mut logits, &mut probs);
            ll += logits[label] - lse;
            let z = self.row(i);
            for j in 0..k - 1 {
                let r = f64::from(u8::from(label == j)) - probs[j];
                if r == 0.0 {
                    continue;
                }
                for (g, zv) in gradient[j * w..(j + 1) * w].iter_mut().zip(z) {
                    *g += r * zv;
                }
            }
        }
        self.add_penalty_gradient(theta, &mut gradient);
        Evaluation { objective: ll - self.penalty(theta), gradient }
    }

    fn add_penalty_gradient(&self, theta: &[f64], gradient: &mut [f64]) {
        if self.lambda == 0.0 {
            return;
        }
        let w = self.width;
        for (block, g) in theta.chunks_exact(w).zip(gradient.chunks_exact_mut(w)) {
            for r in 0..w {
                let a: f64 = (0..w).map(|c| self.penalty_gram[(r, c)] * block[c]).sum();
                g[r] -= self.lambda * a;
            }
        }
    }

    /// Negative Hessian of the objective. Row contributions where both
    /// category probabilities are negligible are skipped.
    fn negative_hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        const NEGLIGIBLE: f64 = 1e-14;
        let k = self.n_classes;
        let w = self.width;
        let d = self.n_params();
        let mut h = DMatrix::<f64>::zeros(d, d);
        let mut logits = vec![0.0; k];
        let mut probs = vec![0.0; k];
        let mut active = Vec::with_capacity(k);
        let mut outer = vec![0.0; w * w];
        for i in 0..self.labels.len() {
            self.row_probabilities(theta, i, &mut logits, &mut probs);
            active.clear();
            active.extend((0..k - 1).filter(|&j| probs[j] > NEGLIGIBLE));
            if active.is_empty() {
                continue;
            }
            let z = self.row(i);
            for a in 0..w {
                for b in a..w {
                    outer[a * w + b] = z[a] * z[b];
                }
            }
            for (ai, &j) in active.iter().enumerate() {
                for &l in &active[ai..] {
                    let weight = if j == l { probs[j] * (1.0 - probs[j]) } else { -probs[j] * probs[l] };
                    let (r0, c0) = (j * w, l * w);
                    for a in 0..w {
                        for b in a..w {
                            h[(r0 + a, c0 + b)] += weight * outer[a * w + b];
                        }
                    }
                    if j != l {
                        // Lower triangle of an off-diagonal block.
                        for a in 1..w {
                            for b in 0..a {
                                h[(r0 + a, c0 + b)] += weight * outer[b * w + a];
                            }
                        }
                    }
                }
            }
        }
        // Mirror the upper triangle.
        for r in 0..d {
            for c in 0..r {
                h[(r, c)] = h[(c, r)];
            }
        }
        if self.lambda > 0.0 {
            for j in 0..k - 1 {
                let o = j * w;
                for a in 0..w {
                    for b in 0..w {
                        h[(o + a, o + b)] += self.lambda * self.penalty_gram[(a, b)];
                    }
                }
            }
        }
        h
    }
}

/// Largest number of step halvings before giving up on a direction.
const MAX_HALVINGS: usize = 50;

fn newton(problem: &Problem, mut theta: Vec<f64>, config: &MlrFitConfig) -> Outcome {
    let mut eval = problem.evaluate(&theta);
    let mut iterations = 0;
    loop {
        let gnorm = max_norm(&eval.gradient);
        if gnorm <= config.gradient_tolerance {
            return Outcome { theta, converged: true, iterations, gradient_norm: gnorm, objective: eval.objective };
        }
        if iterations >= config.max_iterations {
            return Outcome { theta, converged: false, iterations, gradient_norm: gnorm, objective: eval.objective };
        }
        iterations += 1;
        let direction = if problem.n_params() <= DENSE_HESSIAN_MAX_PARAMETERS {
            newton_direction(problem.negative_hessian(&theta), &eval.gradient)
        } else {
            let gnorm2 = dot(&eval.gradient, &eval.gradient).sqrt();
            CurvatureCache::new(problem, &theta).solve(&eval.gradient, gnorm2)
        };
        // Near the optimum the predicted gain drops below the rounding noise
        // of the objective; a full step is then judged by the gradient.
        let gain = 0.5 * dot(&direction, &eval.gradient);
        if gain <= 1e-13 * (1.0 + eval.objective.abs()) {
            let trial: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t + d).collect();
            let trial_eval = problem.evaluate(&trial);
            if max_norm(&trial_eval.gradient) < gnorm {
                theta = trial;
                eval = trial_eval;
                continue;
            }
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t + step * d).collect();
            let value = problem.objective(&trial);
            if value >= eval.objective {
                accepted = Some(trial);
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some(trial) => {
                theta = trial;
                eval = problem.evaluate(&theta);
            }
            None => {
                return Outcome { theta, converged: false, iterations, gradient_norm: gnorm, objective: eval.objective };
            }
        }
    }
}

/// Solves `H d = g` by Cholesky, adding diagonal jitter if `H` is singular
/// (possible only without a penalty).
fn newton_direction(h: DMatrix<f64>, gradient: &[f64]) -> Vec<f64> {
    let g = DVector::from_column_slice(gradient);
    let diag_scale = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut jitter = 0.0;
    for _ in 0..12 {
        let mut m = h.clone();
        if jitter > 0.0 {
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
        }
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return d.as_slice().to_vec();
            }
        }
        jitter = if jitter == 0.0 { 1e-10 * diag_scale } else { jitter * 100.0 };
    }
    gradient.to_vec()
}

/// Above this many parameters the Newton system is solved by conjugate
/// gradients on Hessian-vector products instead of a dense factorization.
const DENSE_HESSIAN_MAX_PARAMETERS: usize = 256;

/// Upper bound on conjugate-gradient iterations per Newton step.
const MAX_CG_ITERATIONS: usize = 500;

/// Row probabilities at a fixed point, kept sparse, plus the block-diagonal
/// preconditioner. Everything needed for `H v` without forming `H`.
struct CurvatureCache<'p, 'a> {
    problem: &'p Problem<'a>,
    /// `offsets[i]..offsets[i+1]` indexes row `i`'s non-negligible
    /// non-base categories.
    offsets: Vec<usize>,
    classes: Vec<u32>,
    probs: Vec<f64>,
    /// Cholesky factors of the diagonal blocks, one per category.
    blocks: Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
}

impl<'p, 'a> CurvatureCache<'p, 'a> {
    fn new(problem: &'p Problem<'a>, theta: &[f64]) -> Self {
        const NEGLIGIBLE: f64 = 1e-14;
        let k = problem.n_classes;
        let w = problem.width;
        let n = problem.labels.len();
        let mut logits = vec![0.0; k];
        let mut row_probs = vec![0.0; k];
        let mut offsets = Vec::with_capacity(n + 1);
        let mut classes = Vec::new();
        let mut probs = Vec::new();
        let mut diag = vec![DMatrix::<f64>::zeros(w, w); k - 1];
        offsets.push(0);
        for i in 0..n {
            problem.row_probabilities(theta, i, &mut logits, &mut row_probs);
            let z = problem.row(i);
            for j in 0..k - 1 {
                let pj = row_probs[j];
                if pj > NEGLIGIBLE {
                    classes.push(j as u32);
                    probs.push(pj);
                    let weight = pj * (1.0 - pj);
                    let block = &mut diag[j];
                    for b in 0..w {
                        for a in b..w {
                            block[(a, b)] += weight * z[a] * z[b];
                        }
                    }
                }
            }
            offsets.push(classes.len());
        }
        let blocks = diag
            .into_iter()
            .map(|mut block| {
                for b in 0..w {
                    for a in b..w {
                        block[(a, b)] += problem.lambda * problem.penalty_gram[(a, b)];
                        block[(b, a)] = block[(a, b)];
                    }
                }
                block.cholesky()
            })
            .collect();
        Self { problem, offsets, classes, probs, blocks }
    }

    /// `-H v` of the objective, i.e. the positive semidefinite curvature.
    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let w = self.problem.width;
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut u = Vec::new();
        for i in 0..self.offsets.len() - 1 {
            let range = self.offsets[i]..self.offsets[i + 1];
            if range.is_empty() {
                continue;
            }
            let z = self.problem.row(i);
            u.clear();
            let mut mean = 0.0;
            for (&j, &pj) in self.classes[range.clone()].iter().zip(&self.probs[range.clone()]) {
                let j = j as usize;
                let uj = dot(&v[j * w..(j + 1) * w], z);
                mean += pj * uj;
                u.push(uj);
            }
            for ((&j, &pj), uj) in self.classes[range.clone()].iter().zip(&self.probs[range]).zip(&u) {
                let t = pj * (uj - mean);
                let j = j as usize;
                for (o, zv) in out[j * w..(j + 1) * w].iter_mut().zip(z) {
                    *o += t * zv;
                }
            }
        }
        if self.problem.lambda > 0.0 {
            for (vb, ob) in v.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                for r in 0..w {
                    let a: f64 = (0..w).map(|c| self.problem.penalty_gram[(r, c)] * vb[c]).sum();
                    ob[r] += self.problem.lambda * a;
                }
            }
        }
    }

    fn precondition(&self, r: &[f64], out: &mut [f64]) {
        let w = self.problem.width;
        for ((rb, ob), chol) in r.chunks_exact(w).zip(out.chunks_exact_mut(w)).zip(&self.blocks) {
            match chol {
                Some(c) => ob.copy_from_slice(c.solve(&DVector::from_column_slice(rb)).as_slice()),
                None => ob.copy_from_slice(rb),
            }
        }
    }

    /// Preconditioned conjugate gradients for `H d = g`, stopping at a
    /// residual of `min(0.1, sqrt(|g|)) * |g|`, so steps become exact as
    /// the gradient vanishes.
    fn solve(&self, gradient: &[f64], gnorm: f64) -> Vec<f64> {
        let n = gradient.len();
        let target = gnorm * gnorm.sqrt().min(0.1);
        let mut x = vec![0.0; n];
        let mut r = gradient.to_vec();
        let mut z = vec![0.0; n];
        self.precondition(&r, &mut z);
        let mut d = z.clone();
        let mut rz = dot(&r, &z);
        let mut hd = vec![0.0; n];
        for _ in 0..MAX_CG_ITERATIONS {
            self.apply(&d, &mut hd);
            let curvature = dot(&d, &hd);
            if !(curvature > 0.0) {
                break;
            }
            let alpha = rz / curvature;
            x.iter_mut().zip(&d).for_each(|(xi, di)| *xi += alpha * di);
            r.iter_mut().zip(&hd).for_each(|(ri, hi)| *ri -= alpha * hi);
            if dot(&r, &r).sqrt() <= target {
                break;
            }
            self.precondition(&r, &mut z);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            d.iter_mut().zip(&z).for_each(|(di, zi)| *di = zi + beta * *di);
        }
        if x.iter().all(|v| v.is_finite()) && dot(&x, gradient) > 0.0 {
            x
        } else {
            gradient.to_vec()
        }
    }
}

const LBFGS_MEMORY: usize = 10;

fn lbfgs(problem: &Problem, mut theta: Vec<f64>, config: &MlrFitConfig) -> Outcome {
    let mut eval = problem.evaluate(&theta);
    let mut history: std::collections::VecDeque<(Vec<f64>, Vec<f64>, f64)> =
        std::collections::VecDeque::with_capacity(LBFGS_MEMORY);
    let mut iterations = 0;
    loop {
        let gnorm = max_norm(&eval.gradient);
        if gnorm <= config.gradient_tolerance {
            return Outcome { theta, converged: true, iterations, gradient_norm: gnorm, objective: eval.objective };
        }
        if iterations >= config.max_iterations {
            return Outcome { theta, converged: false, iterations, gradient_norm: gnorm, objective: eval.objective };
        }
        iterations += 1;

        // Two-loop recursion on the negated objective; `direction` ascends.
        let mut q = eval.gradient.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let gamma = history
            .back()
            .map(|(s, y, _)| dot(s, y) / dot(y, y))
            .unwrap_or_else(|| 1.0 / gnorm.max(1.0));
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut direction = q;
        let mut slope = dot(&direction, &eval.gradient);
        if !(slope > 0.0) {
            history.clear();
            direction = eval.gradient.clone();
            slope = dot(&direction, &direction);
        }

        let tiny_gain = slope <= 1e-13 * (1.0 + eval.objective.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t + step * d).collect();
            let trial_eval = problem.evaluate(&trial);
            let sufficient = trial_eval.objective >= eval.objective + 1e-4 * step * slope;
            if sufficient || (tiny_gain && max_norm(&trial_eval.gradient) < gnorm) {
                accepted = Some((trial, trial_eval));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, trial_eval)) = accepted else {
            if history.is_empty() {
                return Outcome { theta, converged: false, iterations, gradient_norm: gnorm, objective: eval.objective };
            }
            history.clear();
            continue;
        };
        // Curvature pair for the negated objective.
        let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = eval.gradient.iter().zip(&trial_eval.gradient).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == LBFGS_MEMORY {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        theta = trial;
        eval = trial_eval;
    }
}
