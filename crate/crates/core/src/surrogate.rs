//! Tree surrogates: each fitted tree's allocation of its training rows to
//! leaves is treated as a `K`-category nominal outcome, a multinomial
//! logistic regression is fitted to it, and the tree's split structure is
//! dropped. Only the regression coefficients and the leaf values are kept.

use thiserror::Error;

use crate::data::Dataset;
use crate::exec::{try_map_indexed, Execution};
use crate::forest::{DecisionTree, Forest, ForestConfig};
use crate::mlr::{argmax, fit_mlr, Method, MlrError, MlrFitConfig, MlrModel};

#[derive(Debug, Error, PartialEq)]
pub enum SurrogateError {
    #[error("rows do not match the tree: {0}")]
    RowMismatch(String),
    #[error("dataset does not match the one the forest was trained on")]
    DatasetMismatch,
    #[error("expected a feature vector of length {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid surrogate: {0}")]
    Invalid(String),
    #[error("tree {tree}: {source}")]
    Fit { tree: usize, source: MlrError },
    #[error(transparent)]
    Mlr(#[from] MlrError),
}

/// How a surrogate turns category probabilities into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PredictionMode {
    /// Value of the most probable leaf.
    Argmax,
    /// Probability-weighted mean of all leaf values.
    #[default]
    Expectation,
}

/// A tree's training rows labelled by the leaf each one reaches.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafDataset {
    pub features: Vec<f64>,
    pub n_features: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LeafDataset {
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        self.labels.iter().for_each(|&l| h[l] += 1);
        h
    }
}

/// Labels `rows` by traversing `tree`. The label histogram must reproduce
/// the tree's stored leaf counts, which catches rows the tree was not
/// trained on.
pub fn extract_leaf_dataset(
    tree: &DecisionTree,
    dataset: &Dataset,
    rows: &[usize],
) -> Result<LeafDataset, SurrogateError> {
    let p = dataset.n_features();
    if p != tree.n_features() {
        return Err(SurrogateError::DimensionMismatch { expected: tree.n_features(), found: p });
    }
    if let Some(&r) = rows.iter().find(|&&r| r >= dataset.n_rows()) {
        return Err(SurrogateError::RowMismatch(format!(
            "row {r} is out of range for {} rows",
            dataset.n_rows()
        )));
    }
    let mut features = Vec::with_capacity(rows.len() * p);
    let mut labels = Vec::with_capacity(rows.len());
    for &r in rows {
        let x = dataset.row(r);
        features.extend_from_slice(x);
        labels.push(tree.leaf_of(x));
    }
    let leaves = LeafDataset { features, n_features: p, labels, n_classes: tree.n_leaves() };
    let expected: Vec<usize> = tree.leaves().iter().map(|l| l.count as usize).collect();
    if leaves.histogram() != expected {
        return Err(SurrogateError::RowMismatch(format!(
            "{} rows reproduce leaf counts {:?}, tree stores {:?}",
            rows.len(),
            leaves.histogram(),
            expected
        )));
    }
    Ok(leaves)
}

/// Replacement for one tree: a routing model over its `K` leaves plus the
/// leaf values. Trees with a single leaf need no routing model.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSurrogate {
    model: Option<MlrModel>,
    leaf_values: Vec<f64>,
    mode: PredictionMode,
}

impl TreeSurrogate {
    pub fn new(
        model: Option<MlrModel>,
        leaf_values: Vec<f64>,
        mode: PredictionMode,
    ) -> Result<Self, SurrogateError> {
        match &model {
            None if leaf_values.len() != 1 => {
                return Err(SurrogateError::Invalid(format!(
                    "{} leaves need a routing model",
                    leaf_values.len()
                )))
            }
            Some(m) if m.n_classes() != leaf_values.len() => {
                return Err(SurrogateError::Invalid(format!(
                    "model has {} categories for {} leaves",
                    m.n_classes(),
                    leaf_values.len()
                )))
            }
            _ => {}
        }
        if leaf_values.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::Invalid("non-finite leaf value".into()));
        }
        Ok(Self { model, leaf_values, mode })
    }

    pub fn model(&self) -> Option<&MlrModel> {
        self.model.as_ref()
    }

    pub fn leaf_values(&self) -> &[f64] {
        &self.leaf_values
    }

    pub fn mode(&self) -> PredictionMode {
        self.mode
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_values.len()
    }

    pub fn with_mode(mut self, mode: PredictionMode) -> Self {
        self.mode = mode;
        self
    }

    /// Most probable leaf for `x` (leaf 0 for single-leaf surrogates).
    pub fn route(&self, x: &[f64]) -> Result<usize, SurrogateError> {
        match &self.model {
            None => Ok(0),
            Some(m) => Ok(m.predict_class(x)?),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64, SurrogateError> {
        let Some(model) = &self.model else {
            return Ok(self.leaf_values[0]);
        };
        if x.len() != model.n_features() {
            return Err(SurrogateError::DimensionMismatch { expected: model.n_features(), found: x.len() });
        }
        let k = self.leaf_values.len();
        let mut logits = vec![0.0; k];
        match self.mode {
            PredictionMode::Argmax => {
                model.logits_into(x, &mut logits);
                Ok(self.leaf_values[argmax(&logits)])
            }
            PredictionMode::Expectation => {
                let mut probs = vec![0.0; k];
                model.probabilities_into(x, &mut logits, &mut probs);
                Ok(probs.iter().zip(&self.leaf_values).map(|(p, v)| p * v).sum())
            }
        }
    }
}

/// Optimizer diagnostics for one surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateFitSummary {
    pub n_leaves: usize,
    /// `None` for single-leaf trees, which skip fitting.
    pub method: Option<Method>,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Fits the routing model for `tree` on the rows it was grown on. Leaf
/// values are copied from the tree unchanged.
pub fn fit_surrogate(
    tree: &DecisionTree,
    dataset: &Dataset,
    rows: &[usize],
    config: &MlrFitConfig,
    mode: PredictionMode,
) -> Result<(TreeSurrogate, SurrogateFitSummary), SurrogateError> {
    let leaves = extract_leaf_dataset(tree, dataset, rows)?;
    let leaf_values = tree.leaf_values();
    if leaves.n_classes == 1 {
        let summary = SurrogateFitSummary {
            n_leaves: 1,
            method: None,
            converged: true,
            iterations: 0,
            gradient_norm: 0.0,
        };
        return Ok((TreeSurrogate::new(None, leaf_values, mode)?, summary));
    }
    let fit = fit_mlr(&leaves.features, leaves.n_features, &leaves.labels, leaves.n_classes, config)?;
    let summary = SurrogateFitSummary {
        n_leaves: leaves.n_classes,
        method: Some(fit.method),
        converged: fit.converged,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
    };
    Ok((TreeSurrogate::new(Some(fit.model), leaf_values, mode)?, summary))
}

/// A forest whose trees have all been replaced by surrogates.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateForest {
    config: ForestConfig,
    n_features: usize,
    surrogates: Vec<TreeSurrogate>,
    mode: PredictionMode,
}

impl SurrogateForest {
    pub fn new(
        config: ForestConfig,
        n_features: usize,
        surrogates: Vec<TreeSurrogate>,
    ) -> Result<Self, SurrogateError> {
        let Some(first) = surrogates.first() else {
            return Err(SurrogateError::Invalid("a surrogate forest needs at least one tree".into()));
        };
        let mode = first.mode;
        if surrogates.iter().any(|s| s.mode != mode) {
            return Err(SurrogateError::Invalid("surrogates disagree on prediction mode".into()));
        }
        if let Some(m) = surrogates.iter().filter_map(|s| s.model.as_ref()).find(|m| m.n_features() != n_features) {
            return Err(SurrogateError::DimensionMismatch { expected: n_features, found: m.n_features() });
        }
        Ok(Self { config, n_features, surrogates, mode })
    }

    /// Config of the forest these surrogates replace.
    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn surrogates(&self) -> &[TreeSurrogate] {
        &self.surrogates
    }

    pub fn mode(&self) -> PredictionMode {
        self.mode
    }

    pub fn leaf_counts(&self) -> Vec<usize> {
        self.surrogates.iter().map(TreeSurrogate::n_leaves).collect()
    }

    /// Same coefficients, different prediction mode.
    pub fn with_mode(mut self, mode: PredictionMode) -> Self {
        self.mode = mode;
        self.surrogates.iter_mut().for_each(|s| s.mode = mode);
        self
    }

    /// Mean of the per-surrogate predictions.
    pub fn predict(&self, x: &[f64]) -> Result<f64, SurrogateError> {
        if x.len() != self.n_features {
            return Err(SurrogateError::DimensionMismatch { expected: self.n_features, found: x.len() });
        }
        let mut sum = 0.0;
        for s in &self.surrogates {
            sum += s.predict(x)?;
        }
        Ok(sum / self.surrogates.len() as f64)
    }
}

/// Result of [`squash_forest`].
#[derive(Debug, Clone, PartialEq)]
pub struct Squashed {
    pub forest: SurrogateForest,
    /// One entry per tree, in tree order.
    pub fits: Vec<SurrogateFitSummary>,
}

/// Replaces every tree of `forest` with its surrogate. `dataset` must be
/// the exact data the forest was trained on.
pub fn squash_forest(
    forest: &Forest,
    dataset: &Dataset,
    config: &MlrFitConfig,
    mode: PredictionMode,
) -> Result<Squashed, SurrogateError> {
    squash_forest_with(forest, dataset, config, mode, Execution::default())
}

pub fn squash_forest_with(
    forest: &Forest,
    dataset: &Dataset,
    config: &MlrFitConfig,
    mode: PredictionMode,
    exec: Execution,
) -> Result<Squashed, SurrogateError> {
    if dataset.fingerprint() != forest.fingerprint() {
        return Err(SurrogateError::DatasetMismatch);
    }
    let fitted = try_map_indexed(exec, forest.trees().len(), |m| {
        fit_surrogate(&forest.trees()[m], dataset, &forest.subsample_row_ids()[m], config, mode)
            .map_err(|e| match e {
                SurrogateError::Mlr(source) => SurrogateError::Fit { tree: m, source },
                other => other,
            })
    })?;
    let (surrogates, fits): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    Ok(Squashed { forest: SurrogateForest::new(*forest.config(), forest.n_features(), surrogates)?, fits })
}
