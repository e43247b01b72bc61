//! Machine-readable reports. Field order is fixed by the struct layout, so
//! the JSON for a given run is byte-stable; `--no-timing` drops the only
//! wall-clock fields.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use rfsq_core::codec::FloatWidth;
use rfsq_core::data::Dataset;
use rfsq_core::forest::{ForestConfig, LeafSummary};
use rfsq_core::mlr::{Method, MlrFitConfig, Optimizer};
use rfsq_core::surrogate::{PredictionMode, SurrogateFitSummary};

use crate::source::Part;
use crate::{CliError, Format};

pub const SCHEMA: &str = "rfsq-report/1";

pub fn summary_name(s: LeafSummary) -> &'static str {
    match s {
        LeafSummary::Mean => "mean",
        LeafSummary::Median => "median",
    }
}

pub fn mode_name(m: PredictionMode) -> &'static str {
    match m {
        PredictionMode::Argmax => "argmax",
        PredictionMode::Expectation => "expectation",
    }
}

pub fn float_name(w: FloatWidth) -> &'static str {
    match w {
        FloatWidth::F64 => "f64",
        FloatWidth::F32 => "f32",
    }
}

fn optimizer_name(o: Optimizer) -> &'static str {
    match o {
        Optimizer::Auto => "auto",
        Optimizer::Newton => "newton",
        Optimizer::FirstOrder => "first_order",
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConfigEcho {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    pub m: usize,
    pub min_leaf: usize,
    pub leaf_summary: &'static str,
    pub seed: u64,
}

impl From<&ForestConfig> for ConfigEcho {
    fn from(c: &ForestConfig) -> Self {
        Self {
            n: c.n,
            k: c.k,
            d: c.d,
            m: c.m,
            min_leaf: c.min_leaf,
            leaf_summary: summary_name(c.leaf_summary),
            seed: c.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MlrEcho {
    pub lambda: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub optimizer: &'static str,
    pub mode: &'static str,
}

impl MlrEcho {
    pub fn new(c: &MlrFitConfig, mode: PredictionMode) -> Self {
        Self {
            lambda: c.l2_penalty,
            max_iterations: c.max_iterations,
            tolerance: c.gradient_tolerance,
            optimizer: optimizer_name(c.optimizer),
            mode: mode_name(mode),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DataEcho {
    pub source: String,
    pub part: Part,
    pub rows: usize,
    pub features: usize,
    pub fingerprint: String,
}

impl DataEcho {
    pub fn new(source: &str, part: Part, ds: &Dataset) -> Self {
        let fp = ds.fingerprint();
        Self {
            source: source.to_owned(),
            part,
            rows: ds.n_rows(),
            features: ds.n_features(),
            fingerprint: format!("{}:{:016x}", fp.rows, fp.hash),
        }
    }
}

/// Optimizer outcome over all trees of a squash.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConvergenceEcho {
    pub trees: usize,
    pub single_leaf: usize,
    pub newton: usize,
    pub lbfgs: usize,
    pub converged: usize,
    pub not_converged_trees: Vec<usize>,
    pub max_iterations_used: usize,
    pub max_gradient_norm: f64,
}

impl ConvergenceEcho {
    pub fn new(fits: &[SurrogateFitSummary]) -> Self {
        let count = |m: Option<Method>| fits.iter().filter(|f| f.method == m).count();
        Self {
            trees: fits.len(),
            single_leaf: count(None),
            newton: count(Some(Method::Newton)),
            lbfgs: count(Some(Method::Lbfgs)),
            converged: fits.iter().filter(|f| f.converged).count(),
            not_converged_trees: fits.iter().enumerate().filter(|(_, f)| !f.converged).map(|(i, _)| i).collect(),
            max_iterations_used: fits.iter().map(|f| f.iterations).max().unwrap_or(0),
            max_gradient_norm: fits.iter().map(|f| f.gradient_norm).fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, PartialEq)]
pub struct Timing {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub squash_seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predict_seconds_per_1k: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FitReport {
    pub schema: &'static str,
    pub command: &'static str,
    pub model_kind: &'static str,
    pub float: &'static str,
    pub model_bytes: usize,
    pub config: ConfigEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlr: Option<MlrEcho>,
    pub data: DataEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mae: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bytes_before: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compression_ratio: Option<f64>,
    /// Leaf count K -> number of trees with that many leaves.
    pub leaf_histogram: BTreeMap<usize, usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceEcho>,
    /// `null` under `--no-timing`.
    pub timing: Option<Timing>,
}

pub fn histogram(leaf_counts: &[usize]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for &k in leaf_counts {
        *h.entry(k).or_insert(0) += 1;
    }
    h
}

/// Root mean squared error and mean absolute error, one pass.
pub fn rmse_mae(predictions: &[f64], responses: &[f64]) -> (f64, f64) {
    let n = predictions.len() as f64;
    let (sq, abs) = predictions
        .iter()
        .zip(responses)
        .fold((0.0, 0.0), |(sq, abs), (p, y)| (sq + (p - y) * (p - y), abs + (p - y).abs()));
    ((sq / n).sqrt(), abs / n)
}

/// Wall-clock seconds of `f`.
pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed().as_secs_f64())
}

/// Median over three runs of `f`, in seconds.
pub fn median_of_three(mut f: impl FnMut()) -> f64 {
    let mut runs: Vec<f64> = (0..3).map(|_| timed(&mut f).1).collect();
    runs.sort_by(f64::total_cmp);
    runs[1]
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string(value).map_err(|e| CliError::Numeric(format!("cannot serialize report: {e}")))
}

/// Flattens a JSON value into `key: value` lines.
pub fn to_text(value: &serde_json::Value) -> String {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut String) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => {
                out.push_str(&format!("{prefix:<32} {other}\n"));
            }
        }
    }
    let mut out = String::new();
    walk("", value, &mut out);
    out
}

pub fn emit<T: Serialize>(report: &T, format: Format) -> Result<(), CliError> {
    match format {
        Format::Json => println!("{}", to_json(report)?),
        Format::Text => {
            let value = serde_json::to_value(report)
                .map_err(|e| CliError::Numeric(format!("cannot serialize report: {e}")))?;
            print!("{}", to_text(&value));
        }
    }
    Ok(())
}
