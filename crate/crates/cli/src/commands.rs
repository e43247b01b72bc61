use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;

use rfsq_core::codec::{self, CodecError, FloatWidth, Model};
use rfsq_core::data::{load_features_csv, Dataset};
use rfsq_core::forest::{fit_forest, Forest, ForestConfig, ForestError};
use rfsq_core::mlr::MlrFitConfig;
use rfsq_core::surrogate::{squash_forest, PredictionMode, SurrogateError};

use crate::report::{
    self, float_name, histogram, median_of_three, rmse_mae, timed, ConfigEcho, ConvergenceEcho, DataEcho,
    FitReport, MlrEcho, Timing,
};
use crate::source::{load_part, Part, Source};
use crate::{CliError, DataArgs, FloatArg, Format, ModeArg, OptimizerArg, SummaryArg};

#[derive(Args, Debug, Clone)]
pub struct ForestArgs {
    /// Rows per tree, drawn without replacement [default: ceil(N/2)].
    #[arg(long)]
    pub n: Option<usize>,
    /// Features drawn as split candidates at each node [default: max(1, p/3)].
    #[arg(long)]
    pub k: Option<usize>,
    /// Maximum tree depth; the root is depth 0.
    #[arg(long, default_value_t = 8)]
    pub d: usize,
    /// Number of trees.
    #[arg(long, default_value_t = 100)]
    pub m: usize,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
    #[arg(long, value_enum, default_value_t = SummaryArg::Mean)]
    pub leaf_summary: SummaryArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Fills the data-dependent defaults.
pub fn resolve_forest_config(
    n: Option<usize>,
    k: Option<usize>,
    d: usize,
    m: usize,
    min_leaf: usize,
    summary: SummaryArg,
    seed: u64,
    ds: &Dataset,
) -> Result<ForestConfig, CliError> {
    let rows = ds.n_rows();
    let config = ForestConfig {
        n: n.unwrap_or_else(|| rows.div_ceil(2).max(min_leaf.min(rows))),
        k: k.unwrap_or_else(|| (ds.n_features() / 3).max(1)),
        d,
        m,
        min_leaf,
        leaf_summary: summary.into(),
        seed,
    };
    config
        .validate(rows, ds.n_features())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

#[derive(Args, Debug, Clone)]
pub struct MlrArgs {
    /// L2 penalty on all surrogate coefficients.
    #[arg(long, default_value_t = 1e-6)]
    pub lambda: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    /// Gradient max-norm at which a surrogate fit counts as converged.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Auto)]
    pub optimizer: OptimizerArg,
}

impl MlrArgs {
    pub fn config(&self) -> Result<MlrFitConfig, CliError> {
        mlr_config(self.lambda, self.max_iter, self.tol, self.optimizer)
    }
}

pub fn mlr_config(lambda: f64, max_iter: usize, tol: f64, optimizer: OptimizerArg) -> Result<MlrFitConfig, CliError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(CliError::Usage(format!("--lambda must be >= 0, got {lambda}")));
    }
    if !(tol > 0.0) {
        return Err(CliError::Usage(format!("--tol must be > 0, got {tol}")));
    }
    Ok(MlrFitConfig {
        l2_penalty: lambda,
        max_iterations: max_iter,
        gradient_tolerance: tol,
        optimizer: optimizer.into(),
    })
}

#[derive(Args, Debug, Clone)]
pub struct OutputArgs {
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Omit wall-clock timings so reports are byte-reproducible.
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[arg(long, value_enum, default_value_t = FloatArg::F64)]
    pub float: FloatArg,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct SquashArgs {
    /// Forest file produced by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// The exact data the forest was trained on.
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub mlr: MlrArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Expectation)]
    pub mode: ModeArg,
    /// Float width of the output [default: that of the input file].
    #[arg(long, value_enum)]
    pub float: Option<FloatArg>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Feature rows; a response column, if present, is ignored.
    #[command(flatten)]
    pub data: DataArgs,
    /// Output CSV [default: stdout].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub output: OutputArgs,
}

pub fn load(args: &DataArgs) -> Result<Dataset, CliError> {
    load_part(&args.data, &args.response, args.part, args.test_fraction, args.split_seed)
}

fn codec_err(e: CodecError) -> CliError {
    match e {
        CodecError::NotRepresentable(_) => CliError::Numeric(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

pub fn read_model(path: &Path) -> Result<(Model, FloatWidth, usize), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let width = codec::peek_float_width(&bytes).map_err(codec_err)?;
    let model = codec::decode(&bytes).map_err(codec_err)?;
    Ok((model, width, bytes.len()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn encode(model: &Model, width: FloatWidth) -> Result<Vec<u8>, CliError> {
    codec::encode(model, width).map_err(codec_err)
}

/// Predictions for every row; a width mismatch is a data error.
pub fn predict_all(model: &Model, features: &[f64], p: usize) -> Result<Vec<f64>, CliError> {
    if p != model.n_features() {
        return Err(CliError::Data(format!(
            "model expects {} features, data has {p}",
            model.n_features()
        )));
    }
    features
        .chunks_exact(p)
        .map(|x| model.predict(x).map_err(CliError::Data))
        .collect()
}

fn forest_err(e: ForestError) -> CliError {
    match e {
        ForestError::DimensionMismatch { .. } => CliError::Data(e.to_string()),
        ForestError::MalformedTree(_) => CliError::Numeric(e.to_string()),
        other => CliError::Usage(other.to_string()),
    }
}

pub fn fit(ds: &Dataset, config: &ForestConfig) -> Result<(Forest, f64), CliError> {
    let (forest, secs) = timed(|| fit_forest(ds, config));
    Ok((forest.map_err(forest_err)?, secs))
}

pub fn squash_err(e: SurrogateError) -> CliError {
    match e {
        SurrogateError::DatasetMismatch | SurrogateError::RowMismatch(_) => CliError::Data(format!(
            "{e}; squash needs the exact rows the forest was trained on (same --data, --part, --test-fraction and --split-seed)"
        )),
        SurrogateError::DimensionMismatch { .. } => CliError::Data(e.to_string()),
        other => CliError::Numeric(other.to_string()),
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let ds = load(&args.data)?;
    let f = &args.forest;
    let config = resolve_forest_config(f.n, f.k, f.d, f.m, f.min_leaf, f.leaf_summary, f.seed, &ds)?;
    let (forest, train_seconds) = fit(&ds, &config)?;
    let width: FloatWidth = args.float.into();
    let leaf_counts = forest.leaf_counts();
    let model = Model::Forest(forest);
    let bytes = encode(&model, width)?;
    write_bytes(&args.out, &bytes)?;
    let predictions = predict_all(&model, ds.features(), ds.n_features())?;
    let (rmse, mae) = rmse_mae(&predictions, ds.responses());
    let report = FitReport {
        schema: report::SCHEMA,
        command: "train",
        model_kind: "forest",
        float: float_name(width),
        model_bytes: bytes.len(),
        config: ConfigEcho::from(&config),
        mlr: None,
        data: DataEcho::new(&args.data.data, args.data.part, &ds),
        rmse: Some(rmse),
        mae: Some(mae),
        bytes_before: None,
        compression_ratio: None,
        leaf_histogram: histogram(&leaf_counts),
        convergence: None,
        timing: (!args.output.no_timing).then(|| Timing { train_seconds: Some(train_seconds), ..Default::default() }),
    };
    report::emit(&report, args.output.format)
}

pub fn squash(args: &SquashArgs) -> Result<(), CliError> {
    let (model, in_width, _) = read_model(&args.model)?;
    let Model::Forest(forest) = model else {
        return Err(CliError::Data(format!("{} is already a surrogate forest", args.model.display())));
    };
    let ds = load(&args.data)?;
    if ds.n_features() != forest.n_features() {
        return Err(CliError::Data(format!(
            "forest expects {} features, data has {}",
            forest.n_features(),
            ds.n_features()
        )));
    }
    let mlr = args.mlr.config()?;
    let mode: PredictionMode = args.mode.into();
    let width: FloatWidth = args.float.map_or(in_width, Into::into);
    let (squashed, squash_seconds) = timed(|| squash_forest(&forest, &ds, &mlr, mode));
    let squashed = squashed.map_err(squash_err)?;
    let before = codec::measure_size(&Model::Forest(forest), width);
    let leaf_counts = squashed.forest.leaf_counts();
    let model = Model::SurrogateForest(squashed.forest);
    let bytes = encode(&model, width)?;
    write_bytes(&args.out, &bytes)?;
    let predictions = predict_all(&model, ds.features(), ds.n_features())?;
    let (rmse, mae) = rmse_mae(&predictions, ds.responses());
    let report = FitReport {
        schema: report::SCHEMA,
        command: "squash",
        model_kind: "surrogate_forest",
        float: float_name(width),
        model_bytes: bytes.len(),
        config: ConfigEcho::from(model.config()),
        mlr: Some(MlrEcho::new(&mlr, mode)),
        data: DataEcho::new(&args.data.data, args.data.part, &ds),
        rmse: Some(rmse),
        mae: Some(mae),
        bytes_before: Some(before),
        compression_ratio: Some(bytes.len() as f64 / before as f64),
        leaf_histogram: histogram(&leaf_counts),
        convergence: Some(ConvergenceEcho::new(&squashed.fits)),
        timing: (!args.output.no_timing).then(|| Timing { squash_seconds: Some(squash_seconds), ..Default::default() }),
    };
    report::emit(&report, args.output.format)
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let (model, _, _) = read_model(&args.model)?;
    let source = Source::parse(&args.data.data)?;
    let (features, p) = match (&source, args.data.part) {
        (Source::Csv(path), Part::All) => {
            let (features, names) =
                load_features_csv(path, &args.data.response).map_err(|e| CliError::Data(e.to_string()))?;
            (features, names.len())
        }
        _ => {
            let ds = load(&args.data)?;
            (ds.features().to_vec(), ds.n_features())
        }
    };
    let predictions = predict_all(&model, &features, p)?;
    let mut out = String::with_capacity(predictions.len() * 20 + 16);
    out.push_str("prediction\n");
    for v in predictions {
        out.push_str(&v.to_string());
        out.push('\n');
    }
    match &args.out {
        Some(path) => write_bytes(path, out.as_bytes()),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let (model, width, file_bytes) = read_model(&args.model)?;
    let ds = load(&args.data)?;
    let predictions = predict_all(&model, ds.features(), ds.n_features())?;
    let (rmse, mae) = rmse_mae(&predictions, ds.responses());
    let timing = if args.output.no_timing {
        None
    } else {
        let secs = median_of_three(|| {
            std::hint::black_box(predict_all(&model, ds.features(), ds.n_features()).ok());
        });
        Some(Timing { predict_seconds_per_1k: Some(secs * 1000.0 / ds.n_rows() as f64), ..Default::default() })
    };
    let report = FitReport {
        schema: report::SCHEMA,
        command: "evaluate",
        model_kind: match model {
            Model::Forest(_) => "forest",
            Model::SurrogateForest(_) => "surrogate_forest",
        },
        float: float_name(width),
        model_bytes: file_bytes,
        config: ConfigEcho::from(model.config()),
        mlr: None,
        data: DataEcho::new(&args.data.data, args.data.part, &ds),
        rmse: Some(rmse),
        mae: Some(mae),
        bytes_before: None,
        compression_ratio: None,
        leaf_histogram: histogram(&model.leaf_counts()),
        convergence: None,
        timing,
    };
    report::emit(&report, args.output.format)
}
