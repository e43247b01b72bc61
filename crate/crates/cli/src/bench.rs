//! Parameter sweep comparing tree forests with their surrogates.
//!
//! Every grid cell yields two rows, one for the forest and one for its
//! surrogate, evaluated on the held-out part of a seeded split. Rows stream
//! to `--out` as JSON lines so a partial sweep survives interruption. The
//! closing comparison asks, per surrogate, whether any forest in the grid
//! that is no larger does better; this is the "shrink the parameters"
//! baseline.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use rfsq_core::codec::{self, FloatWidth, Model};
use rfsq_core::data::{split, Dataset};
use rfsq_core::forest::{Forest, ForestConfig};
use rfsq_core::mlr::MlrFitConfig;
use rfsq_core::surrogate::{squash_forest, PredictionMode, Squashed};

use crate::commands::{encode, fit, mlr_config, predict_all, resolve_forest_config, squash_err};
use crate::report::{self, float_name, median_of_three, mode_name, rmse_mae, timed, ConfigEcho, MlrEcho, Timing};
use crate::source::Source;
use crate::{CliError, FloatArg, Format, ModeArg, OptimizerArg, SummaryArg};

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// CSV path or generator spec; split internally into train and test.
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value = "y")]
    pub response: String,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,

    /// Rows per tree [default: ceil(N/2) of the training part]
    #[arg(long)]
    pub n: Option<usize>,
    /// Features drawn per split [default: max(1, p/3)]
    #[arg(long)]
    pub k: Option<usize>,
    /// Depth grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![3usize, 5, 8])]
    pub d: Vec<usize>,
    /// Tree-count grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![50usize])]
    pub m: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
    #[arg(long, value_enum, default_value_t = SummaryArg::Mean)]
    pub leaf_summary: SummaryArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Penalty grid.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1e-6])]
    pub lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', value_enum, default_values_t = vec![ModeArg::Expectation, ModeArg::Argmax])]
    pub mode: Vec<ModeArg>,
    #[arg(long, value_delimiter = ',', value_enum, default_values_t = vec![FloatArg::F64, FloatArg::F32])]
    pub float: Vec<FloatArg>,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Auto)]
    pub optimizer: OptimizerArg,

    /// JSON-lines output file (rows only).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Omit wall-clock timings so output is byte-reproducible
    #[arg(long)]
    pub no_timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub d: usize,
    pub m: usize,
    pub lambda: f64,
    pub mode: PredictionMode,
    pub float: FloatWidth,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BenchRow {
    pub schema: &'static str,
    pub cell: usize,
    pub kind: &'static str,
    pub d: usize,
    pub m: usize,
    pub lambda: f64,
    pub mode: &'static str,
    pub float: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<ConfigEcho>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mlr: Option<MlrEcho>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub model_bytes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compression_ratio: Option<f64>,
    pub total_leaves: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged_trees: Option<usize>,
    /// Surrogate rows: the same forest with its tree count grown or cut to
    /// the largest size not exceeding the surrogate's bytes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_forest: Option<MatchedForest>,
    pub timing: Option<Timing>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MatchedForest {
    pub m: usize,
    pub model_bytes: usize,
    pub rmse: f64,
}

/// Tree counts beyond this are not tried when matching sizes.
const MAX_MATCHED_TREES: usize = 20_000;

fn grid(args: &BenchArgs) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &d in &args.d {
        for &m in &args.m {
            for &lambda in &args.lambda {
                for &mode in &args.mode {
                    for &float in &args.float {
                        cells.push(Cell { d, m, lambda, mode: mode.into(), float: float.into() });
                    }
                }
            }
        }
    }
    cells
}

struct Context<'a> {
    args: &'a BenchArgs,
    train: Dataset,
    test: Dataset,
    forests: HashMap<(usize, usize), Result<(Forest, f64), String>>,
    squashed: HashMap<(usize, usize, u64), Result<(Squashed, f64), String>>,
}

struct Evaluated {
    rmse: f64,
    mae: f64,
    bytes: usize,
    predict_per_1k: Option<f64>,
}

impl Context<'_> {
    fn forest_config(&self, cell: &Cell) -> Result<ForestConfig, CliError> {
        let a = self.args;
        resolve_forest_config(a.n, a.k, cell.d, cell.m, a.min_leaf, a.leaf_summary, a.seed, &self.train)
    }

    fn mlr_config(&self, cell: &Cell) -> Result<MlrFitConfig, CliError> {
        mlr_config(cell.lambda, self.args.max_iter, self.args.tol, self.args.optimizer)
    }

    fn forest(&mut self, cell: &Cell) -> Result<(Forest, f64), String> {
        let key = (cell.d, cell.m);
        if !self.forests.contains_key(&key) {
            let fitted = self
                .forest_config(cell)
                .and_then(|config| fit(&self.train, &config))
                .map_err(|e| e.to_string());
            self.forests.insert(key, fitted);
        }
        self.forests[&key].clone()
    }

    fn squashed(&mut self, cell: &Cell) -> Result<(Squashed, f64), String> {
        let key = (cell.d, cell.m, cell.lambda.to_bits());
        if !self.squashed.contains_key(&key) {
            let result = self.forest(cell).and_then(|(forest, _)| {
                let mlr = self.mlr_config(cell).map_err(|e| e.to_string())?;
                let (sq, secs) = timed(|| squash_forest(&forest, &self.train, &mlr, PredictionMode::Expectation));
                sq.map(|s| (s, secs)).map_err(|e| squash_err(e).to_string())
            });
            self.squashed.insert(key, result);
        }
        self.squashed[&key].clone()
    }

    /// The forest of this cell with as many trees as fit in `budget` bytes,
    /// scored on the test rows. `None` when even one tree is too large.
    fn matched_forest(&mut self, cell: &Cell, budget: usize) -> Result<Option<MatchedForest>, String> {
        let (base, _) = self.forest(cell)?;
        let width = cell.float;
        let mut pool = base;
        loop {
            let counts = pool.leaf_counts();
            let fits = (1..=counts.len())
                .take_while(|&m| codec::forest_size(&counts[..m], width) <= budget)
                .last();
            let exhausted = fits == Some(counts.len());
            if !exhausted || counts.len() >= MAX_MATCHED_TREES {
                let Some(m) = fits else { return Ok(None) };
                let forest = pool.truncated(m).map_err(|e| e.to_string())?;
                let ev = self.evaluate(&Model::Forest(forest), width).map_err(|e| e.to_string())?;
                return Ok(Some(MatchedForest { m, model_bytes: ev.bytes, rmse: ev.rmse }));
            }
            // Every tree fits; grow the pool in proportion to the headroom.
            let used = codec::forest_size(&counts, width) as f64;
            let grow = ((budget as f64 / used) * counts.len() as f64).ceil() as usize + 1;
            let m = grow.max(counts.len() + 1).min(MAX_MATCHED_TREES);
            let config = ForestConfig { m, ..*pool.config() };
            pool = fit(&self.train, &config).map_err(|e| e.to_string())?.0;
        }
    }

    /// Encodes at the cell's width, decodes, and scores the decoded model on
    /// the test rows, so f32 rows reflect the narrowed parameters.
    fn evaluate(&self, model: &Model, width: FloatWidth) -> Result<Evaluated, CliError> {
        let bytes = encode(model, width)?;
        let decoded = codec::decode(&bytes).map_err(|e| CliError::Data(e.to_string()))?;
        let p = self.test.n_features();
        let predictions = predict_all(&decoded, self.test.features(), p)?;
        let (rmse, mae) = rmse_mae(&predictions, self.test.responses());
        let predict_per_1k = (!self.args.no_timing).then(|| {
            let secs = median_of_three(|| {
                std::hint::black_box(predict_all(&decoded, self.test.features(), p).ok());
            });
            secs * 1000.0 / self.test.n_rows() as f64
        });
        Ok(Evaluated { rmse, mae, bytes: bytes.len(), predict_per_1k })
    }

    fn rows(&mut self, index: usize, cell: &Cell) -> (BenchRow, BenchRow) {
        let blank = |kind: &'static str| BenchRow {
            schema: report::SCHEMA,
            cell: index,
            kind,
            d: cell.d,
            m: cell.m,
            lambda: cell.lambda,
            mode: mode_name(cell.mode),
            float: float_name(cell.float),
            config: None,
            mlr: None,
            rmse: None,
            mae: None,
            model_bytes: None,
            compression_ratio: None,
            total_leaves: None,
            converged_trees: None,
            matched_forest: None,
            timing: None,
            error: None,
        };
        let mut forest_row = blank("forest");
        let mut surrogate_row = blank("surrogate");
        let no_timing = self.args.no_timing;

        let forest = match self.forest(cell) {
            Ok(f) => f,
            Err(e) => {
                forest_row.error = Some(e.clone());
                surrogate_row.error = Some(e);
                return (forest_row, surrogate_row);
            }
        };
        let (forest, train_seconds) = forest;
        let echo = ConfigEcho::from(forest.config());
        forest_row.config = Some(echo.clone());
        forest_row.total_leaves = Some(forest.leaf_counts().iter().sum());
        let forest_model = Model::Forest(forest);
        match self.evaluate(&forest_model, cell.float) {
            Ok(ev) => {
                forest_row.rmse = Some(ev.rmse);
                forest_row.mae = Some(ev.mae);
                forest_row.model_bytes = Some(ev.bytes);
                forest_row.timing = (!no_timing).then(|| Timing {
                    train_seconds: Some(train_seconds),
                    predict_seconds_per_1k: ev.predict_per_1k,
                    ..Default::default()
                });
            }
            Err(e) => forest_row.error = Some(e.to_string()),
        }

        surrogate_row.config = Some(echo);
        if let Ok(mlr) = self.mlr_config(cell) {
            surrogate_row.mlr = Some(MlrEcho::new(&mlr, cell.mode));
        }
        match self.squashed(cell) {
            Ok((squashed, squash_seconds)) => {
                surrogate_row.total_leaves = Some(squashed.forest.leaf_counts().iter().sum());
                surrogate_row.converged_trees = Some(squashed.fits.iter().filter(|f| f.converged).count());
                let model = Model::SurrogateForest(squashed.forest.with_mode(cell.mode));
                match self.evaluate(&model, cell.float) {
                    Ok(ev) => {
                        surrogate_row.rmse = Some(ev.rmse);
                        surrogate_row.mae = Some(ev.mae);
                        surrogate_row.model_bytes = Some(ev.bytes);
                        let before = codec::measure_size(&forest_model, cell.float);
                        surrogate_row.compression_ratio = Some(ev.bytes as f64 / before as f64);
                        surrogate_row.matched_forest = self.matched_forest(cell, ev.bytes).ok().flatten();
                        surrogate_row.timing = (!no_timing).then(|| Timing {
                            squash_seconds: Some(squash_seconds),
                            predict_seconds_per_1k: ev.predict_per_1k,
                            ..Default::default()
                        });
                    }
                    Err(e) => surrogate_row.error = Some(e.to_string()),
                }
            }
            Err(e) => surrogate_row.error = Some(e),
        }
        (forest_row, surrogate_row)
    }
}

/// Verdict lines. A surrogate beats the shrink-the-parameters baseline when
/// its test RMSE is below both the best grid forest no larger than it (same
/// float width) and its own forest resized by tree count to the same byte
/// budget.
pub fn compare(rows: &[BenchRow]) -> Vec<String> {
    let ok = |r: &&BenchRow| r.error.is_none() && r.rmse.is_some() && r.model_bytes.is_some();
    let forests: Vec<&BenchRow> = rows.iter().filter(|r| r.kind == "forest").filter(ok).collect();
    let mut lines = Vec::new();
    let (mut wins, mut comparable, mut shrunk, mut surrogates) = (0, 0, 0, 0);
    for s in rows.iter().filter(|r| r.kind == "surrogate").filter(ok) {
        surrogates += 1;
        let (s_bytes, s_rmse) = (s.model_bytes.unwrap(), s.rmse.unwrap());
        if s.compression_ratio.is_some_and(|r| r < 1.0) {
            shrunk += 1;
        }
        let mut line = format!(
            "surrogate d={} m={} lambda={:e} {} {}: {} B, rmse {:.4}, ratio {}",
            s.d,
            s.m,
            s.lambda,
            s.mode,
            s.float,
            s_bytes,
            s_rmse,
            fmt_opt(s.compression_ratio, 3)
        );
        let grid_best = forests
            .iter()
            .filter(|f| f.float == s.float && f.model_bytes.unwrap() <= s_bytes)
            .min_by(|a, b| a.rmse.unwrap().total_cmp(&b.rmse.unwrap()));
        let mut baselines = Vec::new();
        if let Some(f) = grid_best {
            line.push_str(&format!(
                " | best grid forest <= size: d={} m={} {} B rmse {:.4}",
                f.d,
                f.m,
                f.model_bytes.unwrap(),
                f.rmse.unwrap()
            ));
            baselines.push(f.rmse.unwrap());
        }
        if let Some(mf) = &s.matched_forest {
            line.push_str(&format!(" | same forest at m={}: {} B rmse {:.4}", mf.m, mf.model_bytes, mf.rmse));
            baselines.push(mf.rmse);
        }
        if baselines.is_empty() {
            line.push_str(" | no forest fits in this size");
        } else {
            comparable += 1;
            let better = baselines.iter().all(|&b| s_rmse < b);
            wins += usize::from(better);
            line.push_str(if better { " | surrogate BETTER" } else { " | surrogate NOT better" });
        }
        lines.push(line);
    }
    lines.push(format!(
        "squashing reduced the model size in {shrunk} of {surrogates} cells"
    ));
    lines.push(format!(
        "verdict: the surrogate beats the shrink-the-parameters baseline at matched size in {wins} of {comparable} comparable cells"
    ));
    lines
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.prec$}"))
}

pub fn table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:>4} {:<9} {:>3} {:>4} {:>8} {:<11} {:<5} {:>9} {:>9} {:>10} {:>7} {:>10}\n",
        "cell", "kind", "d", "m", "lambda", "mode", "float", "rmse", "mae", "bytes", "ratio", "pred/1k s"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>4} {:<9} {:>3} {:>4} {:>8.1e} {:<11} {:<5} {:>9} {:>9} {:>10} {:>7} {:>10}{}\n",
            r.cell,
            r.kind,
            r.d,
            r.m,
            r.lambda,
            r.mode,
            r.float,
            fmt_opt(r.rmse, 4),
            fmt_opt(r.mae, 4),
            r.model_bytes.map_or_else(|| "-".into(), |b| b.to_string()),
            fmt_opt(r.compression_ratio, 4),
            fmt_opt(r.timing.as_ref().and_then(|t| t.predict_seconds_per_1k), 5),
            r.error.as_ref().map_or_else(String::new, |e| format!("  error: {e}")),
        ));
    }
    out
}

pub fn run(args: &BenchArgs) -> Result<(), CliError> {
    let cells = grid(args);
    if cells.is_empty() {
        return Err(CliError::Usage("the parameter grid is empty".into()));
    }
    let full = Source::parse(&args.data)?.load(&args.response)?;
    let pair = split(&full, args.test_fraction, args.split_seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut ctx = Context {
        args,
        train: pair.train,
        test: pair.test,
        forests: HashMap::new(),
        squashed: HashMap::new(),
    };
    let mut sink = match &args.out {
        Some(path) => Some(BufWriter::new(File::create(path).map_err(|e| {
            CliError::Data(format!("cannot create {}: {e}", path.display()))
        })?)),
        None => None,
    };
    let mut rows = Vec::with_capacity(2 * cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let (f, s) = ctx.rows(i, cell);
        for row in [f, s] {
            let line = report::to_json(&row)?;
            if let Some(w) = sink.as_mut() {
                writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| CliError::Data(e.to_string()))?;
            }
            if args.format == Format::Json {
                println!("{line}");
            }
            rows.push(row);
        }
    }
    let comparison = compare(&rows);
    match args.format {
        Format::Text => {
            print!("{}", table(&rows));
            println!();
            comparison.iter().for_each(|l| println!("{l}"));
        }
        Format::Json => comparison.iter().for_each(|l| eprintln!("{l}")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(cell: usize, kind: &'static str, d: usize, bytes: usize, rmse: f64) -> BenchRow {
        BenchRow {
            schema: report::SCHEMA,
            cell,
            kind,
            d,
            m: 10,
            lambda: 1e-6,
            mode: "expectation",
            float: "f64",
            config: None,
            mlr: None,
            rmse: Some(rmse),
            mae: Some(rmse),
            model_bytes: Some(bytes),
            compression_ratio: None,
            total_leaves: None,
            converged_trees: None,
            matched_forest: None,
            timing: None,
            error: None,
        }
    }

    #[test]
    fn comparison_uses_smaller_forests_only() {
        let mut rows = vec![
            row(0, "forest", 3, 1000, 3.0),
            row(0, "surrogate", 3, 1500, 3.5),
            row(1, "forest", 5, 4000, 2.0),
            row(1, "surrogate", 5, 3000, 2.5),
        ];
        rows[3].matched_forest = Some(MatchedForest { m: 30, model_bytes: 2990, rmse: 2.6 });
        let lines = compare(&rows);
        assert!(lines[1].contains("same forest at m=30"));
        assert!(lines[0].contains("best grid forest <= size: d=3") && lines[0].contains("NOT better"));
        assert!(lines[1].contains("d=3") && lines[1].contains("BETTER"));
        assert!(lines[3].contains("1 of 2"));
    }

    #[test]
    fn grid_order_is_fixed() {
        let args = BenchArgs {
            data: String::new(),
            response: "y".into(),
            test_fraction: 0.2,
            split_seed: 0,
            n: None,
            k: None,
            d: vec![1, 2],
            m: vec![5],
            min_leaf: 1,
            leaf_summary: SummaryArg::Mean,
            seed: 0,
            lambda: vec![0.1],
            mode: vec![ModeArg::Argmax, ModeArg::Expectation],
            float: vec![FloatArg::F64],
            max_iter: 10,
            tol: 1e-6,
            optimizer: OptimizerArg::Auto,
            out: None,
            format: Format::Text,
            no_timing: true,
        };
        let cells = grid(&args);
        assert_eq!(cells.len(), 4);
        assert_eq!((cells[1].d, cells[1].mode), (1, PredictionMode::Expectation));
        assert_eq!(cells[2].d, 2);
    }
}
