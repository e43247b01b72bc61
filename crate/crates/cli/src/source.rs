//! Where a command's rows come from: a CSV path or a generator spec.
//!
//! Generator specs:
//!
//! ```text
//! friedman1:n=5000,noise=1,seed=7
//! axis:n=500,p=3,t=0@0.5;1@0.25,v=1;2;3;4,margin=0.01,seed=3
//! ```
//!
//! `t` lists `feature@cutpoint` thresholds and `v` the `2^t` cell values.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rfsq_core::data::{
    gen_axis_partition, gen_friedman1, load_csv, split, AxisPartition, AxisThreshold, DataError,
    Dataset,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Csv(PathBuf),
    Friedman1 { n: usize, noise: f64, seed: u64 },
    Axis { n: usize, partition: AxisPartition, seed: u64 },
}

/// Which rows of the source a command sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    All,
    Train,
    Test,
}

fn parse_kv(body: &str) -> Result<BTreeMap<&str, &str>, CliError> {
    let mut out = BTreeMap::new();
    for item in body.split(',').filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("generator option `{item}` is not key=value")))?;
        if out.insert(k.trim(), v.trim()).is_some() {
            return Err(CliError::Usage(format!("generator option `{k}` given twice")));
        }
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(
    kv: &mut BTreeMap<&str, &str>,
    key: &str,
    default: Option<T>,
) -> Result<T, CliError> {
    match kv.remove(key) {
        Some(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("cannot parse generator option {key}={v}"))),
        None => default.ok_or_else(|| CliError::Usage(format!("generator option `{key}` is required"))),
    }
}

fn reject_leftovers(kind: &str, kv: BTreeMap<&str, &str>) -> Result<(), CliError> {
    match kv.keys().next() {
        Some(k) => Err(CliError::Usage(format!("unknown option `{k}` for generator `{kind}`"))),
        None => Ok(()),
    }
}

impl Source {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        if let Some(body) = spec.strip_prefix("friedman1:") {
            let mut kv = parse_kv(body)?;
            let n = take(&mut kv, "n", None)?;
            let noise = take(&mut kv, "noise", Some(1.0))?;
            let seed = take(&mut kv, "seed", Some(0))?;
            reject_leftovers("friedman1", kv)?;
            return Ok(Source::Friedman1 { n, noise, seed });
        }
        if let Some(body) = spec.strip_prefix("axis:") {
            let mut kv = parse_kv(body)?;
            let n = take(&mut kv, "n", None)?;
            let seed = take(&mut kv, "seed", Some(0))?;
            let margin = take(&mut kv, "margin", Some(0.0))?;
            let thresholds = kv
                .remove("t")
                .ok_or_else(|| CliError::Usage("axis generator needs t=feature@cut;...".into()))?
                .split(';')
                .map(|t| {
                    let (f, c) = t.split_once('@').ok_or_else(|| {
                        CliError::Usage(format!("threshold `{t}` is not feature@cutpoint"))
                    })?;
                    Ok(AxisThreshold {
                        feature: f.parse().map_err(|_| CliError::Usage(format!("bad feature in `{t}`")))?,
                        cutpoint: c.parse().map_err(|_| CliError::Usage(format!("bad cutpoint in `{t}`")))?,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            let values = kv
                .remove("v")
                .ok_or_else(|| CliError::Usage("axis generator needs v=value;...".into()))?
                .split(';')
                .map(|v| v.parse().map_err(|_| CliError::Usage(format!("bad leaf value `{v}`"))))
                .collect::<Result<Vec<f64>, CliError>>()?;
            let mut partition = AxisPartition::new(thresholds, values).with_margin(margin);
            if let Some(p) = kv.remove("p") {
                partition = partition
                    .with_features(p.parse().map_err(|_| CliError::Usage(format!("bad p `{p}`")))?);
            }
            reject_leftovers("axis", kv)?;
            return Ok(Source::Axis { n, partition, seed });
        }
        if let Some((kind, _)) = spec.split_once(':') {
            if !kind.contains(['/', '\\', '.']) && kind.len() > 1 {
                return Err(CliError::Usage(format!("unknown generator `{kind}`")));
            }
        }
        Ok(Source::Csv(PathBuf::from(spec)))
    }


    pub fn load(&self, response: &str) -> Result<Dataset, CliError> {
        let ds = match self {
            Source::Csv(path) => load_csv(path, response),
            Source::Friedman1 { n, noise, seed } => gen_friedman1(*n, *noise, *seed),
            Source::Axis { n, partition, seed } => gen_axis_partition(*n, partition, *seed),
        };
        ds.map_err(|e| match e {
            DataError::InvalidParameter(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        })
    }
}

/// Loads `spec` and keeps the requested part of a seeded split.
pub fn load_part(
    spec: &str,
    response: &str,
    part: Part,
    test_fraction: f64,
    split_seed: u64,
) -> Result<Dataset, CliError> {
    let ds = Source::parse(spec)?.load(response)?;
    if part == Part::All {
        return Ok(ds);
    }
    let pair = split(&ds, test_fraction, split_seed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(match part {
        Part::Train => pair.train,
        _ => pair.test,
    })
}
