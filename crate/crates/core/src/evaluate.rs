//! Regression metrics, the mean baseline and cross-seed aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label used in reports for the spread across seeds.
pub const STD_CONVENTION: &str = "sample standard deviation (n-1) across seeds";

fn check_pair(y: &[f64], yhat: &[f64], min_len: usize) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::input(format!("length mismatch: {} targets, {} predictions", y.len(), yhat.len())));
    }
    if y.len() < min_len {
        return Err(Error::input(format!("need at least {min_len} values, got {}", y.len())));
    }
    if y.iter().chain(yhat).any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite value"));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 1)?;
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn pearson(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 2)?;
    let (my, mp) = (mean(y), mean(yhat));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        let (da, db) = (a - my, b - mp);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance("Pearson correlation needs non-constant inputs".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat, 2)?;
    let my = mean(y);
    let ss_tot: f64 = y.iter().map(|a| (a - my).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::DegenerateVariance("R² needs non-constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Constant predictor fixed to the training-set mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanBaseline {
    pub value: f64,
}

impl MeanBaseline {
    pub fn predict(&self, n: usize) -> Vec<f64> {
        vec![self.value; n]
    }
}

pub fn mean_baseline(train_y: &[f64]) -> Result<MeanBaseline> {
    if train_y.is_empty() {
        return Err(Error::input("mean baseline needs at least one training target"));
    }
    Ok(MeanBaseline { value: mean(train_y) })
}

/// Metrics of one model on one split. Pearson and R² are `None` when undefined
/// (constant predictions or targets), not zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub n: usize,
    pub mae: f64,
    pub pearson: Option<f64>,
    pub r2: Option<f64>,
}

impl SplitMetrics {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        let undefined_ok = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::DegenerateVariance(_)) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self { n: y.len(), mae: mae(y, yhat)?, pearson: undefined_ok(pearson(y, yhat))?, r2: undefined_ok(r2(y, yhat))? })
    }
}

/// Train and test metrics of one seed's run; `key` names the method/config so
/// unrelated runs cannot be aggregated together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub key: String,
    pub seed: u64,
    pub train: SplitMetrics,
    pub test: SplitMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Absent with a single seed.
    pub std: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let m = mean(values);
        let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt());
        Self { mean: m, std }
    }

    /// `mean±std` with `digits` decimals, or just the mean.
    pub fn display(&self, digits: usize) -> String {
        match self.std {
            Some(s) => format!("{:.digits$}±{:.digits$}", self.mean, s),
            None => format!("{:.digits$}", self.mean),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: String,
    pub n: usize,
    pub mae: Summary,
    pub pearson: Option<Summary>,
    pub r2: Option<Summary>,
}

/// Per-seed values plus their aggregate, for both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub key: String,
    pub std_convention: String,
    pub per_seed: Vec<SeedMetrics>,
    pub train: SplitReport,
    pub test: SplitReport,
}

fn summarize_split(name: &str, splits: &[&SplitMetrics]) -> Result<SplitReport> {
    let n = splits[0].n;
    if splits.iter().any(|s| s.n != n) {
        return Err(Error::Aggregation(format!("{name} split sizes differ across seeds")));
    }
    let maes: Vec<f64> = splits.iter().map(|s| s.mae).collect();
    // a metric that is undefined for any seed is undefined in the aggregate
    let opt = |f: fn(&SplitMetrics) -> Option<f64>| -> Option<Summary> {
        let vals: Option<Vec<f64>> = splits.iter().map(|s| f(s)).collect();
        vals.map(|v| Summary::of(&v))
    };
    Ok(SplitReport { split: name.into(), n, mae: Summary::of(&maes), pearson: opt(|s| s.pearson), r2: opt(|s| s.r2) })
}

pub fn aggregate_seeds(reports: &[SeedMetrics]) -> Result<MetricsReport> {
    let first = reports.first().ok_or_else(|| Error::Aggregation("no seed reports".into()))?;
    if let Some(other) = reports.iter().find(|r| r.key != first.key) {
        return Err(Error::Aggregation(format!("mixed configurations {:?} and {:?}", first.key, other.key)));
    }
    let train: Vec<_> = reports.iter().map(|r| &r.train).collect();
    let test: Vec<_> = reports.iter().map(|r| &r.test).collect();
    Ok(MetricsReport {
        key: first.key.clone(),
        std_convention: STD_CONVENTION.into(),
        per_seed: reports.to_vec(),
        train: summarize_split("train", &train)?,
        test: summarize_split("test", &test)?,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn cell(s: Option<&Summary>, digits: usize) -> String {
    s.map_or_else(|| "-".into(), |s| s.display(digits))
}

/// Plain-text table: one row per method, MAE / Pearson / R² for train then test.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let header = ["Method", "Train MAE", "Train Pearson", "Train R2", "Test MAE", "Test Pearson", "Test R2"];
    let rows: Vec<[String; 7]> = reports
        .iter()
        .map(|r| {
            [
                r.key.clone(),
                cell(Some(&r.train.mae), 3),
                cell(r.train.pearson.as_ref(), 3),
                cell(r.train.r2.as_ref(), 3),
                cell(Some(&r.test.mae), 3),
                cell(r.test.pearson.as_ref(), 3),
                cell(r.test.r2.as_ref(), 3),
            ]
        })
        .collect();
    let widths: Vec<usize> =
        (0..7).map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].len()]).max().unwrap_or(0)).collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
        padded.join(" | ").trim_end().to_string()
    };
    let mut out = line(&header.map(String::from));
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-"));
    out.push('\n');
    for r in &rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out.push_str(&format!("(± is the {STD_CONVENTION})\n"));
    out
}
