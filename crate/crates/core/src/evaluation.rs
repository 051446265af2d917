//! Cross-validation of `λ₂`, the four-method comparison and report emission.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::embedding::{build_delay_dataset, DelayDataset, TimeSeries};
use crate::error::{KflowError, Result};
use crate::forecaster::{fit, TrainedModel};
use crate::kernels::KernelParams;
use crate::metrics::{hausdorff, smape};
use crate::optimizer::{feasible_init, init_params, train, train_regular, TrainConfig, TrainReport};

pub const DEFAULT_LAMBDA2_GRID: [f64; 7] = [0.0, 1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0];

pub const REPORT_NOTE: &str = "SMAPE (percent) is measured on one-step forecasts of the held-out tail in original units. \
HD is the Hausdorff distance between an autonomous rollout of test length and the true held-out states, in standardized coordinates.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub tau: usize,
    pub lambda1: f64,
    pub train_fraction: f64,
    pub lambda2_grid: Vec<f64>,
    pub rbf_sigma: f64,
    pub train: TrainConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Self {
            tau: 5,
            lambda1: 0.05,
            train_fraction: 0.8,
            lambda2_grid: DEFAULT_LAMBDA2_GRID.to_vec(),
            rbf_sigma: 0.5,
            train: TrainConfig::default(),
        }
    }
}

impl Protocol {
    /// Training settings for a dataset of `n` rows under a given `λ₂`.
    /// `λ₂ = 0` takes the regular path, so no final clamping is applied.
    pub fn train_config(&self, n: usize, lambda2: f64) -> TrainConfig {
        let cfg = TrainConfig {
            lambda1: self.lambda1,
            lambda2,
            ..self.train.with_batch_capped(n)
        };
        if lambda2 == 0.0 {
            cfg.regular()
        } else {
            cfg
        }
    }
}

/// Standardized series split into embedded train and test parts.
#[derive(Clone, Debug)]
pub struct PreparedSeries {
    pub name: String,
    pub standardizer: Standardizer,
    pub train: DelayDataset,
    pub test: DelayDataset,
}

/// Standardizes with statistics of the samples that the training pairs touch,
/// embeds, and splits temporally.
pub fn prepare(series: &TimeSeries, tau: usize, train_fraction: f64) -> Result<PreparedSeries> {
    if tau == 0 || tau >= series.len() {
        return Err(KflowError::InvalidArgument(format!(
            "tau = {tau} does not fit a series of length {}",
            series.len()
        )));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(KflowError::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n_pairs = series.len() - tau;
    let n_train = (train_fraction * n_pairs as f64).floor() as usize;
    if n_train == 0 || n_train >= n_pairs {
        return Err(KflowError::InvalidArgument(format!(
            "split of {n_pairs} pairs at fraction {train_fraction} leaves an empty side"
        )));
    }
    let standardizer = Standardizer::fit(series, n_train + tau)?;
    let ds = build_delay_dataset(&standardizer.transform_series(series)?, tau)?;
    Ok(PreparedSeries {
        name: series.name().to_string(),
        standardizer,
        train: ds.slice(0..n_train),
        test: ds.slice(n_train..n_pairs),
    })
}

/// Random start followed by training; `λ₂ = 0` runs plain Kernel Flows.
pub fn train_with(dataset: &DelayDataset, config: &TrainConfig) -> Result<TrainReport> {
    let init = feasible_init(dataset, config.seed, config.lambda1, config.batch_size)?;
    if config.lambda2 == 0.0 {
        train_regular(dataset, &init, config)
    } else {
        train(dataset, &init, config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub grid: Vec<f64>,
    /// `|grid| × 3`, `+∞` for failed cells.
    pub fold_smapes: Vec<Vec<f64>>,
    pub mean_smapes: Vec<f64>,
    pub selected_lambda2: f64,
    pub failures: Vec<String>,
}

/// Three contiguous blocks covering `0..n`.
pub fn fold_bounds(n: usize) -> [std::ops::Range<usize>; 3] {
    [0..n / 3, n / 3..2 * n / 3, 2 * n / 3..n]
}

fn held_out_split(dataset: &DelayDataset, fold: &std::ops::Range<usize>) -> (DelayDataset, DelayDataset) {
    let keep: Vec<usize> = (0..dataset.len()).filter(|i| !fold.contains(i)).collect();
    (dataset.select(&keep), dataset.slice(fold.clone()))
}

/// One-step SMAPE of a model on `test`, in original units when `unscale` is given.
pub fn one_step_smape(model: &TrainedModel, test: &DelayDataset, unscale: Option<&Standardizer>) -> Result<f64> {
    let pred = model.one_step_forecast(test)?;
    match unscale {
        Some(s) => smape(&s.inverse(&pred)?, &s.inverse(test.y())?),
        None => smape(&pred, test.y()),
    }
}

/// 3-fold contiguous cross-validation of `λ₂` on an embedded dataset.
pub fn cross_validate(
    dataset: &DelayDataset,
    lambda1: f64,
    grid: &[f64],
    config: &TrainConfig,
    unscale: Option<&Standardizer>,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(KflowError::InvalidArgument("lambda2 grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(KflowError::InvalidArgument(format!("lambda2 candidate {bad} is not a finite nonnegative number")));
    }
    if dataset.len() < 9 {
        return Err(KflowError::InvalidArgument(format!(
            "cross-validation needs at least 9 rows, got {}",
            dataset.len()
        )));
    }
    let folds = fold_bounds(dataset.len());
    let protocol = Protocol {
        lambda1,
        train: config.clone(),
        ..Protocol::default()
    };
    let cells: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..3).map(move |f| (g, f))).collect();
    let outcomes: Vec<std::result::Result<f64, String>> = cells
        .par_iter()
        .map(|&(g, f)| {
            let (fit_set, held) = held_out_split(dataset, &folds[f]);
            let cfg = protocol.train_config(fit_set.len(), grid[g]);
            let run = || -> Result<f64> {
                let report = train_with(&fit_set, &cfg)?;
                let model = fit(&report.final_params, &fit_set, lambda1)?;
                one_step_smape(&model, &held, unscale)
            };
            run().map_err(|e| format!("lambda2={} fold={}: {e}", grid[g], f + 1))
        })
        .collect();

    let mut fold_smapes = vec![vec![f64::INFINITY; 3]; grid.len()];
    let mut failures = Vec::new();
    for (&(g, f), out) in cells.iter().zip(outcomes) {
        match out {
            Ok(v) => fold_smapes[g][f] = v,
            Err(e) => failures.push(e),
        }
    }
    let mean_smapes: Vec<f64> = fold_smapes.iter().map(|r| r.iter().sum::<f64>() / 3.0).collect();
    let mut best: Option<usize> = None;
    for (i, &m) in mean_smapes.iter().enumerate() {
        if !m.is_finite() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) if m < mean_smapes[b] || (m == mean_smapes[b] && grid[i] < grid[b]) => Some(i),
            keep => keep,
        };
    }
    let Some(best) = best else {
        return Err(KflowError::CrossValidation(format!(
            "every candidate failed: {}",
            failures.join("; ")
        )));
    };
    Ok(CvResult {
        grid: grid.to_vec(),
        fold_smapes,
        mean_smapes,
        selected_lambda2: grid[best],
        failures,
    })
}

/// Embeds a (standardized) series and cross-validates `λ₂` on it.
pub fn select_lambda2(
    series: &TimeSeries,
    tau: usize,
    lambda1: f64,
    grid: &[f64],
    config: &TrainConfig,
) -> Result<CvResult> {
    cross_validate(&build_delay_dataset(series, tau)?, lambda1, grid, config, None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "RBF")]
    Rbf,
    #[serde(rename = "TrainedRBF")]
    TrainedRbf,
    #[serde(rename = "RegularKF")]
    RegularKf,
    #[serde(rename = "SparseKF")]
    SparseKf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rbf, Method::TrainedRbf, Method::RegularKf, Method::SparseKf];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rbf => "RBF",
            Method::TrainedRbf => "TrainedRBF",
            Method::RegularKf => "RegularKF",
            Method::SparseKf => "SparseKF",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: Method,
    pub smape: f64,
    pub hausdorff: f64,
    pub nnz_alpha: Option<usize>,
    pub error: Option<String>,
    /// Seconds spent on this method. Not serialized.
    #[serde(skip)]
    pub wall_time: f64,
}

impl MethodScore {
    fn failed(method: Method, e: &KflowError) -> Self {
        Self {
            method,
            smape: f64::INFINITY,
            hausdorff: f64::INFINITY,
            nnz_alpha: None,
            error: Some(e.to_string()),
            wall_time: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub system: String,
    /// In [`Method::ALL`] order.
    pub scores: Vec<MethodScore>,
    pub best: String,
    pub cv: Option<CvResult>,
}

impl BenchmarkRow {
    pub fn score(&self, method: Method) -> &MethodScore {
        &self.scores[Method::ALL.iter().position(|m| *m == method).unwrap()]
    }
}

/// Minimum finite SMAPE; ties go to the earlier method.
pub fn best_method(scores: &[MethodScore]) -> String {
    let mut best: Option<&MethodScore> = None;
    for s in scores {
        if s.smape.is_finite() && best.is_none_or(|b| s.smape < b.smape) {
            best = Some(s);
        }
    }
    best.map_or_else(|| "none".to_string(), |s| s.method.name().to_string())
}

fn score_model(model: &TrainedModel, prep: &PreparedSeries) -> Result<(f64, f64)> {
    let s = one_step_smape(model, &prep.test, Some(&prep.standardizer))?;
    let seed: Vec<f64> = prep.test.x().row(0).iter().copied().collect();
    let rollout = model.rollout(&seed, prep.test.len())?;
    let hd = if rollout.states.nrows() == 0 {
        f64::INFINITY
    } else {
        hausdorff(&rollout.states, prep.test.y())?
    };
    Ok((s, hd))
}

fn gaussian_only(seed: u64) -> KernelParams {
    let drawn = init_params(seed);
    let mut p = KernelParams::zeros();
    *p.theta_mut() = *drawn.theta();
    p.alpha_mut()[2] = drawn.alpha()[2];
    p
}

fn run_method(method: Method, prep: &PreparedSeries, protocol: &Protocol) -> Result<(MethodScore, Option<CvResult>)> {
    let start = Instant::now();
    let n = prep.train.len();
    let mut cv = None;
    let params = match method {
        Method::Rbf => KernelParams::gaussian(protocol.rbf_sigma),
        Method::TrainedRbf => {
            let cfg = protocol.train_config(n, 0.0);
            train_regular(&prep.train, &gaussian_only(cfg.seed), &cfg)?.final_params
        }
        Method::RegularKf => train_with(&prep.train, &protocol.train_config(n, 0.0))?.final_params,
        Method::SparseKf => {
            let result = cross_validate(
                &prep.train,
                protocol.lambda1,
                &protocol.lambda2_grid,
                &protocol.train,
                Some(&prep.standardizer),
            )?;
            let cfg = protocol.train_config(n, result.selected_lambda2);
            cv = Some(result);
            train_with(&prep.train, &cfg)?.final_params
        }
    };
    let model = fit(&params, &prep.train, protocol.lambda1)?;
    let (s, hd) = score_model(&model, prep)?;
    Ok((
        MethodScore {
            method,
            smape: s,
            hausdorff: hd,
            nnz_alpha: Some(params.nnz_alpha()),
            error: None,
            wall_time: start.elapsed().as_secs_f64(),
        },
        cv,
    ))
}

/// Scores all four methods on one series. Failures are recorded in the row.
pub fn evaluate_series(series: &TimeSeries, protocol: &Protocol) -> BenchmarkRow {
    let prepared = prepare(series, protocol.tau, protocol.train_fraction);
    let mut cv = None;
    let scores: Vec<MethodScore> = match &prepared {
        Err(e) => Method::ALL.iter().map(|&m| MethodScore::failed(m, e)).collect(),
        Ok(prep) => {
            let results: Vec<_> = Method::ALL.par_iter().map(|&m| (m, run_method(m, prep, protocol))).collect();
            results
                .into_iter()
                .map(|(m, r)| match r {
                    Ok((score, c)) => {
                        if c.is_some() {
                            cv = c;
                        }
                        score
                    }
                    Err(e) => MethodScore::failed(m, &e),
                })
                .collect()
        }
    };
    BenchmarkRow {
        system: series.name().to_string(),
        best: best_method(&scores),
        scores,
        cv,
    }
}

/// One row per series, in input order.
pub fn run_benchmark(series_list: &[TimeSeries], protocol: &Protocol) -> Vec<BenchmarkRow> {
    series_list.par_iter().map(|s| evaluate_series(s, protocol)).collect()
}

/// Number of systems each method wins; systems with no scored method are skipped.
pub fn win_counts(rows: &[BenchmarkRow]) -> Vec<(Method, usize)> {
    Method::ALL
        .iter()
        .map(|&m| (m, rows.iter().filter(|r| r.best == m.name()).count()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = KflowError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(KflowError::InvalidArgument(format!(
                "unknown report format '{other}' (expected json, csv or markdown)"
            ))),
        }
    }
}

/// Exact, round-trippable rendering (`inf` for failures).
fn num(v: f64) -> String {
    format!("{v}")
}

pub fn report_columns() -> Vec<String> {
    let mut cols = vec!["Name".to_string()];
    for m in Method::ALL {
        cols.push(format!("{}_SMAPE", m.name()));
        cols.push(format!("{}_HD", m.name()));
    }
    cols.push("Best".into());
    cols
}

fn row_cells(row: &BenchmarkRow) -> Vec<String> {
    let mut cells = vec![row.system.clone()];
    for s in &row.scores {
        cells.push(num(s.smape));
        cells.push(num(s.hausdorff));
    }
    cells.push(row.best.clone());
    cells
}

#[derive(Serialize)]
struct JsonReport<'a> {
    note: &'a str,
    columns: Vec<String>,
    rows: &'a [BenchmarkRow],
}

pub fn emit_report(rows: &[BenchmarkRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(KflowError::InvalidArgument("no rows to report".into()));
    }
    let cols = report_columns();
    let mut out = String::new();
    match format {
        ReportFormat::Json => {
            let doc = JsonReport {
                note: REPORT_NOTE,
                columns: cols,
                rows,
            };
            out = serde_json::to_string_pretty(&doc).map_err(|e| KflowError::Data(e.to_string()))?;
            out.push('\n');
        }
        ReportFormat::Csv => {
            writeln!(out, "{}", cols.join(",")).unwrap();
            for r in rows {
                writeln!(out, "{}", row_cells(r).join(",")).unwrap();
            }
        }
        ReportFormat::Markdown => {
            writeln!(out, "> {REPORT_NOTE}\n").unwrap();
            writeln!(out, "| {} |", cols.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(cols.len())).unwrap();
            for r in rows {
                writeln!(out, "| {} |", row_cells(r).join(" | ")).unwrap();
            }
        }
    }
    Ok(out)
}

/// Per-method SMAPE columns, one row per system, for box plots.
pub fn emit_distribution(rows: &[BenchmarkRow]) -> String {
    let mut out = String::new();
    let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    writeln!(out, "{}", names.join(",")).unwrap();
    for r in rows {
        let cells: Vec<String> = r.scores.iter().map(|s| num(s.smape)).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    out
}

/// Mean of each method's SMAPE across rows, in [`Method::ALL`] order.
pub fn mean_smapes(rows: &[BenchmarkRow]) -> Vec<f64> {
    Method::ALL
        .iter()
        .map(|&m| rows.iter().map(|r| r.score(m).smape).sum::<f64>() / rows.len() as f64)
        .collect()
}
