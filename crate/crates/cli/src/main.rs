//! `kflow`: generate trajectories, train sparse kernel flows, forecast and benchmark.

mod config;
mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kflow::data::{find_system, integrate_rk4, load_csv, Standardizer};
use kflow::evaluation::{
    cross_validate, emit_distribution, emit_report, run_benchmark, train_with, win_counts, CvResult, ReportFormat,
};
use kflow::forecaster::{fit, TrainedModel};
use kflow::metrics::{hausdorff, smape};
use kflow::optimizer::TrainReport;
use kflow::{build_delay_dataset, KflowError, Result, TimeSeries};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use config::{parse_grid, PartialConfig, RunConfig};

#[derive(Parser)]
#[command(name = "kflow", version, about = "Sparse kernel flows for forecasting chaotic systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Debug)]
struct Grid(Vec<f64>);

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// JSON file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    /// Comma-separated candidates, e.g. 0,1e-4,1e-3.
    #[arg(long, value_parser = |s: &str| parse_grid(s).map(Grid))]
    lambda2_grid: Option<Grid>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrainMode {
    Sparse,
    Regular,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ForecastMode {
    Onestep,
    Rollout,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a built-in system and write it as CSV.
    Generate {
        #[arg(long)]
        system: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Learn a kernel from a CSV series; writes the model and a training report.
    Train {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<TrainMode>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also write an SVG of the loss curve.
        #[arg(long)]
        plot: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Predict from a trained model; writes predictions CSV and a scores JSON.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ForecastMode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.scores.json`.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write an SVG of the first coordinate against the truth.
        #[arg(long)]
        plot: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Four-method comparison over CSV files and built-in system names.
    Benchmark {
        /// One entry per line: a CSV path or a built-in system name.
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Samples generated for built-in systems.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

/// Reproducibility header embedded in every artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Provenance {
    kflow_version: String,
    command: String,
    seed: u64,
    input_digest: Option<String>,
    config: RunConfig,
}

impl Provenance {
    fn new(command: &str, cfg: &RunConfig, input_digest: Option<String>) -> Self {
        Self {
            kflow_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            input_digest,
            config: cfg.clone(),
        }
    }

    fn comment_lines(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# kflow_version={}", self.kflow_version).unwrap();
        writeln!(s, "# command={}", self.command).unwrap();
        writeln!(s, "# seed={}", self.seed).unwrap();
        writeln!(s, "# input_digest={}", self.input_digest.as_deref().unwrap_or("none")).unwrap();
        writeln!(s, "# config={}", serde_json::to_string(&self.config).unwrap()).unwrap();
        s
    }
}

#[derive(Serialize, Deserialize)]
struct ModelArtifact {
    #[serde(flatten)]
    provenance: Provenance,
    selected_lambda2: f64,
    coords: Vec<String>,
    standardizer: Standardizer,
    model: TrainedModel,
}

#[derive(Serialize)]
struct TrainArtifact<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    selected_lambda2: f64,
    cv: Option<&'a CvResult>,
    report: &'a TrainReport,
}

#[derive(Serialize)]
struct ScoresArtifact<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    mode: &'a str,
    predicted_rows: usize,
    compared_rows: usize,
    diverged_at: Option<usize>,
    smape: Option<f64>,
    hausdorff: Option<f64>,
}

#[derive(Serialize)]
struct BenchmarkArtifact<'a> {
    #[serde(flatten)]
    provenance: &'a Provenance,
    report: serde_json::Value,
}

enum Failure {
    Usage(String),
    Lib(KflowError),
}

impl From<KflowError> for Failure {
    fn from(e: KflowError) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| KflowError::Io(format!("{}: {e}", path.display())))?;
    Ok(digest(&bytes))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| KflowError::Io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| KflowError::Io(format!("{}: {e}", path.display())))
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable artifact");
    s.push('\n');
    s
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn resolve(common: &Common, extra: PartialConfig) -> CliResult<RunConfig> {
    let file = match &common.config {
        Some(p) => PartialConfig::load(p)?,
        None => PartialConfig::default(),
    };
    let flags = PartialConfig {
        tau: common.tau,
        lambda1: common.lambda1,
        lambda2_grid: common.lambda2_grid.clone().map(|g| g.0),
        epochs: common.epochs,
        lr: common.lr,
        batch_size: common.batch_size,
        seed: common.seed,
        train_fraction: common.train_fraction,
        ..extra
    };
    Ok(RunConfig::resolve(file.merged(flags))?)
}

fn series_csv(provenance: &Provenance, dt: f64, coords: &[String], values: &DMatrix<f64>) -> String {
    let mut s = provenance.comment_lines();
    writeln!(s, "# dt={dt:.16e}").unwrap();
    writeln!(s, "{}", coords.join(",")).unwrap();
    for row in values.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

fn default_coords(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

fn cmd_generate(system: &str, n: Option<usize>, dt: Option<f64>, out: &Path, common: &Common) -> CliResult<()> {
    let spec = find_system(system)?;
    let cfg = resolve(
        common,
        PartialConfig {
            n,
            dt,
            ..Default::default()
        },
    )?;
    let n = cfg.n.unwrap_or(7200);
    let dt = cfg.dt.unwrap_or(spec.default_dt);
    let series = integrate_rk4(&spec, n, dt)?;
    let provenance = Provenance::new("generate", &cfg, Some(format!("builtin:{}", spec.name)));
    let coords: Vec<String> = spec.coords.iter().map(|c| c.to_string()).collect();
    write(out, &series_csv(&provenance, dt, &coords, series.values()))?;
    println!("{}: n={} d={} dt={}", spec.name, series.len(), series.dim(), dt);
    Ok(())
}

fn header_names(path: &Path, d: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return default_coords(d);
    };
    let first = text.lines().map(str::trim).find(|l| !l.is_empty() && !l.starts_with('#'));
    match first {
        Some(l) if l.split(',').any(|c| c.trim().parse::<f64>().is_err()) => {
            let names: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if names.len() == d {
                names
            } else {
                default_coords(d)
            }
        }
        _ => default_coords(d),
    }
}

fn cmd_train(
    input: &Path,
    mode: Option<TrainMode>,
    out: &Path,
    report_path: Option<&Path>,
    plot: bool,
    common: &Common,
) -> CliResult<()> {
    let cfg = resolve(
        common,
        PartialConfig {
            mode: mode.map(|m| format!("{m:?}").to_lowercase()),
            ..Default::default()
        },
    )?;
    let sparse = match cfg.mode.as_deref().unwrap_or("sparse") {
        "sparse" => true,
        "regular" => false,
        other => return Err(Failure::Usage(format!("unknown train mode '{other}' (expected sparse or regular)"))),
    };
    let mut cfg = cfg;
    cfg.mode = Some(if sparse { "sparse" } else { "regular" }.into());

    let series = load_csv(input)?;
    let provenance = Provenance::new("train", &cfg, Some(file_digest(input)?));
    let standardizer = Standardizer::fit(&series, series.len())?;
    let dataset = build_delay_dataset(&standardizer.transform_series(&series)?, cfg.tau)?;
    let protocol = cfg.protocol();

    let cv = if sparse {
        Some(cross_validate(
            &dataset,
            cfg.lambda1,
            &cfg.lambda2_grid,
            &cfg.train_config(0.0),
            Some(&standardizer),
        )?)
    } else {
        None
    };
    let lambda2 = cv.as_ref().map_or(0.0, |c| c.selected_lambda2);
    let train_cfg = protocol.train_config(dataset.len(), lambda2);
    let report = train_with(&dataset, &train_cfg)?;
    let model = fit(&report.final_params, &dataset, cfg.lambda1)?;

    let artifact = ModelArtifact {
        provenance: provenance.clone(),
        selected_lambda2: lambda2,
        coords: header_names(input, series.dim()),
        standardizer,
        model,
    };
    write(out, &json(&artifact))?;
    let report_path = report_path.map_or_else(|| sibling(out, "report.json"), Path::to_path_buf);
    write(
        &report_path,
        &json(&TrainArtifact {
            provenance: &provenance,
            selected_lambda2: lambda2,
            cv: cv.as_ref(),
            report: &report,
        }),
    )?;
    let mut loss = provenance.comment_lines();
    loss.push_str("epoch,rho,l1,total\n");
    for r in &report.loss_history {
        writeln!(loss, "{},{},{},{}", r.epoch, r.rho, r.l1, r.total).unwrap();
    }
    write(&sibling(out, "loss.csv"), &loss)?;
    if plot {
        let pts = |f: fn(&kflow::optimizer::EpochRecord) -> f64| {
            report.loss_history.iter().map(|r| (r.epoch as f64, f(r))).collect()
        };
        let svg = svg::line_plot(
            "Kernel Flows loss",
            "epoch",
            &[
                svg::Line {
                    label: "rho",
                    points: pts(|r| r.rho),
                },
                svg::Line {
                    label: "total",
                    points: pts(|r| r.total),
                },
            ],
        );
        write(&sibling(out, "loss.svg"), &svg)?;
    }
    let final_rho = report.loss_history.last().map_or(f64::NAN, |r| r.rho);
    println!(
        "rho={final_rho} nnz_alpha={} lambda2={lambda2} epochs_run={} failed_epochs={}",
        report.nnz_alpha,
        report.epochs_run,
        report.failed_epochs.len()
    );
    eprintln!("wall_time={:.2}s", report.wall_time);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_forecast(
    model_path: &Path,
    input: &Path,
    mode: Option<ForecastMode>,
    steps: Option<usize>,
    out: &Path,
    scores_path: Option<&Path>,
    plot: bool,
    common: &Common,
) -> CliResult<()> {
    let cfg = resolve(
        common,
        PartialConfig {
            mode: mode.map(|m| format!("{m:?}").to_lowercase()),
            steps,
            ..Default::default()
        },
    )?;
    let rollout = match cfg.mode.as_deref().unwrap_or("onestep") {
        "onestep" => false,
        "rollout" => true,
        other => return Err(Failure::Usage(format!("unknown forecast mode '{other}' (expected onestep or rollout)"))),
    };
    let mut cfg = cfg;
    cfg.mode = Some(if rollout { "rollout" } else { "onestep" }.into());

    let text = fs::read_to_string(model_path).map_err(|e| KflowError::Io(format!("{}: {e}", model_path.display())))?;
    let artifact: ModelArtifact =
        serde_json::from_str(&text).map_err(|e| KflowError::Data(format!("{}: {e}", model_path.display())))?;
    let model = &artifact.model;
    let series = load_csv(input)?;
    if series.dim() != model.dim() {
        return Err(KflowError::DimensionMismatch(format!(
            "input has {} coordinates, model expects {}",
            series.dim(),
            model.dim()
        ))
        .into());
    }
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.update(fs::read(input).map_err(KflowError::from)?);
    let provenance = Provenance::new("forecast", &cfg, Some(format!("{:x}", hasher.finalize())));

    let st = &artifact.standardizer;
    let dataset = build_delay_dataset(&st.transform_series(&series)?, model.tau)?;
    let (pred_z, diverged_at) = if rollout {
        let n = cfg.steps.unwrap_or(dataset.len());
        if n == 0 {
            return Err(Failure::Usage("--steps must be positive".into()));
        }
        let seed: Vec<f64> = dataset.x().row(0).iter().copied().collect();
        let r = model.rollout(&seed, n)?;
        (r.states, r.diverged_at)
    } else {
        let n = cfg.steps.unwrap_or(dataset.len()).min(dataset.len());
        if n == 0 {
            return Err(Failure::Usage("--steps must be positive".into()));
        }
        (model.predict(&dataset.x().rows(0, n).into_owned())?, None)
    };
    let compared = pred_z.nrows().min(dataset.len());
    let (s, hd) = if compared == 0 {
        (None, None)
    } else {
        let p = pred_z.rows(0, compared).into_owned();
        let t = dataset.y().rows(0, compared).into_owned();
        (Some(smape(&st.inverse(&p)?, &st.inverse(&t)?)?), Some(hausdorff(&p, &t)?))
    };
    let pred = st.inverse(&pred_z)?;
    write(out, &series_csv(&provenance, series.dt(), &artifact.coords, &pred))?;
    let mode_name = cfg.mode.clone().unwrap_or_default();
    let scores_path = scores_path.map_or_else(|| sibling(out, "scores.json"), Path::to_path_buf);
    write(
        &scores_path,
        &json(&ScoresArtifact {
            provenance: &provenance,
            mode: &mode_name,
            predicted_rows: pred.nrows(),
            compared_rows: compared,
            diverged_at,
            smape: s,
            hausdorff: hd,
        }),
    )?;
    if plot {
        let truth = st.inverse(dataset.y())?;
        let line = |m: &DMatrix<f64>, rows: usize| (0..rows).map(|i| (i as f64, m[(i, 0)])).collect();
        let svg = svg::line_plot(
            &format!("{} forecast, first coordinate", mode_name),
            "step",
            &[
                svg::Line {
                    label: "truth",
                    points: line(&truth, compared),
                },
                svg::Line {
                    label: "forecast",
                    points: line(&pred, pred.nrows()),
                },
            ],
        );
        write(&sibling(out, "svg"), &svg)?;
    }
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| x.to_string());
    println!(
        "rows={} compared={} smape={} hausdorff={}",
        pred.nrows(),
        compared,
        show(s),
        show(hd)
    );
    Ok(())
}

fn read_manifest(path: &Path, n: usize, dt: Option<f64>) -> CliResult<Vec<TimeSeries>> {
    let text = fs::read_to_string(path).map_err(|e| KflowError::Io(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let candidate = base.join(line);
        if line.to_ascii_lowercase().ends_with(".csv") || candidate.is_file() {
            out.push(load_csv(&candidate)?);
        } else {
            let spec = find_system(line.strip_prefix("builtin:").unwrap_or(line))?;
            out.push(integrate_rk4(&spec, n, dt.unwrap_or(spec.default_dt))?);
        }
    }
    if out.is_empty() {
        return Err(Failure::Usage(format!("manifest {} lists no systems", path.display())));
    }
    Ok(out)
}

fn cmd_benchmark(manifest: &Path, out_dir: &Path, n: Option<usize>, common: &Common) -> CliResult<()> {
    let cfg = resolve(
        common,
        PartialConfig {
            n,
            ..Default::default()
        },
    )?;
    let series = read_manifest(manifest, cfg.n.unwrap_or(7200), cfg.dt)?;
    let provenance = Provenance::new("benchmark", &cfg, Some(file_digest(manifest)?));
    let rows = run_benchmark(&series, &cfg.protocol());

    let report_json: serde_json::Value = serde_json::from_str(&emit_report(&rows, ReportFormat::Json)?)
        .map_err(|e| KflowError::Data(e.to_string()))?;
    write(
        &out_dir.join("report.json"),
        &json(&BenchmarkArtifact {
            provenance: &provenance,
            report: report_json,
        }),
    )?;
    let header = provenance.comment_lines();
    write(
        &out_dir.join("report.csv"),
        &format!("{header}{}", emit_report(&rows, ReportFormat::Csv)?),
    )?;
    let md_header: String = header.lines().map(|l| format!("<!-- {} -->\n", l.trim_start_matches("# "))).collect();
    write(
        &out_dir.join("report.md"),
        &format!("{md_header}\n{}", emit_report(&rows, ReportFormat::Markdown)?),
    )?;
    write(&out_dir.join("distribution.csv"), &format!("{header}{}", emit_distribution(&rows)))?;

    let wins = win_counts(&rows);
    let scored: usize = wins.iter().map(|w| w.1).sum();
    let parts: Vec<String> = wins.iter().map(|(m, c)| format!("{}={c}", m.name())).collect();
    println!("wins: {} (scored {scored} of {})", parts.join(" "), rows.len());
    for r in &rows {
        for s in r.scores.iter().filter(|s| s.error.is_some()) {
            eprintln!("{} {}: {}", r.system, s.method.name(), s.error.as_deref().unwrap_or(""));
        }
    }
    if scored == 0 {
        return Err(KflowError::CrossValidation("every system failed".into()).into());
    }
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("KFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Failure::Usage(format!("KFLOW_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::Generate {
            system,
            n,
            dt,
            out,
            common,
        } => cmd_generate(system, *n, *dt, out, common),
        Command::Train {
            input,
            mode,
            out,
            report,
            plot,
            common,
        } => cmd_train(input, *mode, out, report.as_deref(), *plot, common),
        Command::Forecast {
            model,
            input,
            mode,
            steps,
            out,
            scores,
            plot,
            common,
        } => cmd_forecast(model, input, *mode, *steps, out, scores.as_deref(), *plot, common),
        Command::Benchmark {
            manifest,
            out,
            n,
            common,
        } => cmd_benchmark(manifest, out, *n, common),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error ({}): {e}", e.module());
            let code = match &e {
                e if e.is_numerical() => 4,
                KflowError::InvalidArgument(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
