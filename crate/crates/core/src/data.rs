//! Trajectory generation for built-in chaotic systems, CSV I/O and per-coordinate
//! standardization.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, RowDVector};
use serde::{Deserialize, Serialize};

use crate::embedding::TimeSeries;
use crate::error::{KflowError, Result};

/// Right-hand side `f(state, params) -> d state/dt`, written into `out`.
pub type VectorField = fn(state: &[f64], params: &[f64], out: &mut [f64]);

#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub name: &'static str,
    pub dim: usize,
    pub coords: &'static [&'static str],
    pub rhs: VectorField,
    pub default_params: Vec<(&'static str, f64)>,
    pub default_ic: Vec<f64>,
    pub default_dt: f64,
    pub transient_skip: usize,
}

impl SystemSpec {
    pub fn param_values(&self) -> Vec<f64> {
        self.default_params.iter().map(|(_, v)| *v).collect()
    }

    pub fn eval(&self, state: &[f64], out: &mut [f64]) {
        (self.rhs)(state, &self.param_values(), out)
    }
}

fn lorenz(s: &[f64], p: &[f64], out: &mut [f64]) {
    let (sigma, rho, beta) = (p[0], p[1], p[2]);
    out[0] = sigma * (s[1] - s[0]);
    out[1] = s[0] * (rho - s[2]) - s[1];
    out[2] = s[0] * s[1] - beta * s[2];
}

fn rossler(s: &[f64], p: &[f64], out: &mut [f64]) {
    let (a, b, c) = (p[0], p[1], p[2]);
    out[0] = -s[1] - s[2];
    out[1] = s[0] + a * s[1];
    out[2] = b + s[2] * (s[0] - c);
}

fn thomas(s: &[f64], p: &[f64], out: &mut [f64]) {
    let b = p[0];
    out[0] = s[1].sin() - b * s[0];
    out[1] = s[2].sin() - b * s[1];
    out[2] = s[0].sin() - b * s[2];
}

// Forcing phase carried as (cos ωt, sin ωt), which rotates at rate ω.
fn duffing(s: &[f64], p: &[f64], out: &mut [f64]) {
    let (alpha, beta, delta, gamma, omega) = (p[0], p[1], p[2], p[3], p[4]);
    let (x, v, c, sn) = (s[0], s[1], s[2], s[3]);
    out[0] = v;
    out[1] = -delta * v - beta * x - alpha * x * x * x + gamma * c;
    out[2] = -omega * sn;
    out[3] = omega * c;
}

/// Built-in systems with classical parameter values. Default steps give roughly
/// 100 samples per mean oscillation period of the fastest coordinate.
///
/// * Lorenz: σ=10, ρ=28, β=8/3.
/// * Rossler: a=b=0.2, c=5.7.
/// * Thomas: b=0.208186.
/// * Duffing: ẍ + δẋ + βx + αx³ = γ cos ωt with α=1, β=−1, δ=0.1, γ=0.35, ω=1.4,
///   state `(x, ẋ, cos ωt, sin ωt)`.
pub fn builtin_systems() -> Vec<SystemSpec> {
    vec![
        SystemSpec {
            name: "Lorenz",
            dim: 3,
            coords: &["x", "y", "z"],
            rhs: lorenz,
            default_params: vec![("sigma", 10.0), ("rho", 28.0), ("beta", 8.0 / 3.0)],
            default_ic: vec![1.0, 1.0, 1.0],
            default_dt: 0.0075,
            transient_skip: 2000,
        },
        SystemSpec {
            name: "Rossler",
            dim: 3,
            coords: &["x", "y", "z"],
            rhs: rossler,
            default_params: vec![("a", 0.2), ("b", 0.2), ("c", 5.7)],
            default_ic: vec![1.0, 1.0, 0.0],
            default_dt: 0.06,
            transient_skip: 2000,
        },
        SystemSpec {
            name: "Thomas",
            dim: 3,
            coords: &["x", "y", "z"],
            rhs: thomas,
            default_params: vec![("b", 0.208186)],
            default_ic: vec![0.1, 0.0, 0.0],
            default_dt: 0.15,
            transient_skip: 2000,
        },
        SystemSpec {
            name: "Duffing",
            dim: 4,
            coords: &["x", "v", "cos_phase", "sin_phase"],
            rhs: duffing,
            default_params: vec![("alpha", 1.0), ("beta", -1.0), ("delta", 0.1), ("gamma", 0.35), ("omega", 1.4)],
            default_ic: vec![0.1, 0.0, 1.0, 0.0],
            default_dt: 0.045,
            transient_skip: 2000,
        },
    ]
}

/// Case-insensitive lookup; the error lists the available names.
pub fn find_system(name: &str) -> Result<SystemSpec> {
    let all = builtin_systems();
    let names: Vec<&str> = all.iter().map(|s| s.name).collect();
    all.into_iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| {
            KflowError::InvalidArgument(format!(
                "unknown system '{name}'; available: {}",
                names.join(", ")
            ))
        })
}

fn rk4_step(spec: &SystemSpec, params: &[f64], x: &mut [f64], dt: f64, scratch: &mut [Vec<f64>; 5]) {
    let [k1, k2, k3, k4, tmp] = scratch;
    let d = x.len();
    (spec.rhs)(x, params, k1);
    for i in 0..d {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    (spec.rhs)(tmp, params, k2);
    for i in 0..d {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    (spec.rhs)(tmp, params, k3);
    for i in 0..d {
        tmp[i] = x[i] + dt * k3[i];
    }
    (spec.rhs)(tmp, params, k4);
    for i in 0..d {
        x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Fixed-step RK4. The first `transient_skip` steps are discarded, then the
/// current state is recorded and one step taken, `n_samples` times.
pub fn integrate_rk4(spec: &SystemSpec, n_samples: usize, dt: f64) -> Result<TimeSeries> {
    if n_samples < 2 {
        return Err(KflowError::InvalidArgument(format!(
            "need at least 2 samples, got {n_samples}"
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(KflowError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if spec.default_ic.len() != spec.dim {
        return Err(KflowError::DimensionMismatch(format!(
            "{}: initial condition has {} entries, dim is {}",
            spec.name,
            spec.default_ic.len(),
            spec.dim
        )));
    }
    let d = spec.dim;
    let params = spec.param_values();
    let mut x = spec.default_ic.clone();
    let mut scratch: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; d]);
    let mut values = DMatrix::zeros(n_samples, d);
    let total = spec.transient_skip + n_samples;
    for step in 0..total {
        if step >= spec.transient_skip {
            let row = step - spec.transient_skip;
            for j in 0..d {
                values[(row, j)] = x[j];
            }
            if row + 1 == n_samples {
                break;
            }
        }
        rk4_step(spec, &params, &mut x, dt, &mut scratch);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(KflowError::IntegrationBlowUp { step: step + 1 });
        }
    }
    TimeSeries::new(values, dt, spec.name)
}

/// Reads a numeric CSV. A first row that does not parse as numbers is taken as
/// a header; a `# dt=<value>` comment sets the step (default 1).
pub fn load_csv(path: impl AsRef<Path>) -> Result<TimeSeries> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| KflowError::Io(format!("{}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "series".into());
    parse_csv(&text, &name)
}

/// Parses CSV text as described for [`load_csv`].
pub fn parse_csv(text: &str, name: &str) -> Result<TimeSeries> {
    let mut dt = 1.0;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut first_data_line = true;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(v) = comment.trim().strip_prefix("dt=") {
                dt = v
                    .trim()
                    .parse()
                    .map_err(|_| KflowError::Data(format!("line {}: bad dt value '{}'", lineno + 1, v.trim())))?;
            }
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = cells.iter().map(|c| c.parse::<f64>()).collect();
        match parsed {
            Ok(r) => {
                if let Some(first) = rows.first() {
                    if first.len() != r.len() {
                        return Err(KflowError::Data(format!(
                            "line {}: expected {} columns, found {}",
                            lineno + 1,
                            first.len(),
                            r.len()
                        )));
                    }
                }
                rows.push(r);
            }
            Err(_) if first_data_line => {}
            Err(_) => {
                let bad = cells.iter().find(|c| c.parse::<f64>().is_err()).unwrap_or(&"");
                return Err(KflowError::Data(format!("line {}: non-numeric cell '{bad}'", lineno + 1)));
            }
        }
        first_data_line = false;
    }
    if rows.is_empty() {
        return Err(KflowError::Data("no numeric rows".into()));
    }
    let d = rows[0].len();
    let values = DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten());
    TimeSeries::new(values, dt, name)
}

/// CSV text with a `# dt=` line, a header row and 17 significant digits per value.
pub fn format_csv(series: &TimeSeries, header: Option<&[&str]>) -> Result<String> {
    let d = series.dim();
    let names: Vec<String> = match header {
        Some(h) if h.len() != d => {
            return Err(KflowError::DimensionMismatch(format!(
                "header has {} names for {d} columns",
                h.len()
            )))
        }
        Some(h) => h.iter().map(|s| s.to_string()).collect(),
        None => (1..=d).map(|j| format!("x{j}")).collect(),
    };
    let mut out = String::new();
    writeln!(out, "# dt={:.16e}", series.dt()).unwrap();
    writeln!(out, "{}", names.join(",")).unwrap();
    for row in series.values().row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    Ok(out)
}

pub fn save_csv(series: &TimeSeries, path: impl AsRef<Path>, header: Option<&[&str]>) -> Result<()> {
    let path = path.as_ref();
    let text = format_csv(series, header)?;
    fs::write(path, text).map_err(|e| KflowError::Io(format!("{}: {e}", path.display())))
}

/// Per-coordinate affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Statistics over the first `n_rows` samples. Constant coordinates keep scale 1.
    pub fn fit(series: &TimeSeries, n_rows: usize) -> Result<Self> {
        if n_rows == 0 || n_rows > series.len() {
            return Err(KflowError::InvalidArgument(format!(
                "cannot fit on {n_rows} of {} rows",
                series.len()
            )));
        }
        let part = series.values().rows(0, n_rows);
        let mut mean = Vec::with_capacity(series.dim());
        let mut std = Vec::with_capacity(series.dim());
        for col in part.column_iter() {
            let m = col.mean();
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n_rows as f64;
            mean.push(m);
            std.push(if var > 0.0 { var.sqrt() } else { 1.0 });
        }
        Ok(Self { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    fn check(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.ncols() != self.mean.len() {
            return Err(KflowError::DimensionMismatch(format!(
                "standardizer has {} coordinates, data has {}",
                self.mean.len(),
                m.ncols()
            )));
        }
        Ok(())
    }

    pub fn transform(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| (m[(i, j)] - self.mean[j]) / self.std[j]))
    }

    pub fn inverse(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(m)?;
        Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * self.std[j] + self.mean[j]))
    }

    pub fn transform_row(&self, row: &RowDVector<f64>) -> RowDVector<f64> {
        RowDVector::from_fn(row.len(), |_, j| (row[j] - self.mean[j]) / self.std[j])
    }

    pub fn transform_series(&self, series: &TimeSeries) -> Result<TimeSeries> {
        series.with_values(self.transform(series.values())?)
    }
}
