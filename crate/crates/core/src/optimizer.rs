//! Alternating optimization of the sparse Kernel Flows objective.
//!
//! Each epoch draws one nested batch pair, takes a gradient step on `θ` with
//! `α` fixed, then a proximal-gradient (soft-threshold) step on `α` with `θ`
//! fixed. Weights that end below `zero_clamp` are set to exactly zero.

use std::time::Instant;

use nalgebra::Cholesky;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::DelayDataset;
use crate::error::{KflowError, Result};
use crate::kernels::{gram, rows_of, ElementalKernelId, GradParts, KernelParams, NUM_KERNELS, NUM_THETA};
use crate::loss::{nested_loss_and_grad, LossBreakdown};

/// Smallest magnitude allowed for θ slots that act as divisors or singular bases.
pub const THETA_FLOOR: f64 = 1e-8;

/// Zero-based θ slots kept away from zero (sign preserved).
const NONZERO_THETA: [usize; 22] = [4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 17, 19, 21, 23, 25, 26, 27, 28, 29, 33];
/// The exponent of the log elemental must stay positive.
const POSITIVE_THETA: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_theta: f64,
    pub lr_alpha: f64,
    /// Learning rates are scaled by `1/√epoch` when set.
    pub lr_decay: bool,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub zero_clamp: f64,
    /// Fraction of epochs allowed to fail before training aborts.
    pub failure_budget: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr_theta: 0.1,
            lr_alpha: 0.1,
            lr_decay: true,
            batch_size: 200,
            lambda1: 0.05,
            lambda2: 0.0,
            seed: 0,
            zero_clamp: 1e-3,
            failure_budget: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KflowError::InvalidArgument(msg));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        for (name, lr) in [("lr_theta", self.lr_theta), ("lr_alpha", self.lr_alpha)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be finite and positive, got {lr}"));
            }
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("zero_clamp", self.zero_clamp),
            ("failure_budget", self.failure_budget),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        Ok(())
    }

    /// Same settings with the batch size capped at `n`.
    pub fn with_batch_capped(&self, n: usize) -> Self {
        Self {
            batch_size: self.batch_size.min(n),
            ..self.clone()
        }
    }

    /// Settings for plain Kernel Flows: no ℓ₁ penalty and no final clamping.
    pub fn regular(&self) -> Self {
        Self {
            lambda2: 0.0,
            zero_clamp: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rho: f64,
    pub l1: f64,
    pub total: f64,
    pub numerator_qf: f64,
    pub denominator_qf: f64,
}

impl EpochRecord {
    fn new(epoch: usize, loss: &LossBreakdown) -> Self {
        Self {
            epoch,
            rho: loss.rho,
            l1: loss.l1_penalty,
            total: loss.total,
            numerator_qf: loss.numerator_qf,
            denominator_qf: loss.denominator_qf,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedEpoch {
    pub epoch: usize,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<EpochRecord>,
    pub final_params: KernelParams,
    pub nnz_alpha: usize,
    pub epochs_run: usize,
    pub failed_epochs: Vec<FailedEpoch>,
    /// Seconds. Not serialized so that report files are reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

impl TrainReport {
    /// Equality of everything except wall time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.loss_history == other.loss_history
            && self.final_params == other.final_params
            && self.nnz_alpha == other.nnz_alpha
            && self.epochs_run == other.epochs_run
            && self.failed_epochs == other.failed_epochs
    }
}

/// `sign(v)·max(|v| − t, 0)`, the proximal map of `t|·|`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Keeps singular θ slots away from zero.
pub fn project_theta(theta: &mut [f64; NUM_THETA]) {
    for &j in &NONZERO_THETA {
        if theta[j].abs() < THETA_FLOOR {
            theta[j] = if theta[j] < 0.0 { -THETA_FLOOR } else { THETA_FLOOR };
        }
    }
    theta[POSITIVE_THETA] = theta[POSITIVE_THETA].max(THETA_FLOOR);
}

/// Random starting point: `α_i ~ U(0.5, 1)`, `θ_j ~ U(0.5, 1.5)`.
pub fn init_params(seed: u64) -> KernelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha: Vec<f64> = (0..NUM_KERNELS).map(|_| rng.gen_range(0.5..1.0)).collect();
    let theta: Vec<f64> = (0..NUM_THETA).map(|_| rng.gen_range(0.5..1.5)).collect();
    KernelParams::new(&alpha, &theta).expect("finite by construction")
}

/// Draws [`init_params`], then shrinks the weights of elementals whose Gram on a
/// probe of the data is indefinite until `K + λ₁I` on that probe is positive
/// definite. Returns the draw unchanged when it is already feasible.
pub fn feasible_init(dataset: &DelayDataset, seed: u64, lambda1: f64, probe_size: usize) -> Result<KernelParams> {
    let mut params = init_params(seed);
    let n = dataset.len();
    if n == 0 {
        return Err(KflowError::InvalidArgument("cannot initialize on an empty dataset".into()));
    }
    let m = probe_size.clamp(1, n);
    let probe: Vec<usize> = (0..m).map(|i| i * n / m).collect();
    let x = dataset.x().select_rows(&probe);

    let mut indefinite = Vec::new();
    for id in ElementalKernelId::all() {
        let single = KernelParams::single(id, params.theta())?;
        let g = gram(&single, &x)?;
        let eig = g.symmetric_eigen().eigenvalues;
        let (lo, hi) = (eig.min(), eig.amax());
        if lo < -1e-8 * hi.max(1.0) {
            indefinite.push(id.index() - 1);
        }
    }
    for _ in 0..200 {
        let mut a = gram(&params, &x)?;
        for i in 0..m {
            a[(i, i)] += lambda1;
        }
        if Cholesky::new(a).is_some() {
            return Ok(params);
        }
        for &i in &indefinite {
            params.alpha_mut()[i] *= 0.5;
        }
    }
    Err(KflowError::Factorization {
        size: m,
        reason: "no feasible scaling of the indefinite elementals found".into(),
    })
}

fn nested_positions<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<usize>)> {
    if batch_size > n {
        return Err(KflowError::InvalidArgument(format!(
            "batch size {batch_size} exceeds the {n} available rows"
        )));
    }
    let b = sample(rng, n, batch_size).into_vec();
    let c_positions = sample(rng, batch_size, batch_size / 2).into_vec();
    Ok((b, c_positions))
}

/// Draws `batch_size` rows without replacement, then `⌊batch_size/2⌋` of those.
pub fn sample_nested_batches<R: Rng>(
    dataset: &DelayDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (b, c_positions) = nested_positions(dataset.len(), batch_size, rng)?;
    let c = c_positions.iter().map(|&i| b[i]).collect();
    Ok((b, c))
}

/// Runs alternating θ / proximal-α updates.
pub fn train(dataset: &DelayDataset, init: &KernelParams, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if !init.is_finite() {
        return Err(KflowError::InvalidArgument("initial parameters must be finite".into()));
    }
    if config.epochs > 0 && dataset.len() < config.batch_size {
        return Err(KflowError::InvalidArgument(format!(
            "dataset has {} rows, fewer than the batch size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init.clone();
    let all_rows = rows_of(dataset.x());
    let p = dataset.x().ncols();
    let budget = (config.failure_budget * config.epochs as f64).floor() as usize;
    let mut history = Vec::with_capacity(config.epochs);
    let mut failed = Vec::new();

    for epoch in 1..=config.epochs {
        let (b, c_positions) = nested_positions(dataset.len(), config.batch_size, &mut rng)?;
        let mut batch_rows = Vec::with_capacity(b.len() * p);
        for &i in &b {
            batch_rows.extend_from_slice(&all_rows[i * p..(i + 1) * p]);
        }
        let yb = dataset.y().select_rows(&b);
        let scale = if config.lr_decay { 1.0 / (epoch as f64).sqrt() } else { 1.0 };

        match epoch_step(&params, &batch_rows, p, &yb, &c_positions, config, scale) {
            Ok((next, loss)) => {
                history.push(EpochRecord::new(epoch, &loss));
                params = next;
            }
            Err(e) => {
                failed.push(FailedEpoch {
                    epoch,
                    error: e.to_string(),
                });
                if failed.len() > budget {
                    return Err(KflowError::TrainingAborted {
                        failures: failed.len(),
                        budget,
                    });
                }
            }
        }
    }

    if config.zero_clamp > 0.0 {
        for a in params.alpha_mut().iter_mut() {
            if a.abs() < config.zero_clamp {
                *a = 0.0;
            }
        }
    }

    Ok(TrainReport {
        nnz_alpha: params.nnz_alpha(),
        epochs_run: history.len(),
        loss_history: history,
        final_params: params,
        failed_epochs: failed,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Plain Kernel Flows (`λ₂ = 0`, no clamping).
pub fn train_regular(dataset: &DelayDataset, init: &KernelParams, config: &TrainConfig) -> Result<TrainReport> {
    train(dataset, init, &config.regular())
}

fn epoch_step(
    params: &KernelParams,
    batch_rows: &[f64],
    p: usize,
    yb: &nalgebra::DMatrix<f64>,
    c_positions: &[usize],
    config: &TrainConfig,
    scale: f64,
) -> Result<(KernelParams, LossBreakdown)> {
    let (mut loss, grad) = nested_loss_and_grad(params, batch_rows, p, yb, c_positions, config.lambda1, GradParts::Theta)?;
    loss.l1_penalty = config.lambda2 * params.l1_norm();
    loss.total = loss.rho + loss.l1_penalty;

    let mut next = params.clone();
    let step_theta = config.lr_theta * scale;
    for (t, g) in next.theta_mut().iter_mut().zip(&grad.theta) {
        *t -= step_theta * g;
    }
    project_theta(next.theta_mut());

    let (_, grad) = nested_loss_and_grad(&next, batch_rows, p, yb, c_positions, config.lambda1, GradParts::Alpha)?;
    let step_alpha = config.lr_alpha * scale;
    let threshold = step_alpha * config.lambda2;
    for (a, g) in next.alpha_mut().iter_mut().zip(&grad.alpha) {
        *a = soft_threshold(*a - step_alpha * g, threshold);
    }
    if !next.is_finite() {
        return Err(KflowError::InvalidArgument("parameter update produced non-finite values".into()));
    }
    Ok((next, loss))
}
