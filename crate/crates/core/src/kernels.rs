//! The 21-term kernel dictionary.
//!
//! The combined kernel is `k(x, y) = Σ_i α_i² k_i(x, y; θ)` where each elemental
//! `k_i` owns a fixed contiguous slice of the 34 intrinsic parameters `θ`.
//! With `r = ‖x − y‖₂`, `s = r²` and `⟨x, y⟩` the dot product:
//!
//! | id | elemental                                              | θ slots |
//! |----|--------------------------------------------------------|---------|
//! | 1  | `⟨x,y⟩ + θ1²`                                          | 1       |
//! | 2  | `(θ2²⟨x,y⟩ + θ3²)^|θ4|` (odd extension for a negative base and non-integer exponent) | 2..=4 |
//! | 3  | `exp(−s / 2θ5²)`                                       | 5       |
//! | 4  | `exp(−r / 2θ6²)`                                       | 6       |
//! | 5  | `exp(−sin²(πs/θ7)/θ8²) · exp(−s/θ9²)`                  | 7..=9   |
//! | 6  | `exp(−sin²(πs/θ10)/θ11²)`                              | 10, 11  |
//! | 7  | `exp(−sin²(πr/θ12)/θ13²) · exp(−r/θ14²)`               | 12..=14 |
//! | 8  | `exp(−sin²(πr/θ15)/θ16²)`                              | 15, 16  |
//! | 9  | `(s + θ17²)^½`                                         | 17      |
//! | 10 | `(θ18² + θ19² s)^−½`                                   | 18, 19  |
//! | 11 | `(θ20² + θ21² r)^−½`                                   | 20, 21  |
//! | 12 | `(θ22² + r)^θ23`                                       | 22, 23  |
//! | 13 | `(θ24² + s)^θ25`                                       | 24, 25  |
//! | 14 | `(1 + (r/θ26)²)^−1`                                    | 26      |
//! | 15 | `(1 + r/θ27²)^−1`                                      | 27      |
//! | 16 | `1 − s/(s + θ28²)`                                     | 28      |
//! | 17 | `max(0, 1 − s/θ29²)`                                   | 29      |
//! | 18 | `max(0, 1 − r/θ30²)`                                   | 30      |
//! | 19 | `log(r^θ31 + 1)`                                       | 31      |
//! | 20 | `tanh(θ32⟨x,y⟩ + θ33)`                                 | 32, 33  |
//! | 21 | `[acos(−z) − z√(1−z²)] · 1{s < θ34²}`, `z = r/θ34²`     | 34      |
//!
//! Elementals 5–9, 12, 13, 17, 19, 20 and 21 are not positive semi-definite in
//! general; the dictionary keeps them anyway and the ridge solver copes with
//! indefinite systems.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KflowError, Result};

pub const NUM_KERNELS: usize = 21;
pub const NUM_THETA: usize = 34;
pub const NUM_PARAMS: usize = NUM_KERNELS + NUM_THETA;

/// `(first θ slot, slot count)` for each elemental, zero-based.
const THETA_LAYOUT: [(usize, usize); NUM_KERNELS] = [
    (0, 1),
    (1, 3),
    (4, 1),
    (5, 1),
    (6, 3),
    (9, 2),
    (11, 3),
    (14, 2),
    (16, 1),
    (17, 2),
    (19, 2),
    (21, 2),
    (23, 2),
    (25, 1),
    (26, 1),
    (27, 1),
    (28, 1),
    (29, 1),
    (30, 1),
    (31, 2),
    (33, 1),
];

const KERNEL_NAMES: [&str; NUM_KERNELS] = [
    "linear",
    "polynomial",
    "gaussian",
    "laplacian",
    "periodic-sq-gaussian",
    "periodic-sq",
    "periodic-laplacian",
    "periodic",
    "multiquadric",
    "inverse-multiquadric",
    "inverse-multiquadric-l1",
    "power-l1",
    "power-l2",
    "cauchy",
    "cauchy-l1",
    "rational",
    "truncated-quadratic",
    "triangular",
    "log",
    "sigmoid",
    "circular",
];

/// One summand of the dictionary, numbered 1..=21.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ElementalKernelId(u8);

impl ElementalKernelId {
    pub fn new(index: usize) -> Result<Self> {
        if (1..=NUM_KERNELS).contains(&index) {
            Ok(Self(index as u8))
        } else {
            Err(KflowError::InvalidParameter(format!(
                "elemental kernel id {index} outside 1..={NUM_KERNELS}"
            )))
        }
    }

    /// One-based id.
    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub(crate) fn slot(self) -> usize {
        self.0 as usize - 1
    }

    pub fn all() -> impl Iterator<Item = ElementalKernelId> {
        (1..=NUM_KERNELS as u8).map(ElementalKernelId)
    }

    /// Zero-based θ positions owned by this elemental.
    pub fn theta_slots(self) -> std::ops::Range<usize> {
        let (start, len) = THETA_LAYOUT[self.slot()];
        start..start + len
    }

    pub fn name(self) -> &'static str {
        KERNEL_NAMES[self.slot()]
    }

    /// Elemental that owns zero-based θ slot `theta`.
    pub fn owner_of_theta(theta: usize) -> Option<Self> {
        THETA_OWNER.get(theta).map(|&k| Self(k as u8 + 1))
    }
}

impl fmt::Display for ElementalKernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "k{}", self.0)
    }
}

const THETA_OWNER: [usize; NUM_THETA] = {
    let mut owner = [0usize; NUM_THETA];
    let mut k = 0;
    while k < NUM_KERNELS {
        let (start, len) = THETA_LAYOUT[k];
        let mut j = 0;
        while j < len {
            owner[start + j] = k;
            j += 1;
        }
        k += 1;
    }
    owner
};

/// Addresses one trainable scalar: a weight root `α_i` or an intrinsic `θ_j`.
/// Both indices are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamIndex {
    Alpha(usize),
    Theta(usize),
}

impl ParamIndex {
    /// Position in the flat `[α (21) | θ (34)]` layout.
    pub fn flat(self) -> usize {
        match self {
            ParamIndex::Alpha(i) => i,
            ParamIndex::Theta(j) => NUM_KERNELS + j,
        }
    }

    pub fn from_flat(flat: usize) -> Result<Self> {
        let idx = if flat < NUM_KERNELS {
            ParamIndex::Alpha(flat)
        } else {
            ParamIndex::Theta(flat - NUM_KERNELS)
        };
        idx.validate()?;
        Ok(idx)
    }

    fn validate(self) -> Result<()> {
        match self {
            ParamIndex::Alpha(i) if i < NUM_KERNELS => Ok(()),
            ParamIndex::Theta(j) if j < NUM_THETA => Ok(()),
            other => Err(KflowError::InvalidParameter(format!("{other:?}"))),
        }
    }
}

/// Weight roots `α` (effective weight `α_i²`) and intrinsic parameters `θ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelParams", into = "RawKernelParams")]
pub struct KernelParams {
    alpha: [f64; NUM_KERNELS],
    theta: [f64; NUM_THETA],
}

#[derive(Serialize, Deserialize)]
struct RawKernelParams {
    alpha: Vec<f64>,
    theta: Vec<f64>,
}

impl TryFrom<RawKernelParams> for KernelParams {
    type Error = KflowError;

    fn try_from(raw: RawKernelParams) -> Result<Self> {
        KernelParams::new(&raw.alpha, &raw.theta)
    }
}

impl From<KernelParams> for RawKernelParams {
    fn from(p: KernelParams) -> Self {
        RawKernelParams {
            alpha: p.alpha.to_vec(),
            theta: p.theta.to_vec(),
        }
    }
}

impl KernelParams {
    pub fn new(alpha: &[f64], theta: &[f64]) -> Result<Self> {
        if alpha.len() != NUM_KERNELS || theta.len() != NUM_THETA {
            return Err(KflowError::DimensionMismatch(format!(
                "kernel params need {NUM_KERNELS} alphas and {NUM_THETA} thetas, got {} and {}",
                alpha.len(),
                theta.len()
            )));
        }
        if let Some(v) = alpha.iter().chain(theta).find(|v| !v.is_finite()) {
            return Err(KflowError::InvalidArgument(format!(
                "kernel parameters must be finite, found {v}"
            )));
        }
        let mut p = Self::zeros();
        p.alpha.copy_from_slice(alpha);
        p.theta.copy_from_slice(theta);
        Ok(p)
    }

    /// All weights zero, all θ equal to one.
    pub fn zeros() -> Self {
        Self {
            alpha: [0.0; NUM_KERNELS],
            theta: [1.0; NUM_THETA],
        }
    }

    /// A kernel with only `id` active (weight root 1) and the given θ.
    pub fn single(id: ElementalKernelId, theta: &[f64]) -> Result<Self> {
        let mut alpha = [0.0; NUM_KERNELS];
        alpha[id.slot()] = 1.0;
        Self::new(&alpha, theta)
    }

    /// Plain Gaussian `exp(−‖x−y‖²/2σ²)`.
    pub fn gaussian(sigma: f64) -> Self {
        let mut p = Self::zeros();
        p.alpha[2] = 1.0;
        p.theta[4] = sigma;
        p
    }

    pub fn alpha(&self) -> &[f64; NUM_KERNELS] {
        &self.alpha
    }

    pub fn theta(&self) -> &[f64; NUM_THETA] {
        &self.theta
    }

    pub fn alpha_mut(&mut self) -> &mut [f64; NUM_KERNELS] {
        &mut self.alpha
    }

    pub fn theta_mut(&mut self) -> &mut [f64; NUM_THETA] {
        &mut self.theta
    }

    pub fn effective_weights(&self) -> [f64; NUM_KERNELS] {
        self.alpha.map(|a| a * a)
    }

    pub fn active_mask(&self) -> [bool; NUM_KERNELS] {
        self.alpha.map(|a| a.abs() > 0.0)
    }

    pub fn nnz_alpha(&self) -> usize {
        self.alpha.iter().filter(|a| a.abs() > 0.0).count()
    }

    pub fn l1_norm(&self) -> f64 {
        self.alpha.iter().map(|a| a.abs()).sum()
    }

    pub fn get(&self, idx: ParamIndex) -> Result<f64> {
        idx.validate()?;
        Ok(match idx {
            ParamIndex::Alpha(i) => self.alpha[i],
            ParamIndex::Theta(j) => self.theta[j],
        })
    }

    pub fn set(&mut self, idx: ParamIndex, value: f64) -> Result<()> {
        idx.validate()?;
        match idx {
            ParamIndex::Alpha(i) => self.alpha[i] = value,
            ParamIndex::Theta(j) => self.theta[j] = value,
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.theta).all(|v| v.is_finite())
    }

    fn active_kernels(&self) -> Vec<usize> {
        (0..NUM_KERNELS).filter(|&k| self.alpha[k] != 0.0).collect()
    }
}

/// Pairwise quantities shared by all elementals.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairGeometry {
    dot: f64,
    sq: f64,
    dist: f64,
}

impl PairGeometry {
    #[inline]
    pub(crate) fn new(x: &[f64], y: &[f64]) -> Self {
        let mut dot = 0.0;
        let mut sq = 0.0;
        for (a, b) in x.iter().zip(y) {
            dot += a * b;
            let d = a - b;
            sq += d * d;
        }
        Self {
            dot,
            sq,
            dist: sq.sqrt(),
        }
    }
}

/// Evaluates elemental `k` (zero-based). When `dtheta` is given, the partial
/// derivatives with respect to the owned θ slots are written into it.
#[inline]
fn elemental_raw(k: usize, g: &PairGeometry, t: &[f64; NUM_THETA], dtheta: Option<&mut [f64; NUM_THETA]>) -> f64 {
    let (s, r, dot) = (g.sq, g.dist, g.dot);
    let mut dummy = [0.0; NUM_THETA];
    let want = dtheta.is_some();
    let d = dtheta.unwrap_or(&mut dummy);
    match k {
        0 => {
            if want {
                d[0] = 2.0 * t[0];
            }
            dot + t[0] * t[0]
        }
        1 => {
            let b = t[1] * t[1] * dot + t[2] * t[2];
            let e = t[3].abs();
            // Integer exponents give the true polynomial; other exponents of a
            // negative base use the odd extension.
            let v = if b >= 0.0 || e.fract() == 0.0 {
                b.powf(e)
            } else {
                -(-b).powf(e)
            };
            if want {
                let db = if b != 0.0 {
                    e * v / b
                } else if e == 1.0 {
                    1.0
                } else {
                    0.0
                };
                d[1] = db * 2.0 * t[1] * dot;
                d[2] = db * 2.0 * t[2];
                d[3] = if b != 0.0 && t[3] != 0.0 {
                    v * b.abs().ln() * t[3].signum()
                } else {
                    0.0
                };
            }
            v
        }
        2 => {
            let v = (-s / (2.0 * t[4] * t[4])).exp();
            if want {
                d[4] = v * s / t[4].powi(3);
            }
            v
        }
        3 => {
            let v = (-r / (2.0 * t[5] * t[5])).exp();
            if want {
                d[5] = v * r / t[5].powi(3);
            }
            v
        }
        4 => periodic(s, t, 6, Some(8), want, d),
        5 => periodic(s, t, 9, None, want, d),
        6 => periodic(r, t, 11, Some(13), want, d),
        7 => periodic(r, t, 14, None, want, d),
        8 => {
            let v = (s + t[16] * t[16]).sqrt();
            if want {
                d[16] = if v > 0.0 { t[16] / v } else { 0.0 };
            }
            v
        }
        9 => inverse_multiquadric(s, t, 17, want, d),
        10 => inverse_multiquadric(r, t, 19, want, d),
        11 => shifted_power(r, t, 21, want, d),
        12 => shifted_power(s, t, 23, want, d),
        13 => {
            let g = 1.0 + s / (t[25] * t[25]);
            if want {
                d[25] = 2.0 * s / (t[25].powi(3) * g * g);
            }
            1.0 / g
        }
        14 => {
            let g = 1.0 + r / (t[26] * t[26]);
            if want {
                d[26] = 2.0 * r / (t[26].powi(3) * g * g);
            }
            1.0 / g
        }
        15 => {
            let den = s + t[27] * t[27];
            if want {
                d[27] = 2.0 * t[27] * s / (den * den);
            }
            1.0 - s / den
        }
        16 => truncated(s, t, 28, want, d),
        17 => truncated(r, t, 29, want, d),
        18 => {
            let p = r.powf(t[30]);
            if want {
                d[30] = if r > 0.0 { p * r.ln() / (p + 1.0) } else { 0.0 };
            }
            p.ln_1p()
        }
        19 => {
            let v = (t[31] * dot + t[32]).tanh();
            if want {
                let sech2 = 1.0 - v * v;
                d[31] = sech2 * dot;
                d[32] = sech2;
            }
            v
        }
        20 => {
            let h = t[33] * t[33];
            let z = r / h;
            // Support is the indicator set intersected with the arccos domain.
            let inside = s < h && z < 1.0;
            if !inside {
                if want {
                    d[33] = 0.0;
                }
                return 0.0;
            }
            let root = (1.0 - z * z).sqrt();
            if want {
                d[33] = 2.0 * z * z / root * (-2.0 * r / t[33].powi(3));
            }
            (-z).acos() - z * root
        }
        _ => unreachable!("elemental index out of range"),
    }
}

/// `exp(−sin²(π u/θp)/θa²) [· exp(−u/θd²)]` with period slot `p` and
/// amplitude slot `p + 1`.
#[inline]
fn periodic(u: f64, t: &[f64; NUM_THETA], p: usize, decay: Option<usize>, want: bool, d: &mut [f64; NUM_THETA]) -> f64 {
    let a = p + 1;
    let arg = PI * u / t[p];
    let sn = arg.sin();
    let mut expo = -sn * sn / (t[a] * t[a]);
    if let Some(q) = decay {
        expo -= u / (t[q] * t[q]);
    }
    let v = expo.exp();
    if want {
        d[p] = v * (2.0 * arg).sin() * PI * u / (t[p] * t[p] * t[a] * t[a]);
        d[a] = v * 2.0 * sn * sn / t[a].powi(3);
        if let Some(q) = decay {
            d[q] = v * 2.0 * u / t[q].powi(3);
        }
    }
    v
}

/// `(θc² + θs² u)^−½` with slots `c`, `c + 1`.
#[inline]
fn inverse_multiquadric(u: f64, t: &[f64; NUM_THETA], c: usize, want: bool, d: &mut [f64; NUM_THETA]) -> f64 {
    let q = t[c] * t[c] + t[c + 1] * t[c + 1] * u;
    let v = 1.0 / q.sqrt();
    if want {
        let v3 = v * v * v;
        d[c] = -t[c] * v3;
        d[c + 1] = -t[c + 1] * u * v3;
    }
    v
}

/// `(θc² + u)^θe` with slots `c`, `c + 1`.
#[inline]
fn shifted_power(u: f64, t: &[f64; NUM_THETA], c: usize, want: bool, d: &mut [f64; NUM_THETA]) -> f64 {
    let b = t[c] * t[c] + u;
    let e = t[c + 1];
    let v = b.powf(e);
    if want {
        d[c] = e * b.powf(e - 1.0) * 2.0 * t[c];
        d[c + 1] = if b > 0.0 { v * b.ln() } else { 0.0 };
    }
    v
}

/// `max(0, 1 − u/θ²)`; derivative is zero on and outside the boundary.
#[inline]
fn truncated(u: f64, t: &[f64; NUM_THETA], c: usize, want: bool, d: &mut [f64; NUM_THETA]) -> f64 {
    let z = 1.0 - u / (t[c] * t[c]);
    if want {
        d[c] = if z > 0.0 { 2.0 * u / t[c].powi(3) } else { 0.0 };
    }
    z.max(0.0)
}

/// Picks the θ slot most likely responsible for a non-finite result: the first
/// owned slot that is zero (or negative for the log exponent), else the first slot.
fn non_finite_error(k: usize, t: &[f64; NUM_THETA]) -> KflowError {
    let (start, len) = THETA_LAYOUT[k];
    let culprit = (start..start + len)
        .find(|&j| t[j] == 0.0 || (j == 30 && t[j] < 0.0))
        .unwrap_or(start);
    KflowError::NonFiniteKernel {
        kernel: k + 1,
        theta_index: culprit + 1,
        theta_value: t[culprit],
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(KflowError::DimensionMismatch(format!(
            "kernel arguments have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

fn check_theta(theta: &[f64]) -> Result<&[f64; NUM_THETA]> {
    theta.try_into().map_err(|_| {
        KflowError::DimensionMismatch(format!("theta must have {NUM_THETA} entries, got {}", theta.len()))
    })
}

/// Evaluates one elemental kernel at `(x, y)`.
pub fn eval_elemental(id: ElementalKernelId, x: &[f64], y: &[f64], theta: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    let t = check_theta(theta)?;
    let v = elemental_raw(id.slot(), &PairGeometry::new(x, y), t, None);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(non_finite_error(id.slot(), t))
    }
}

/// Evaluates the weighted combination; zero-weight elementals are never evaluated.
pub fn eval_combined(params: &KernelParams, x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    PairEvaluator::new(params).value(&PairGeometry::new(x, y))
}

/// Per-parameter-set evaluation state reused across many pairs.
pub(crate) struct PairEvaluator<'a> {
    params: &'a KernelParams,
    active: Vec<usize>,
}

/// Which partial derivatives to accumulate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum GradParts {
    Alpha,
    Theta,
    All,
}

impl GradParts {
    fn alpha(self) -> bool {
        matches!(self, GradParts::Alpha | GradParts::All)
    }

    fn theta(self) -> bool {
        matches!(self, GradParts::Theta | GradParts::All)
    }
}

impl<'a> PairEvaluator<'a> {
    pub(crate) fn new(params: &'a KernelParams) -> Self {
        Self {
            params,
            active: params.active_kernels(),
        }
    }

    #[inline]
    pub(crate) fn value(&self, g: &PairGeometry) -> Result<f64> {
        let t = &self.params.theta;
        let mut sum = 0.0;
        for &k in &self.active {
            let v = elemental_raw(k, g, t, None);
            if !v.is_finite() {
                return Err(non_finite_error(k, t));
            }
            let a = self.params.alpha[k];
            sum += a * a * v;
        }
        Ok(sum)
    }

    /// Adds `weight · ∂K(x, y)/∂p` for every parameter `p` into `acc`
    /// (flat `[α | θ]` layout).
    #[inline]
    pub(crate) fn accumulate_gradient(
        &self,
        g: &PairGeometry,
        weight: f64,
        parts: GradParts,
        acc: &mut [f64; NUM_PARAMS],
    ) -> Result<()> {
        let t = &self.params.theta;
        let mut dt = [0.0; NUM_THETA];
        for &k in &self.active {
            let a = self.params.alpha[k];
            let v = if parts.theta() {
                elemental_raw(k, g, t, Some(&mut dt))
            } else {
                elemental_raw(k, g, t, None)
            };
            if !v.is_finite() {
                return Err(non_finite_error(k, t));
            }
            if parts.alpha() {
                acc[k] += weight * 2.0 * a * v;
            }
            if parts.theta() {
                let w2 = weight * a * a;
                for j in self.params_slots(k) {
                    if !dt[j].is_finite() {
                        return Err(non_finite_error(k, t));
                    }
                    acc[NUM_KERNELS + j] += w2 * dt[j];
                }
            }
        }
        Ok(())
    }

    fn params_slots(&self, k: usize) -> std::ops::Range<usize> {
        let (start, len) = THETA_LAYOUT[k];
        start..start + len
    }
}

/// Row-major copy of a matrix, one contiguous slice per point.
pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = m.shape();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        out.extend(m.row(i).iter());
    }
    out
}

/// Gram matrix `K[i][j] = k(X_i, X_j)`; the upper triangle is computed and mirrored.
pub fn gram(params: &KernelParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if n == 0 {
        return Err(KflowError::InvalidArgument("gram needs at least one point".into()));
    }
    gram_from_rows(params, &rows_of(x), x.ncols())
}

pub(crate) fn gram_from_rows(params: &KernelParams, rows: &[f64], p: usize) -> Result<DMatrix<f64>> {
    let n = if p == 0 { 0 } else { rows.len() / p };
    let eval = PairEvaluator::new(params);
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &rows[i * p..(i + 1) * p];
            (i..n)
                .map(|j| eval.value(&PairGeometry::new(xi, &rows[j * p..(j + 1) * p])))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + off;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Rectangular evaluation `C[i][j] = k(A_i, B_j)`.
pub fn cross_gram(params: &KernelParams, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(KflowError::DimensionMismatch(format!(
            "cross_gram inputs have {} and {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    let p = a.ncols();
    let (ra, rb) = (rows_of(a), rows_of(b));
    let (m, n) = (a.nrows(), b.nrows());
    let eval = PairEvaluator::new(params);
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let ai = &ra[i * p..(i + 1) * p];
            (0..n)
                .map(|j| eval.value(&PairGeometry::new(ai, &rb[j * p..(j + 1) * p])))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
}

/// Entrywise partial derivative `∂K[i][j]/∂p` of the Gram matrix.
pub fn gram_param_gradients(params: &KernelParams, x: &DMatrix<f64>, wrt: ParamIndex) -> Result<DMatrix<f64>> {
    wrt.validate()?;
    let n = x.nrows();
    let p = x.ncols();
    let rows = rows_of(x);
    let t = params.theta();
    let (kernel, theta_slot) = match wrt {
        ParamIndex::Alpha(i) => (i, None),
        ParamIndex::Theta(j) => (THETA_OWNER[j], Some(j)),
    };
    let a = params.alpha[kernel];
    let mut out = DMatrix::zeros(n, n);
    if a == 0.0 {
        return Ok(out);
    }
    let mut dt = [0.0; NUM_THETA];
    for i in 0..n {
        for j in i..n {
            let g = PairGeometry::new(&rows[i * p..(i + 1) * p], &rows[j * p..(j + 1) * p]);
            let v = elemental_raw(kernel, &g, t, Some(&mut dt));
            let d = match theta_slot {
                None => 2.0 * a * v,
                Some(slot) => a * a * dt[slot],
            };
            if !v.is_finite() || !d.is_finite() {
                return Err(non_finite_error(kernel, t));
            }
            out[(i, j)] = d;
            out[(j, i)] = d;
        }
    }
    Ok(out)
}

/// `Σ_ij W[i][j] ∂K[i][j]/∂p` for every parameter, for a symmetric weight matrix `w`.
///
/// Row partial sums are computed in parallel and reduced in row order, so the
/// result does not depend on the thread count.
pub(crate) fn weighted_gram_gradient(
    params: &KernelParams,
    rows: &[f64],
    p: usize,
    w: &DMatrix<f64>,
    parts: GradParts,
) -> Result<[f64; NUM_PARAMS]> {
    let n = w.nrows();
    let eval = PairEvaluator::new(params);
    let partials: Vec<[f64; NUM_PARAMS]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = [0.0; NUM_PARAMS];
            let xi = &rows[i * p..(i + 1) * p];
            for j in i..n {
                let wij = if i == j { w[(i, i)] } else { 2.0 * w[(i, j)] };
                if wij == 0.0 {
                    continue;
                }
                let g = PairGeometry::new(xi, &rows[j * p..(j + 1) * p]);
                eval.accumulate_gradient(&g, wij, parts, &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = [0.0; NUM_PARAMS];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    Ok(total)
}
