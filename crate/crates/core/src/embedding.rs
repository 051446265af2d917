//! Delay embedding of a multivariate time series into a regression dataset.

use nalgebra::DMatrix;

use crate::error::{KflowError, Result};

/// Observations `x_1 … x_n` of a `d`-dimensional state on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: DMatrix<f64>,
    dt: f64,
    name: String,
}

impl TimeSeries {
    pub fn new(values: DMatrix<f64>, dt: f64, name: impl Into<String>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(KflowError::Data(format!(
                "a time series needs at least 2 samples, got {}",
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(KflowError::Data("a time series needs at least one coordinate".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(KflowError::Data(format!("sampling step must be positive, got {dt}")));
        }
        if let Some((k, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(KflowError::Data(format!(
                "non-finite value at sample {}",
                k % values.nrows()
            )));
        }
        Ok(Self {
            values,
            dt,
            name: name.into(),
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Same grid and name, new values.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(values, self.dt, self.name.clone())
    }
}

/// Regression pairs `(X_k, Y_k)` with `X_k = (x_{k+τ−1}, …, x_k)` and `Y_k = x_{k+τ}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DelayDataset {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    tau: usize,
}

impl DelayDataset {
    /// Assembles a dataset from already-embedded rows.
    pub fn from_parts(x: DMatrix<f64>, y: DMatrix<f64>, tau: usize) -> Result<Self> {
        if tau == 0 {
            return Err(KflowError::InvalidArgument("tau must be positive".into()));
        }
        if x.nrows() != y.nrows() || x.ncols() != tau * y.ncols() {
            return Err(KflowError::DimensionMismatch(format!(
                "X is {}x{}, Y is {}x{}, tau = {tau}",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        Ok(Self { x, y, tau })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.y.ncols()
    }

    /// Number of pairs `N`.
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> DelayDataset {
        DelayDataset {
            x: self.x.select_rows(indices),
            y: self.y.select_rows(indices),
            tau: self.tau,
        }
    }

    /// Contiguous row range.
    pub fn slice(&self, range: std::ops::Range<usize>) -> DelayDataset {
        let idx: Vec<usize> = range.collect();
        self.select(&idx)
    }
}

/// Builds the delay-embedded dataset; `N = n − τ`.
pub fn build_delay_dataset(series: &TimeSeries, tau: usize) -> Result<DelayDataset> {
    let n = series.len();
    let d = series.dim();
    if tau == 0 {
        return Err(KflowError::InvalidArgument("tau must be positive".into()));
    }
    if tau >= n {
        return Err(KflowError::InvalidArgument(format!(
            "tau = {tau} must be smaller than the series length {n}"
        )));
    }
    let rows = n - tau;
    let v = series.values();
    // Window entries are newest-first: block b of row k holds x_{k+τ−1−b}.
    let x = DMatrix::from_fn(rows, tau * d, |k, c| v[(k + tau - 1 - c / d, c % d)]);
    let y = DMatrix::from_fn(rows, d, |k, c| v[(k + tau, c)]);
    Ok(DelayDataset { x, y, tau })
}

/// Contiguous temporal split: the first `⌊fraction·N⌋` rows train, the rest test.
pub fn split_train_test(dataset: &DelayDataset, train_fraction: f64) -> Result<(DelayDataset, DelayDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(KflowError::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = dataset.len();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(KflowError::InvalidArgument(format!(
            "split of {n} rows at fraction {train_fraction} leaves an empty side"
        )));
    }
    Ok((dataset.slice(0..n_train), dataset.slice(n_train..n)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_series(vals: &[f64]) -> TimeSeries {
        TimeSeries::new(DMatrix::from_column_slice(vals.len(), 1, vals), 1.0, "s").unwrap()
    }

    #[test]
    fn shapes_for_three_dimensional_series() {
        let s = TimeSeries::new(DMatrix::from_fn(7, 3, |i, j| (i * 3 + j) as f64), 0.1, "t").unwrap();
        let ds = build_delay_dataset(&s, 5).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.x().shape(), (2, 15));
        assert_eq!(ds.y().shape(), (2, 3));
    }

    #[test]
    fn minimal_case() {
        let ds = build_delay_dataset(&scalar_series(&[4.0, 9.0]), 1).unwrap();
        assert_eq!(ds.x(), &DMatrix::from_row_slice(1, 1, &[4.0]));
        assert_eq!(ds.y(), &DMatrix::from_row_slice(1, 1, &[9.0]));
    }

    #[test]
    fn hand_unrolled_windows() {
        let ds = build_delay_dataset(&scalar_series(&[1.0, 2.0, 3.0, 4.0]), 2).unwrap();
        assert_eq!(ds.x(), &DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 3.0, 2.0]));
        assert_eq!(ds.y(), &DMatrix::from_row_slice(2, 1, &[3.0, 4.0]));
    }

    #[test]
    fn invalid_tau() {
        let s = scalar_series(&[1.0, 2.0, 3.0]);
        assert!(build_delay_dataset(&s, 0).is_err());
        assert!(build_delay_dataset(&s, 3).is_err());
    }

    #[test]
    fn series_validation() {
        assert!(TimeSeries::new(DMatrix::zeros(1, 2), 1.0, "x").is_err());
        assert!(TimeSeries::new(DMatrix::zeros(3, 2), 0.0, "x").is_err());
        assert!(TimeSeries::new(DMatrix::from_element(3, 1, f64::NAN), 1.0, "x").is_err());
    }

    #[test]
    fn split_sizes() {
        let sizes = |n: usize, f: f64| {
            let vals: Vec<f64> = (0..n + 1).map(|v| v as f64).collect();
            let ds = build_delay_dataset(&scalar_series(&vals), 1).unwrap();
            split_train_test(&ds, f).map(|(a, b)| (a.len(), b.len()))
        };
        assert_eq!(sizes(10, 0.8).unwrap(), (8, 2));
        assert_eq!(sizes(3, 0.5).unwrap(), (1, 2));
        assert_eq!(sizes(10, 0.99).unwrap(), (9, 1));
        assert!(sizes(3, 0.2).is_err());
        assert!(sizes(3, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn layout_and_split_round_trip(
            n in 3usize..40,
            d in 1usize..4,
            tau in 1usize..6,
            frac in 0.05f64..0.95,
        ) {
            prop_assume!(tau < n);
            let s = TimeSeries::new(DMatrix::from_fn(n, d, |i, j| (i * 10 + j) as f64 * 0.5 - 3.0), 1.0, "p").unwrap();
            let ds = build_delay_dataset(&s, tau).unwrap();
            prop_assert_eq!(ds.len(), n - tau);
            for k in 0..ds.len() {
                // Last d entries of the window are the oldest state, x_k.
                for j in 0..d {
                    prop_assert_eq!(ds.x()[(k, (tau - 1) * d + j)], s.values()[(k, j)]);
                    prop_assert_eq!(ds.x()[(k, j)], s.values()[(k + tau - 1, j)]);
                }
            }
            if let Ok((train, test)) = split_train_test(&ds, frac) {
                let mut joined = Vec::new();
                for part in [&train, &test] {
                    for i in 0..part.len() {
                        joined.push(part.y().row(i).clone_owned());
                    }
                }
                prop_assert_eq!(joined.len(), n - tau);
                for (i, row) in joined.iter().enumerate() {
                    prop_assert_eq!(row, &s.values().row(tau + i).clone_owned());
                }
            }
        }
    }
}
