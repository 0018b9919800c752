//! Short-term covariance of centered asset prices.
//!
//! The estimate feeds the per-period risk constraint. The recipe is:
//!
//! 1. center prices against their trailing `M`-period rolling mean,
//! 2. run an iterated EWMA (per-asset volatility EWMA of squared centered
//!    prices, then a correlation EWMA of the standardized outer products),
//! 3. smooth the reconstructed covariance with a long half-life EWMA to
//!    reduce risk-model-induced trading,
//! 4. map to arb space via `S' Σ S` and factorize for the cone constraint.
//!
//! All EWMAs here use finite-sample-corrected weights: the weight on the
//! i-th most recent observation is `λ^i` normalized so the weights sum to
//! one. The estimate after a single observation is that observation.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative floor applied to per-asset volatilities before standardizing.
const VOL_FLOOR_FRACTION: f64 = 1e-6;

/// Values that can serve as the running estimate of an EWMA.
pub trait EwmaValue: Clone {
    /// `self += (target - self) * w`
    fn blend_toward(&mut self, target: &Self, w: f64);
}

impl EwmaValue for f64 {
    fn blend_toward(&mut self, target: &Self, w: f64) {
        *self += (target - *self) * w;
    }
}

impl EwmaValue for DVector<f64> {
    fn blend_toward(&mut self, target: &Self, w: f64) {
        self.zip_apply(target, |v, t| *v += (t - *v) * w);
    }
}

impl EwmaValue for DMatrix<f64> {
    fn blend_toward(&mut self, target: &Self, w: f64) {
        self.zip_apply(target, |v, t| *v += (t - *v) * w);
    }
}

/// Finite-sample-corrected EWMA over scalars, vectors, or matrices.
#[derive(Debug, Clone)]
pub struct EwmaState<T> {
    half_life: f64,
    lambda: f64,
    weight_sum: f64,
    count: usize,
    value: Option<T>,
}

impl<T: EwmaValue> EwmaState<T> {
    pub fn new(half_life: f64) -> Result<Self> {
        if !(half_life > 0.0) {
            return Err(Error::Validation(format!(
                "EWMA half-life must be positive, got {half_life}"
            )));
        }
        Ok(Self {
            half_life,
            lambda: 2f64.powf(-1.0 / half_life),
            weight_sum: 0.0,
            count: 0,
            value: None,
        })
    }

    pub fn half_life(&self) -> f64 {
        self.half_life
    }

    /// Decay factor `λ = 2^(-1/half_life)`.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of observations absorbed.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn value(&self) -> Option<&T> {
        self.value.as_ref()
    }

    /// Absorb one observation and return the updated estimate.
    ///
    /// With normalized weights the recursion is
    /// `W_m = 1 + λ W_{m-1}`, `v_m = v_{m-1} + (x_m - v_{m-1}) / W_m`,
    /// which makes the first estimate the first observation itself.
    pub fn update(&mut self, x: &T) -> &T {
        self.weight_sum = 1.0 + self.lambda * self.weight_sum;
        self.count += 1;
        match self.value.as_mut() {
            None => self.value = Some(x.clone()),
            Some(v) => v.blend_toward(x, 1.0 / self.weight_sum),
        }
        self.value.as_ref().expect("value set above")
    }
}

/// Center the latest price vector against the trailing `window`-period mean.
///
/// The mean includes the latest observation, matching the midpoint
/// convention used for arb prices. `prices` must hold at least `window`
/// vectors; only the trailing `window` are used.
pub fn center_prices(prices: &[DVector<f64>], window: usize) -> Result<DVector<f64>> {
    if window == 0 {
        return Err(Error::Validation("centering window must be positive".into()));
    }
    if prices.len() < window {
        return Err(Error::InsufficientHistory {
            needed: window,
            available: prices.len(),
        });
    }
    let tail = &prices[prices.len() - window..];
    let n = tail[0].len();
    for v in tail {
        if v.len() != n {
            return Err(Error::Dimension(format!(
                "price vectors of mixed length {} vs {n}",
                v.len()
            )));
        }
    }
    let mut mean = DVector::zeros(n);
    for v in tail {
        mean += v;
    }
    mean /= window as f64;
    Ok(tail[window - 1].clone() - mean)
}

/// Iterated-EWMA covariance estimator over centered prices.
#[derive(Debug, Clone)]
pub struct IewmaState {
    vol: EwmaState<DVector<f64>>,
    corr: EwmaState<DMatrix<f64>>,
    window: VecDeque<DVector<f64>>,
    window_len: usize,
    n_assets: usize,
}

impl IewmaState {
    pub fn new(
        n_assets: usize,
        window: usize,
        vol_half_life: f64,
        corr_half_life: f64,
    ) -> Result<Self> {
        if n_assets == 0 || window == 0 {
            return Err(Error::Validation(
                "IEWMA needs at least one asset and a positive window".into(),
            ));
        }
        Ok(Self {
            vol: EwmaState::new(vol_half_life)?,
            corr: EwmaState::new(corr_half_life)?,
            window: VecDeque::with_capacity(window + 1),
            window_len: window,
            n_assets,
        })
    }

    /// True once enough prices have been absorbed to emit a covariance.
    pub fn warmed_up(&self) -> bool {
        self.window.len() >= self.window_len
    }

    pub fn observations(&self) -> usize {
        self.corr.count()
    }

    /// Absorb a price vector during warm-up without emitting an estimate.
    pub fn absorb(&mut self, prices: &DVector<f64>) -> Result<()> {
        self.push(prices)
    }

    /// Absorb a price vector and emit the covariance estimate `Σ^P = D R D`.
    ///
    /// Errors with insufficient history until the centering window is full.
    pub fn update(&mut self, prices: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.push(prices)?;
        if !self.warmed_up() {
            return Err(Error::InsufficientHistory {
                needed: self.window_len,
                available: self.window.len(),
            });
        }

        let window: Vec<DVector<f64>> = self.window.iter().cloned().collect();
        let centered = center_prices(&window, self.window_len)?;

        // Volatility leg: EWMA of squared centered prices.
        let squared = centered.map(|x| x * x);
        let vol_est = self.vol.update(&squared).clone();

        // Floor vols at a fraction of the asset's median window price so
        // zero-variance stretches do not blow up the standardization.
        let vols = DVector::from_fn(self.n_assets, |i, _| {
            let floor = VOL_FLOOR_FRACTION * median_window_price(&self.window, i);
            vol_est[i].max(0.0).sqrt().max(floor)
        });

        // Correlation leg: EWMA of outer products of standardized prices,
        // rescaled to a unit diagonal.
        let standardized = DVector::from_fn(self.n_assets, |i, _| centered[i] / vols[i]);
        let outer = &standardized * standardized.transpose();
        let raw_corr = self.corr.update(&outer).clone();
        let corr = enforce_unit_diagonal(&raw_corr);

        let mut sigma = DMatrix::from_fn(self.n_assets, self.n_assets, |i, j| {
            vols[i] * corr[(i, j)] * vols[j]
        });
        symmetrize(&mut sigma);
        Ok(sigma)
    }

    fn push(&mut self, prices: &DVector<f64>) -> Result<()> {
        if prices.len() != self.n_assets {
            return Err(Error::Dimension(format!(
                "expected {} assets, got {}",
                self.n_assets,
                prices.len()
            )));
        }
        self.window.push_back(prices.clone());
        while self.window.len() > self.window_len {
            self.window.pop_front();
        }
        Ok(())
    }
}

fn median_window_price(window: &VecDeque<DVector<f64>>, asset: usize) -> f64 {
    let mut values: Vec<f64> = window.iter().map(|v| v[asset]).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn enforce_unit_diagonal(raw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = raw.nrows();
    let scale = DVector::from_fn(n, |i, _| {
        let d = raw[(i, i)];
        if d > 0.0 {
            1.0 / d.sqrt()
        } else {
            0.0
        }
    });
    let mut corr = DMatrix::from_fn(n, n, |i, j| scale[i] * raw[(i, j)] * scale[j]);
    for i in 0..n {
        corr[(i, i)] = 1.0;
    }
    corr
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Long half-life EWMA over covariance matrices with a PSD guard.
#[derive(Debug, Clone)]
pub struct CovarianceSmoother {
    state: EwmaState<DMatrix<f64>>,
    dim: Option<usize>,
}

impl CovarianceSmoother {
    pub fn new(half_life: f64) -> Result<Self> {
        Ok(Self {
            state: EwmaState::new(half_life)?,
            dim: None,
        })
    }

    pub fn count(&self) -> usize {
        self.state.count()
    }

    /// Absorb a raw covariance and return the smoothed, PSD-clipped estimate.
    pub fn smooth(&mut self, raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if raw.nrows() != raw.ncols() {
            return Err(Error::Dimension(format!(
                "covariance must be square, got {}x{}",
                raw.nrows(),
                raw.ncols()
            )));
        }
        match self.dim {
            None => self.dim = Some(raw.nrows()),
            Some(d) if d != raw.nrows() => {
                return Err(Error::Dimension(format!(
                    "covariance dimension changed mid-stream: {d} -> {}",
                    raw.nrows()
                )));
            }
            Some(_) => {}
        }
        check_symmetric(raw)?;
        let mut smoothed = self.state.update(raw).clone();
        symmetrize(&mut smoothed);
        Ok(clip_psd(&smoothed))
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-8 * scale {
                return Err(Error::Validation(format!(
                    "matrix asymmetric beyond tolerance at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Clip negative eigenvalues to zero, returning the nearest PSD matrix in
/// the eigenbasis. Cheap Cholesky fast path when already positive definite.
pub fn clip_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.clone().cholesky().is_some() {
        return m.clone();
    }
    let eig = m.clone().symmetric_eigen();
    let clipped = eig.eigenvalues.map(|x| x.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    out
}

/// Map an asset-space covariance into arb space: `S' Σ^P S`.
pub fn arb_covariance(stacking: &DMatrix<f64>, sigma_assets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma_assets.nrows() != sigma_assets.ncols() {
        return Err(Error::Dimension("asset covariance must be square".into()));
    }
    if stacking.nrows() != sigma_assets.nrows() {
        return Err(Error::Dimension(format!(
            "stacking has {} rows but covariance is {}x{}",
            stacking.nrows(),
            sigma_assets.nrows(),
            sigma_assets.ncols()
        )));
    }
    let mut out = stacking.transpose() * sigma_assets * stacking;
    symmetrize(&mut out);
    Ok(out)
}

/// Factor a symmetric PSD matrix as `R' R = Σ` via its eigendecomposition.
///
/// Eigenvalues in a small negative band are clipped to zero; asymmetry
/// beyond tolerance is rejected.
pub fn factorize(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if sigma.nrows() != sigma.ncols() {
        return Err(Error::Dimension("factorize needs a square matrix".into()));
    }
    if sigma.is_empty() {
        return Ok(sigma.clone());
    }
    check_symmetric(sigma)?;
    let mut sym = sigma.clone();
    symmetrize(&mut sym);
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    Ok(DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}
