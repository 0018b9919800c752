//! Performance statistics over return and NAV series.
//!
//! Conventions:
//! - 250 trading periods per year; returns annualize by 250, volatilities
//!   by sqrt(250).
//! - Volatility is the population standard deviation (1/T), not 1/(T-1).
//! - The market regression `r_t = beta * r_m_t + theta_t` carries no
//!   intercept; the portfolio alpha is the annualized mean residual and the
//!   information ratio divides it by the annualized residual risk.

use chrono::{Datelike, NaiveDate};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::covariance::EwmaState;
use crate::error::{Error, Result};

/// Trading periods per year used for every annualization.
pub const PERIODS_PER_YEAR: f64 = 250.0;

/// Number of leading EWMA-correlation values suppressed as warm-up.
const CORRELATION_WARMUP: usize = 5;

/// Per-period simple returns aligned with trading dates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl ReturnSeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::Dimension(format!(
                "{} dates vs {} returns",
                dates.len(),
                values.len()
            )));
        }
        for (d, v) in dates.iter().zip(&values) {
            if !v.is_finite() || *v <= -1.0 {
                return Err(Error::Validation(format!(
                    "return {v} on {d} is out of range (must be finite and > -1)"
                )));
            }
        }
        Ok(Self { dates, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_aligned(&self, other: &ReturnSeries) -> Result<()> {
        if self.dates != other.dates {
            return Err(Error::Dimension(
                "return series are not aligned on the same dates".into(),
            ));
        }
        Ok(())
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Annualized mean return: `250 * mean(r)`.
pub fn annualized_return(returns: &ReturnSeries) -> Result<f64> {
    if returns.is_empty() {
        return Err(Error::Validation("empty return series".into()));
    }
    Ok(PERIODS_PER_YEAR * mean(&returns.values))
}

/// Annualized volatility: `sqrt(250)` times the population stddev.
pub fn annualized_vol(returns: &ReturnSeries) -> Result<f64> {
    if returns.len() < 2 {
        return Err(Error::Validation(
            "volatility needs at least two returns".into(),
        ));
    }
    Ok(PERIODS_PER_YEAR.sqrt() * population_std(&returns.values))
}

/// Maximum fractional drop from a previous high, streaming in O(T).
pub fn max_drawdown(nav: &[f64]) -> Result<f64> {
    if nav.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Validation("NAV must be strictly positive".into()));
    }
    if nav.len() < 2 {
        return Ok(0.0);
    }
    let mut high = nav[0];
    let mut worst = 0.0f64;
    for &v in &nav[1..] {
        high = high.max(v);
        worst = worst.max(1.0 - v / high);
    }
    Ok(worst)
}

/// One-period turnover: half the traded USD value over the NAV.
pub fn turnover(
    h_new: &DVector<f64>,
    h_old: &DVector<f64>,
    prices: &DVector<f64>,
    nav: f64,
) -> Result<f64> {
    if h_new.len() != h_old.len() || h_new.len() != prices.len() {
        return Err(Error::Dimension("turnover inputs differ in length".into()));
    }
    if !(nav > 0.0) {
        return Err(Error::Validation(format!("NAV must be positive, got {nav}")));
    }
    let traded: f64 = (0..h_new.len())
        .map(|i| (prices[i] * (h_new[i] - h_old[i])).abs())
        .sum();
    Ok(0.5 * traded / nav)
}

/// No-intercept least squares of portfolio returns on market returns.
#[derive(Debug, Clone)]
pub struct MarketRegression {
    pub beta: f64,
    pub residuals: Vec<f64>,
}

pub fn regress_market(returns: &ReturnSeries, market: &ReturnSeries) -> Result<MarketRegression> {
    returns.check_aligned(market)?;
    if returns.len() < 2 {
        return Err(Error::Validation("regression needs T >= 2".into()));
    }
    let denom: f64 = market.values.iter().map(|m| m * m).sum();
    if denom <= 0.0 {
        return Err(Error::Validation(
            "market series has zero variance around zero".into(),
        ));
    }
    let num: f64 = returns
        .values
        .iter()
        .zip(&market.values)
        .map(|(r, m)| r * m)
        .sum();
    let beta = num / denom;
    let residuals = returns
        .values
        .iter()
        .zip(&market.values)
        .map(|(r, m)| r - beta * m)
        .collect();
    Ok(MarketRegression { beta, residuals })
}

/// Annualized mean and stddev of `r - r_m`.
pub fn active_stats(returns: &ReturnSeries, market: &ReturnSeries) -> Result<(f64, f64)> {
    returns.check_aligned(market)?;
    if returns.is_empty() {
        return Err(Error::Validation("empty return series".into()));
    }
    let active: Vec<f64> = returns
        .values
        .iter()
        .zip(&market.values)
        .map(|(r, m)| r - m)
        .collect();
    Ok((
        PERIODS_PER_YEAR * mean(&active),
        PERIODS_PER_YEAR.sqrt() * population_std(&active),
    ))
}

/// Per-date EWMA correlation between two return series.
///
/// Means and second moments are EWMA estimates at the given half-life; the
/// first few dates are suppressed as warm-up. Output pairs are
/// (date, correlation) with values clamped to [-1, 1].
pub fn ewma_correlation(
    returns: &ReturnSeries,
    market: &ReturnSeries,
    half_life: f64,
) -> Result<Vec<(NaiveDate, f64)>> {
    returns.check_aligned(market)?;
    let mut mean_a = EwmaState::<f64>::new(half_life)?;
    let mut mean_b = EwmaState::<f64>::new(half_life)?;
    let mut sq_a = EwmaState::<f64>::new(half_life)?;
    let mut sq_b = EwmaState::<f64>::new(half_life)?;
    let mut cross = EwmaState::<f64>::new(half_life)?;
    let mut out = Vec::new();
    for (i, (&a, &b)) in returns.values.iter().zip(&market.values).enumerate() {
        let ma = *mean_a.update(&a);
        let mb = *mean_b.update(&b);
        let saa = *sq_a.update(&(a * a));
        let sbb = *sq_b.update(&(b * b));
        let sab = *cross.update(&(a * b));
        if i < CORRELATION_WARMUP {
            continue;
        }
        let var_a = (saa - ma * ma).max(0.0);
        let var_b = (sbb - mb * mb).max(0.0);
        let cov = sab - ma * mb;
        let denom = (var_a * var_b).sqrt();
        let corr = if denom > 0.0 {
            (cov / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        };
        out.push((returns.dates[i], corr));
    }
    Ok(out)
}

/// Daily-rebalanced convex combination `w * r_a + (1 - w) * r_b`.
pub fn blend(a: &ReturnSeries, b: &ReturnSeries, weight: f64) -> Result<ReturnSeries> {
    a.check_aligned(b)?;
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::Validation(format!(
            "blend weight must be in [0, 1], got {weight}"
        )));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| weight * x + (1.0 - weight) * y)
        .collect();
    ReturnSeries::new(a.dates.clone(), values)
}

/// Scale a market series with zero-return cash so its annualized volatility
/// matches `target_vol`. Returns the diluted series and the market weight.
pub fn dilute_to_vol(market: &ReturnSeries, target_vol: f64) -> Result<(ReturnSeries, f64)> {
    let vol = annualized_vol(market)?;
    if vol <= 0.0 {
        return Err(Error::Validation(
            "cannot dilute a zero-volatility market series".into(),
        ));
    }
    let weight = target_vol / vol;
    let values = market.values.iter().map(|v| weight * v).collect();
    Ok((ReturnSeries::new(market.dates.clone(), values)?, weight))
}

/// Summary statistics for one strategy, optionally against a market series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub ann_return: f64,
    pub ann_vol: f64,
    pub sharpe: Option<f64>,
    pub max_drawdown: f64,
    pub ann_turnover: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketComparison>,
}

/// The market-relative block of the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketComparison {
    pub active_return: f64,
    pub active_risk: f64,
    pub residual_return: f64,
    pub residual_risk: f64,
    pub beta: f64,
    pub information_ratio: Option<f64>,
}

pub fn market_comparison(returns: &ReturnSeries, market: &ReturnSeries) -> Result<MarketComparison> {
    let (active_return, active_risk) = active_stats(returns, market)?;
    let reg = regress_market(returns, market)?;
    let residual_return = PERIODS_PER_YEAR * mean(&reg.residuals);
    let residual_risk = PERIODS_PER_YEAR.sqrt() * population_std(&reg.residuals);
    let information_ratio = if residual_risk > 0.0 {
        Some(residual_return / residual_risk)
    } else {
        None
    };
    Ok(MarketComparison {
        active_return,
        active_risk,
        residual_return,
        residual_risk,
        beta: reg.beta,
        information_ratio,
    })
}

/// Assemble the full report from a return series, its NAV path, optional
/// per-period turnovers, and an optional aligned market series.
pub fn performance_report(
    returns: &ReturnSeries,
    nav: &[f64],
    per_period_turnover: Option<&[f64]>,
    market: Option<&ReturnSeries>,
) -> Result<PerformanceReport> {
    let ann_return = annualized_return(returns)?;
    let ann_vol = annualized_vol(returns)?;
    let sharpe = if ann_vol > 0.0 {
        Some(ann_return / ann_vol)
    } else {
        None
    };
    let ann_turnover = match per_period_turnover {
        Some(t) if !t.is_empty() => Some(PERIODS_PER_YEAR * mean(t)),
        _ => None,
    };
    let market = match market {
        Some(m) => Some(market_comparison(returns, m)?),
        None => None,
    };
    Ok(PerformanceReport {
        ann_return,
        ann_vol,
        sharpe,
        max_drawdown: max_drawdown(nav)?,
        ann_turnover,
        market,
    })
}

/// Per-calendar-year breakdown of returns, volatility, Sharpe, and the
/// market-relative statistics when a market series is supplied.
#[derive(Debug, Clone, Serialize)]
pub struct AnnualRow {
    pub year: i32,
    pub ann_return: f64,
    pub ann_vol: Option<f64>,
    pub sharpe: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketComparison>,
}

pub fn annual_breakdown(
    returns: &ReturnSeries,
    market: Option<&ReturnSeries>,
) -> Result<Vec<AnnualRow>> {
    if let Some(m) = market {
        returns.check_aligned(m)?;
    }
    let mut rows = Vec::new();
    let mut start = 0;
    while start < returns.len() {
        let year = returns.dates[start].year();
        let mut end = start;
        while end < returns.len() && returns.dates[end].year() == year {
            end += 1;
        }
        let slice = ReturnSeries {
            dates: returns.dates[start..end].to_vec(),
            values: returns.values[start..end].to_vec(),
        };
        let ann_return = annualized_return(&slice)?;
        let ann_vol = annualized_vol(&slice).ok();
        let sharpe = match ann_vol {
            Some(v) if v > 0.0 => Some(ann_return / v),
            _ => None,
        };
        let market_block = match market {
            Some(m) => {
                let mslice = ReturnSeries {
                    dates: m.dates[start..end].to_vec(),
                    values: m.values[start..end].to_vec(),
                };
                market_comparison(&slice, &mslice).ok()
            }
            None => None,
        };
        rows.push(AnnualRow {
            year,
            ann_return,
            ann_vol,
            sharpe,
            market: market_block,
        });
        start = end;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dates(n: usize) -> Vec<NaiveDate> {
        let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        (0..n).map(|i| start + chrono::Days::new(i as u64)).collect()
    }

    fn series(values: Vec<f64>) -> ReturnSeries {
        ReturnSeries::new(dates(values.len()), values).unwrap()
    }

    #[test]
    fn annualized_return_cases() {
        assert_relative_eq!(annualized_return(&series(vec![0.0; 5])).unwrap(), 0.0);
        assert_relative_eq!(
            annualized_return(&series(vec![0.001; 17])).unwrap(),
            0.25,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            annualized_return(&series(vec![0.01, -0.01])).unwrap(),
            0.0,
            epsilon = 1e-15
        );
        assert!(annualized_return(&series(vec![])).is_err());
    }

    #[test]
    fn annualized_vol_cases() {
        assert_relative_eq!(annualized_vol(&series(vec![0.004; 9])).unwrap(), 0.0);
        let x = 0.007;
        assert_relative_eq!(
            annualized_vol(&series(vec![x, -x])).unwrap(),
            250.0f64.sqrt() * x,
            max_relative = 1e-12
        );
        // r = (0.01, 0.02, 0.03): population std = sqrt(2/3) * 0.01.
        assert_relative_eq!(
            annualized_vol(&series(vec![0.01, 0.02, 0.03])).unwrap(),
            250.0f64.sqrt() * (2.0f64 / 3.0).sqrt() * 0.01,
            max_relative = 1e-12
        );
        assert!(annualized_vol(&series(vec![0.01])).is_err());
    }

    #[test]
    fn drawdown_cases() {
        assert_relative_eq!(max_drawdown(&[1.0, 1.1, 1.2, 1.3]).unwrap(), 0.0);
        assert_relative_eq!(max_drawdown(&[1.0, 0.8, 0.9]).unwrap(), 0.2);
        // Brute-force over all pairs gives 0.6, from 1.5 down to 0.6.
        assert_relative_eq!(max_drawdown(&[1.0, 1.5, 0.9, 1.2, 0.6]).unwrap(), 0.6);
        assert_relative_eq!(max_drawdown(&[1.0]).unwrap(), 0.0);
        assert!(max_drawdown(&[1.0, -0.5]).is_err());
    }

    fn brute_force_drawdown(nav: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..nav.len() {
            for j in (i + 1)..nav.len() {
                worst = worst.max(1.0 - nav[j] / nav[i]);
            }
        }
        worst
    }

    #[test]
    fn drawdown_streaming_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let mut nav = vec![1.0];
            for _ in 0..60 {
                let r: f64 = rng.random_range(-0.05..0.05);
                let next = nav.last().unwrap() * (1.0 + r);
                nav.push(next);
            }
            assert_relative_eq!(
                max_drawdown(&nav).unwrap(),
                brute_force_drawdown(&nav),
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn turnover_cases() {
        let p = DVector::from_vec(vec![1.0, 1.0]);
        let zero = DVector::zeros(2);
        assert_relative_eq!(turnover(&zero, &zero, &p, 100.0).unwrap(), 0.0);
        // Buy 1 USD and sell 1 USD on a 100 USD book: turnover 0.01.
        let h_new = DVector::from_vec(vec![1.0, -1.0]);
        assert_relative_eq!(turnover(&h_new, &zero, &p, 100.0).unwrap(), 0.01);
        // Trades of USD value (3, -4) on V=10: (3+4)/2/10 = 0.35.
        let h_new = DVector::from_vec(vec![3.0, -4.0]);
        assert_relative_eq!(turnover(&h_new, &zero, &p, 10.0).unwrap(), 0.35);
    }

    #[test]
    fn regression_cases() {
        let m = series(vec![0.01, -0.01, 0.02, 0.005]);
        let reg = regress_market(&m, &m).unwrap();
        assert_relative_eq!(reg.beta, 1.0, max_relative = 1e-12);
        assert!(reg.residuals.iter().all(|r| r.abs() < 1e-15));

        // Orthogonal series give beta 0.
        let r = series(vec![0.01, 0.01]);
        let m2 = series(vec![0.01, -0.01]);
        let reg = regress_market(&r, &m2).unwrap();
        assert_relative_eq!(reg.beta, 0.0, epsilon = 1e-15);

        // r = 2 m + c with m = (0.01, -0.01): beta 2, residuals all c.
        let c = 0.003;
        let r = series(vec![2.0 * 0.01 + c, 2.0 * (-0.01) + c]);
        let reg = regress_market(&r, &m2).unwrap();
        assert_relative_eq!(reg.beta, 2.0, max_relative = 1e-12);
        for res in &reg.residuals {
            assert_relative_eq!(*res, c, max_relative = 1e-10);
        }

        assert!(regress_market(&series(vec![0.0, 0.0]), &series(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn active_stats_cases() {
        let m = series(vec![0.01, -0.02, 0.03]);
        let (ar, arisk) = active_stats(&m, &m).unwrap();
        assert_relative_eq!(ar, 0.0, epsilon = 1e-15);
        assert_relative_eq!(arisk, 0.0, epsilon = 1e-15);

        let shifted = series(m.values.iter().map(|v| v + 0.001).collect());
        let (ar, arisk) = active_stats(&shifted, &m).unwrap();
        assert_relative_eq!(ar, 0.25, max_relative = 1e-9);
        assert_relative_eq!(arisk, 0.0, epsilon = 1e-12);

        let r = series(vec![0.01, -0.01]);
        let zero = series(vec![0.0, 0.0]);
        let (ar, arisk) = active_stats(&r, &zero).unwrap();
        assert_relative_eq!(ar, 0.0, epsilon = 1e-15);
        assert_relative_eq!(arisk, 250.0f64.sqrt() * 0.01, max_relative = 1e-12);
    }

    #[test]
    fn ewma_correlation_perfect_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let vals: Vec<f64> = (0..100).map(|_| rng.random_range(-0.02..0.02)).collect();
        let r = series(vals.clone());
        let neg = series(vals.iter().map(|v| -v).collect());
        for (_, c) in ewma_correlation(&r, &r, 20.0).unwrap() {
            assert!((c - 1.0).abs() < 1e-9, "corr {c}");
        }
        for (_, c) in ewma_correlation(&r, &neg, 20.0).unwrap() {
            assert!((c + 1.0).abs() < 1e-9, "corr {c}");
        }
    }

    #[test]
    fn ewma_correlation_independent_streams_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random_range(-0.01..0.01)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random_range(-0.01..0.01)).collect();
        let out = ewma_correlation(&series(a), &series(b), 250.0).unwrap();
        let last = out.last().unwrap().1;
        assert!(last.abs() < 0.1, "terminal corr {last}");
    }

    #[test]
    fn ewma_correlation_suppresses_warmup() {
        let r = series(vec![0.01; 10]);
        let out = ewma_correlation(&r, &r, 20.0).unwrap();
        assert_eq!(out.len(), 10 - CORRELATION_WARMUP);
    }

    #[test]
    fn blend_cases() {
        let a = series(vec![0.02, 0.0]);
        let b = series(vec![0.0, 0.01]);
        assert_eq!(blend(&a, &b, 1.0).unwrap().values, a.values);
        assert_eq!(blend(&a, &b, 0.0).unwrap().values, b.values);
        assert_relative_eq!(blend(&a, &b, 0.5).unwrap().values[0], 0.01);
        assert!(blend(&a, &b, 1.5).is_err());
    }

    #[test]
    fn annual_breakdown_constant_two_years() {
        let start = NaiveDate::from_ymd_opt(2021, 1, 4).unwrap();
        let mut ds = Vec::new();
        let mut d = start;
        while ds.len() < 500 {
            ds.push(d);
            d += chrono::Days::new(1);
        }
        let r = ReturnSeries::new(ds, vec![0.002; 500]).unwrap();
        let rows = annual_breakdown(&r, None).unwrap();
        assert_eq!(rows.len(), 2);
        assert_relative_eq!(rows[0].ann_return, rows[1].ann_return, max_relative = 1e-12);
        assert_eq!(rows[0].sharpe, None);
        assert_eq!(rows[1].sharpe, None);
    }

    #[test]
    fn dilution_matches_target_vol() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = series((0..300).map(|_| rng.random_range(-0.02..0.02)).collect());
        let (diluted, w) = dilute_to_vol(&m, 0.05).unwrap();
        assert_relative_eq!(annualized_vol(&diluted).unwrap(), 0.05, max_relative = 1e-10);
        assert!(w > 0.0);
    }

    proptest! {
        #[test]
        fn sharpe_invariant_under_positive_scaling(
            lambda in 0.01f64..100.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vals: Vec<f64> = (0..50).map(|_| rng.random_range(-0.02..0.02)).collect();
            let r = series(vals.clone());
            let scaled = series(vals.iter().map(|v| lambda * v).collect());
            let vol = annualized_vol(&r).unwrap();
            prop_assume!(vol > 1e-12);
            let s1 = annualized_return(&r).unwrap() / vol;
            let s2 = annualized_return(&scaled).unwrap() / annualized_vol(&scaled).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
        }

        #[test]
        fn beta_exact_on_noiseless_series(beta0 in -3.0f64..3.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mvals: Vec<f64> = (0..40).map(|_| rng.random_range(-0.02..0.02)).collect();
            let denom: f64 = mvals.iter().map(|v| v * v).sum();
            prop_assume!(denom > 1e-12);
            let m = series(mvals.clone());
            let r = series(mvals.iter().map(|v| beta0 * v).collect());
            let reg = regress_market(&r, &m).unwrap();
            prop_assert!((reg.beta - beta0).abs() < 1e-9);
        }

        #[test]
        fn drawdown_property_matches_brute_force(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut nav = vec![1.0f64];
            for _ in 0..40 {
                let r: f64 = rng.random_range(-0.1..0.1);
                let next = nav.last().unwrap() * (1.0 + r);
                nav.push(next);
            }
            let fast = max_drawdown(&nav).unwrap();
            prop_assert!((fast - brute_force_drawdown(&nav)).abs() < 1e-15);
        }
    }
}
