//! Synthetic cointegrated universes for desk-scale testing.
//!
//! Prices are a per-asset scaling of one common log-space random walk,
//! plus planted mean-reverting pair baskets. Each basket's price minus its
//! own trailing 21-day mean is an AR(1) by construction: the basket price
//! series is solved from the target AR(1) through the centering filter, so
//! the planted signal is exact rather than approximate.

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::arb::Mbsa;
use crate::error::{Error, Result};
use crate::market_data::MarketData;
use crate::metrics::{ReturnSeries, PERIODS_PER_YEAR};

/// Centering window for planted baskets; also their discovery index and
/// decommission ramp length.
pub const PLANT_WINDOW: usize = 21;

/// Regenerate the whole path if any price falls to or below this floor.
const MIN_PRICE: f64 = 0.01;

const MAX_ATTEMPTS: u64 = 64;

/// Parameters for [`generate_synthetic`]. JSON keys match field names.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_assets: usize,
    pub n_days: usize,
    pub n_baskets: usize,
    /// Stationary per-day stddev of each basket's band oscillation, USD.
    pub band_vol: f64,
    /// Per-day stddev of the common nonstationary log component.
    pub drift_vol: f64,
    /// AR(1) coefficient of the planted basket spreads, in (0, 1).
    pub reversion: f64,
    pub seed: u64,
    /// Half bid-ask spread in basis points of price.
    pub spread_bps: f64,
    /// Annual shorting rate as a fraction of price.
    pub short_rate_annual: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_assets < 1 || self.n_days < 1 || self.n_baskets < 1 {
            return Err(Error::Validation(
                "n_assets, n_days, and n_baskets must all be >= 1".into(),
            ));
        }
        if !(self.reversion > 0.0 && self.reversion < 1.0) {
            return Err(Error::Validation(format!(
                "reversion must lie strictly inside (0, 1), got {}",
                self.reversion
            )));
        }
        if self.band_vol < 0.0 || self.drift_vol < 0.0 {
            return Err(Error::Validation("volatilities must be >= 0".into()));
        }
        if self.spread_bps < 0.0 || self.short_rate_annual < 0.0 {
            return Err(Error::Validation("cost parameters must be >= 0".into()));
        }
        if self.n_assets < 2 * self.n_baskets {
            return Err(Error::Validation(format!(
                "{} baskets need at least {} assets, got {}",
                self.n_baskets,
                2 * self.n_baskets,
                self.n_assets
            )));
        }
        // Planted arbs live over [21, n_days - 1] with a 21-period ramp.
        let min_days = 2 * PLANT_WINDOW + 1;
        if self.n_days < min_days {
            return Err(Error::Validation(format!(
                "n_days must be >= {min_days} so the planted ramp fits, got {}",
                self.n_days
            )));
        }
        Ok(())
    }
}

/// Weekday trading calendar of the requested length.
fn trading_calendar(n_days: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(n_days);
    let mut d = NaiveDate::from_ymd_opt(2015, 1, 2).expect("valid date");
    while dates.len() < n_days {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            dates.push(d);
        }
        d = d.succ_opt().expect("calendar overflow");
    }
    dates
}

/// Generate a synthetic universe plus its planted baskets.
///
/// Pure function of the spec: the same spec (including seed) reproduces
/// bit-identical output. Paths where any price falls below one cent are
/// rejected and regenerated on a fresh RNG stream.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(MarketData, Vec<Mbsa>)> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt);
        if let Some(result) = try_generate(spec, &mut rng)? {
            return Ok(result);
        }
    }
    Err(Error::Validation(format!(
        "could not generate strictly positive prices after {MAX_ATTEMPTS} attempts; \
         band_vol {} is too large for the price scale",
        spec.band_vol
    )))
}

fn try_generate(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(MarketData, Vec<Mbsa>)>> {
    let n = spec.n_assets;
    let t_len = spec.n_days;
    let k = spec.n_baskets;
    let m = PLANT_WINDOW;

    // Per-asset scales; basket pairs share one so the pair's base legs
    // cancel exactly and the planted spread is the whole basket price.
    let mut scales = vec![0.0f64; n];
    for basket in 0..k {
        let s = rng.random_range(20.0..80.0);
        scales[2 * basket] = s;
        scales[2 * basket + 1] = s;
    }
    for scale in scales.iter_mut().skip(2 * k) {
        *scale = rng.random_range(20.0..80.0);
    }

    // Common nonstationary component.
    let mut log_walk = vec![0.0f64; t_len];
    for t in 1..t_len {
        let z: f64 = rng.sample(StandardNormal);
        log_walk[t] = log_walk[t - 1] + spec.drift_vol * z;
    }

    // Planted basket spreads: target AR(1) with stationary stddev band_vol,
    // then invert the trailing-mean filter so that the basket price minus
    // its own M-period mean reproduces the target exactly.
    let innovation = spec.band_vol * (1.0 - spec.reversion * spec.reversion).sqrt();
    let mut spreads = Vec::with_capacity(k);
    for _ in 0..k {
        let mut target = vec![0.0f64; t_len];
        let z0: f64 = rng.sample(StandardNormal);
        target[0] = spec.band_vol * z0;
        for t in 1..t_len {
            let z: f64 = rng.sample(StandardNormal);
            target[t] = spec.reversion * target[t - 1] + innovation * z;
        }

        let mut y = vec![0.0f64; t_len];
        let mut window_sum = 0.0; // sum of y over the previous m-1 values
        for t in (m - 1)..t_len {
            y[t] = (m as f64 * target[t] + window_sum) / (m as f64 - 1.0);
            window_sum += y[t] - y[t + 1 - m];
        }
        spreads.push(y);
    }

    let mut prices = DMatrix::zeros(t_len, n);
    for t in 0..t_len {
        let growth = log_walk[t].exp();
        for (i, scale) in scales.iter().enumerate() {
            prices[(t, i)] = scale * growth;
        }
        for (basket, y) in spreads.iter().enumerate() {
            prices[(t, 2 * basket)] += 0.5 * y[t];
            prices[(t, 2 * basket + 1)] -= 0.5 * y[t];
        }
    }

    if prices.iter().any(|p| *p <= MIN_PRICE) {
        return Ok(None);
    }

    let half_spreads = prices.map(|p| spec.spread_bps / 1e4 * p);
    let short_rates = prices.map(|p| spec.short_rate_annual / PERIODS_PER_YEAR * p);
    let dates = trading_calendar(t_len);
    let tickers: Vec<String> = (0..n).map(|i| format!("A{i:03}")).collect();
    let data = MarketData::new(dates, tickers, prices, half_spreads, short_rates)?;

    let arbs = (0..k)
        .map(|basket| {
            Mbsa::new(
                format!("basket-{basket:03}"),
                vec![(2 * basket, 1.0), (2 * basket + 1, -1.0)],
                PLANT_WINDOW,
                t_len - 1,
                PLANT_WINDOW,
            )
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Some((data, arbs)))
}

/// Equal-weight daily-rebalanced index returns over the whole universe,
/// used as the synthetic stand-in for "the market".
pub fn market_index_returns(data: &MarketData) -> Result<ReturnSeries> {
    let t_len = data.num_periods();
    let n = data.num_assets();
    let mut values = Vec::with_capacity(t_len - 1);
    for t in 1..t_len {
        let r = (0..n)
            .map(|i| data.prices[(t, i)] / data.prices[(t - 1, i)] - 1.0)
            .sum::<f64>()
            / n as f64;
        values.push(r);
    }
    ReturnSeries::new(data.dates[1..].to_vec(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arb::{midpoint, snapshot};
    use proptest::prelude::*;

    fn base_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_assets: 6,
            n_days: 120,
            n_baskets: 2,
            band_vol: 1.0,
            drift_vol: 0.01,
            reversion: 0.7,
            seed: 42,
            spread_bps: 5.0,
            short_rate_annual: 0.005,
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = base_spec();
        s.reversion = 1.2;
        assert!(s.validate().is_err());
        let mut s = base_spec();
        s.reversion = 0.0;
        assert!(s.validate().is_err());
        let mut s = base_spec();
        s.n_assets = 3;
        assert!(s.validate().is_err());
        let mut s = base_spec();
        s.n_days = 30;
        assert!(s.validate().is_err());
        let mut s = base_spec();
        s.band_vol = -1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = base_spec();
        let (a, arbs_a) = generate_synthetic(&spec).unwrap();
        let (b, arbs_b) = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(arbs_a, arbs_b);

        let mut other = spec;
        other.seed += 1;
        let (c, _) = generate_synthetic(&other).unwrap();
        assert_ne!(a.prices, c.prices);
    }

    #[test]
    fn zero_band_vol_means_zero_alpha_after_warmup() {
        let mut spec = base_spec();
        spec.n_baskets = 1;
        spec.band_vol = 0.0;
        let (data, arbs) = generate_synthetic(&spec).unwrap();
        for t in (2 * PLANT_WINDOW)..data.num_periods() {
            let snap = snapshot(&arbs, &data.prices, t, PLANT_WINDOW, 1.0).unwrap();
            assert_eq!(snap.num_active(), 1);
            assert!(
                snap.alphas[0].abs() < 1e-9,
                "alpha {} at t={t}",
                snap.alphas[0]
            );
        }
    }

    #[test]
    fn planted_centered_series_is_the_target_ar1() {
        // Least-squares AR(1) fit on the centered basket price over 1e4
        // days recovers the configured reversion coefficient.
        let spec = SyntheticSpec {
            n_assets: 4,
            n_days: 10_000,
            n_baskets: 1,
            band_vol: 1.0,
            drift_vol: 0.005,
            reversion: 0.5,
            seed: 7,
            spread_bps: 0.0,
            short_rate_annual: 0.0,
        };
        let (data, arbs) = generate_synthetic(&spec).unwrap();
        let arb = &arbs[0];
        let m = PLANT_WINDOW;
        let mut centered = Vec::new();
        let basket_prices: Vec<f64> = (0..data.num_periods())
            .map(|t| arb.price(&data.price_row(t)).unwrap())
            .collect();
        for t in (m - 1)..data.num_periods() {
            let mu = midpoint(&basket_prices[..=t], m).unwrap();
            centered.push(basket_prices[t] - mu);
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for w in centered.windows(2) {
            num += w[0] * w[1];
            den += w[0] * w[0];
        }
        let rho = num / den;
        assert!(
            (rho - spec.reversion).abs() < 0.05,
            "fitted AR(1) coefficient {rho}"
        );
        // Stationary stddev close to band_vol.
        let var = centered.iter().map(|c| c * c).sum::<f64>() / centered.len() as f64;
        assert!((var.sqrt() - spec.band_vol).abs() < 0.1, "stddev {}", var.sqrt());
    }

    #[test]
    fn market_index_has_one_return_per_transition() {
        let (data, _) = generate_synthetic(&base_spec()).unwrap();
        let idx = market_index_returns(&data).unwrap();
        assert_eq!(idx.len(), data.num_periods() - 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn generated_data_satisfies_invariants(
            seed in 0u64..1_000,
            n_baskets in 1usize..4,
            band_vol in 0.0f64..2.0,
            drift_vol in 0.0f64..0.05,
            reversion in 0.05f64..0.95,
        ) {
            let spec = SyntheticSpec {
                n_assets: 2 * n_baskets + 3,
                n_days: 60,
                n_baskets,
                band_vol,
                drift_vol,
                reversion,
                seed,
                spread_bps: 5.0,
                short_rate_annual: 0.005,
            };
            let (data, arbs) = generate_synthetic(&spec).unwrap();
            data.validate().unwrap();
            prop_assert_eq!(arbs.len(), n_baskets);
            for arb in &arbs {
                prop_assert_eq!(arb.discovered(), PLANT_WINDOW);
                prop_assert_eq!(arb.decommission(), 59);
            }
        }
    }
}
