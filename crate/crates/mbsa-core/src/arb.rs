//! Moving-band stat-arbs: basket definitions, prices, midpoints, alphas,
//! and the size-limit schedule that decommissions them.
//!
//! An arb is a fixed basket `s` of assets whose price `s' P_t` oscillates
//! around its trailing `M`-period mean. The signal is the gap between the
//! trailing mean (the midpoint) and the current basket price: positive
//! means the basket is cheap relative to its band.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::market_data::MarketData;

/// One moving-band stat-arb: sparse holdings plus an active lifetime.
#[derive(Debug, Clone, PartialEq)]
pub struct Mbsa {
    id: String,
    /// (asset index, shares), sorted by asset index, all shares nonzero.
    holdings: Vec<(usize, f64)>,
    discovered: usize,
    decommission: usize,
    ramp: usize,
}

impl Mbsa {
    pub fn new(
        id: impl Into<String>,
        mut holdings: Vec<(usize, f64)>,
        discovered: usize,
        decommission: usize,
        ramp: usize,
    ) -> Result<Self> {
        let id = id.into();
        holdings.retain(|(_, shares)| *shares != 0.0);
        holdings.sort_by_key(|(idx, _)| *idx);
        if holdings.is_empty() {
            return Err(Error::Validation(format!(
                "arb `{id}` has no nonzero holdings"
            )));
        }
        if holdings.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Validation(format!(
                "arb `{id}` repeats an asset in its holdings"
            )));
        }
        if discovered >= decommission {
            return Err(Error::Validation(format!(
                "arb `{id}`: discovery {discovered} must precede decommission {decommission}"
            )));
        }
        if ramp == 0 {
            return Err(Error::Validation(format!("arb `{id}`: ramp must be >= 1")));
        }
        if decommission - discovered < ramp {
            return Err(Error::Validation(format!(
                "arb `{id}`: ramp {ramp} does not fit inside lifetime [{discovered}, {decommission}]"
            )));
        }
        Ok(Self {
            id,
            holdings,
            discovered,
            decommission,
            ramp,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn holdings(&self) -> &[(usize, f64)] {
        &self.holdings
    }

    pub fn discovered(&self) -> usize {
        self.discovered
    }

    pub fn decommission(&self) -> usize {
        self.decommission
    }

    pub fn ramp(&self) -> usize {
        self.ramp
    }

    /// Basket price `s' P`.
    pub fn price(&self, asset_prices: &DVector<f64>) -> Result<f64> {
        let max_index = self.holdings.last().map(|(i, _)| *i).unwrap_or(0);
        if max_index >= asset_prices.len() {
            return Err(Error::Dimension(format!(
                "arb `{}` references asset {max_index} but only {} prices supplied",
                self.id,
                asset_prices.len()
            )));
        }
        Ok(self
            .holdings
            .iter()
            .map(|(i, shares)| shares * asset_prices[*i])
            .sum())
    }

    /// Holdings as a dense n-vector.
    pub fn dense_holdings(&self, n_assets: usize) -> Result<DVector<f64>> {
        let max_index = self.holdings.last().map(|(i, _)| *i).unwrap_or(0);
        if max_index >= n_assets {
            return Err(Error::Dimension(format!(
                "arb `{}` references asset {max_index} in a {n_assets}-asset universe",
                self.id
            )));
        }
        let mut out = DVector::zeros(n_assets);
        for (i, shares) in &self.holdings {
            out[*i] = *shares;
        }
        Ok(out)
    }

    /// Size limit at time `t`: flat at `xi_max` until the ramp, then linear
    /// to zero at decommission.
    pub fn size_limit(&self, t: usize, xi_max: f64) -> Result<f64> {
        if t < self.discovered || t > self.decommission {
            return Err(Error::Inactive {
                id: self.id.clone(),
                t,
                start: self.discovered,
                end: self.decommission,
            });
        }
        let ramp_start = self.decommission - self.ramp;
        if t <= ramp_start {
            Ok(xi_max)
        } else {
            Ok(xi_max * (self.decommission - t) as f64 / self.ramp as f64)
        }
    }

    /// Tradeable once a full midpoint window fits inside the lifetime.
    pub fn is_tradeable(&self, t: usize, window: usize) -> bool {
        t >= self.discovered + window - 1 && t <= self.decommission
    }
}

/// Trailing mean of exactly the last `window` basket prices.
pub fn midpoint(price_history: &[f64], window: usize) -> Result<f64> {
    if window == 0 {
        return Err(Error::Validation("midpoint window must be positive".into()));
    }
    if price_history.len() < window {
        return Err(Error::InsufficientHistory {
            needed: window,
            available: price_history.len(),
        });
    }
    let tail = &price_history[price_history.len() - window..];
    Ok(tail.iter().sum::<f64>() / window as f64)
}

/// The expected-reversion signal in USD.
pub fn alpha(midpoint: f64, price: f64) -> f64 {
    midpoint - price
}

/// Everything the optimizer needs about the active arbs at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ArbSnapshot {
    pub time: usize,
    /// Active arb ids in ascending order; fixes the column order below.
    pub active_ids: Vec<String>,
    /// n x K stacked holdings.
    pub stacking: DMatrix<f64>,
    /// Basket prices in USD.
    pub prices: DVector<f64>,
    /// Trailing-mean midpoints in USD.
    pub midpoints: DVector<f64>,
    /// `midpoints - prices`, elementwise.
    pub alphas: DVector<f64>,
    /// Per-arb size limits from the decommission schedule.
    pub size_limits: DVector<f64>,
}

impl ArbSnapshot {
    pub fn empty(time: usize, n_assets: usize) -> Self {
        Self {
            time,
            active_ids: Vec::new(),
            stacking: DMatrix::zeros(n_assets, 0),
            prices: DVector::zeros(0),
            midpoints: DVector::zeros(0),
            alphas: DVector::zeros(0),
            size_limits: DVector::zeros(0),
        }
    }

    pub fn num_active(&self) -> usize {
        self.active_ids.len()
    }

    pub fn num_assets(&self) -> usize {
        self.stacking.nrows()
    }
}

/// Assemble the snapshot at time `t` from asset price history through `t`.
///
/// The active set is every arb whose full midpoint window fits inside its
/// lifetime at `t`, in ascending id order. An empty active set is legal.
pub fn snapshot(
    arbs: &[Mbsa],
    prices: &DMatrix<f64>,
    t: usize,
    window: usize,
    xi_max: f64,
) -> Result<ArbSnapshot> {
    let n_assets = prices.ncols();
    if t >= prices.nrows() {
        return Err(Error::Dimension(format!(
            "time {t} outside price history of length {}",
            prices.nrows()
        )));
    }
    if t + 1 < window {
        return Err(Error::InsufficientHistory {
            needed: window,
            available: t + 1,
        });
    }

    let mut active: Vec<&Mbsa> = arbs.iter().filter(|a| a.is_tradeable(t, window)).collect();
    active.sort_by(|a, b| a.id.cmp(&b.id));

    let k = active.len();
    let mut stacking = DMatrix::zeros(n_assets, k);
    let mut price_vec = DVector::zeros(k);
    let mut mid_vec = DVector::zeros(k);
    let mut xi_vec = DVector::zeros(k);

    for (col, arb) in active.iter().enumerate() {
        stacking.set_column(col, &arb.dense_holdings(n_assets)?);
        let history: Vec<f64> = (t + 1 - window..=t)
            .map(|tau| arb.price(&prices.row(tau).transpose()))
            .collect::<Result<_>>()?;
        price_vec[col] = history[window - 1];
        mid_vec[col] = midpoint(&history, window)?;
        xi_vec[col] = arb.size_limit(t, xi_max)?;
    }

    let alphas = &mid_vec - &price_vec;
    Ok(ArbSnapshot {
        time: t,
        active_ids: active.iter().map(|a| a.id.clone()).collect(),
        stacking,
        prices: price_vec,
        midpoints: mid_vec,
        alphas,
        size_limits: xi_vec,
    })
}

#[derive(Debug, Deserialize)]
struct BasketRecord {
    id: String,
    holdings: BTreeMap<String, f64>,
    discovered: NaiveDate,
    decommission: Option<NaiveDate>,
    ramp: Option<usize>,
}

/// Load a basket file: a JSON array of
/// `{id, holdings: {ticker: shares}, discovered, [decommission], [ramp]}`.
///
/// Tickers resolve against the market data; dates resolve to the first
/// trading date at or after `discovered` and the last at or before
/// `decommission`. Baskets without an explicit decommission are kept for
/// `default_lifetime` periods and then ramped over `default_ramp`.
pub fn load_baskets(
    path: &Path,
    data: &MarketData,
    default_lifetime: usize,
    default_ramp: usize,
) -> Result<Vec<Mbsa>> {
    let raw = std::fs::read_to_string(path)?;
    let records: Vec<BasketRecord> = serde_json::from_str(&raw)?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        if !seen.insert(record.id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate arb id `{}` in {}",
                record.id,
                path.display()
            )));
        }
        let mut holdings = Vec::with_capacity(record.holdings.len());
        for (ticker, shares) in &record.holdings {
            let idx = data
                .ticker_index(ticker)
                .ok_or_else(|| Error::UnknownTicker {
                    ticker: ticker.clone(),
                    arb: record.id.clone(),
                })?;
            holdings.push((idx, *shares));
        }
        let discovered = data
            .dates
            .partition_point(|d| *d < record.discovered);
        if discovered >= data.num_periods() {
            return Err(Error::Validation(format!(
                "arb `{}` discovered {} after the last trading date {}",
                record.id,
                record.discovered,
                data.dates.last().unwrap()
            )));
        }
        let ramp = record.ramp.unwrap_or(default_ramp);
        let decommission = match record.decommission {
            Some(date) => {
                let idx = data.dates.partition_point(|d| *d <= date);
                if idx == 0 {
                    return Err(Error::Validation(format!(
                        "arb `{}` decommissioned {date} before the first trading date",
                        record.id
                    )));
                }
                idx - 1
            }
            None => discovered + default_lifetime + ramp,
        };
        out.push(Mbsa::new(
            record.id,
            holdings,
            discovered,
            decommission,
            ramp,
        )?);
    }
    Ok(out)
}
