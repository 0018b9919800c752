//! Daily market data: aligned prices, half-spreads, and shorting rates.
//!
//! The price file is a long-format CSV with header
//! `date,ticker,price[,half_spread][,short_rate]`, one row per (date,
//! ticker), ISO-8601 dates, prices in USD. When the cost columns are
//! absent they are proxied from [`CostConfig`]:
//! `half_spread = (spread_bps / 1e4) * price` and
//! `short_rate = (short_rate_annual / 250) * price` per period.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PERIODS_PER_YEAR;

/// Aligned daily data for an n-asset universe over T periods.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketData {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// T x n adjusted close prices in USD.
    pub prices: DMatrix<f64>,
    /// T x n one-half bid-ask spreads, USD per share.
    pub half_spreads: DMatrix<f64>,
    /// T x n shorting rates, USD per share per period.
    pub short_rates: DMatrix<f64>,
}

impl MarketData {
    pub fn new(
        dates: Vec<NaiveDate>,
        tickers: Vec<String>,
        prices: DMatrix<f64>,
        half_spreads: DMatrix<f64>,
        short_rates: DMatrix<f64>,
    ) -> Result<Self> {
        let data = Self {
            dates,
            tickers,
            prices,
            half_spreads,
            short_rates,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.dates.len();
        let n = self.tickers.len();
        if t < 2 || n < 2 {
            return Err(Error::Dimension(format!(
                "need at least 2 dates and 2 assets, got {t} dates and {n} assets"
            )));
        }
        for m in [&self.prices, &self.half_spreads, &self.short_rates] {
            if m.shape() != (t, n) {
                return Err(Error::Dimension(format!(
                    "matrix shape {:?} does not match {t}x{n}",
                    m.shape()
                )));
            }
        }
        if self.dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation(
                "dates must be strictly increasing".into(),
            ));
        }
        for row in 0..t {
            for col in 0..n {
                let p = self.prices[(row, col)];
                if !(p > 0.0) {
                    return Err(Error::Validation(format!(
                        "non-positive price {p} for ticker {} on {}",
                        self.tickers[col], self.dates[row]
                    )));
                }
                if self.half_spreads[(row, col)] < 0.0 || self.short_rates[(row, col)] < 0.0 {
                    return Err(Error::Validation(format!(
                        "negative cost for ticker {} on {}",
                        self.tickers[col], self.dates[row]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_periods(&self) -> usize {
        self.dates.len()
    }

    pub fn num_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn ticker_index(&self, ticker: &str) -> Option<usize> {
        self.tickers.iter().position(|t| t == ticker)
    }

    /// Asset price vector `P_t`.
    pub fn price_row(&self, t: usize) -> DVector<f64> {
        self.prices.row(t).transpose()
    }

    pub fn half_spread_row(&self, t: usize) -> DVector<f64> {
        self.half_spreads.row(t).transpose()
    }

    pub fn short_rate_row(&self, t: usize) -> DVector<f64> {
        self.short_rates.row(t).transpose()
    }
}

/// Proxies for per-share costs when the price file has no cost columns.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// Half bid-ask spread in basis points of price.
    #[serde(default = "default_spread_bps")]
    pub spread_bps: f64,
    /// Annual shorting cost as a fraction of price.
    #[serde(default = "default_short_rate_annual")]
    pub short_rate_annual: f64,
}

fn default_spread_bps() -> f64 {
    10.0
}

fn default_short_rate_annual() -> f64 {
    0.005
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            spread_bps: default_spread_bps(),
            short_rate_annual: default_short_rate_annual(),
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spread_bps < 0.0 || self.short_rate_annual < 0.0 {
            return Err(Error::Validation(
                "cost proxies must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn half_spread(&self, price: f64) -> f64 {
        self.spread_bps / 1e4 * price
    }

    pub fn short_rate_per_period(&self, price: f64) -> f64 {
        self.short_rate_annual / PERIODS_PER_YEAR * price
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Cell {
    price: f64,
    half_spread: Option<f64>,
    short_rate: Option<f64>,
}

/// Load and align a long-format price CSV.
///
/// Assets without a price on every date in the file are dropped entirely;
/// forward-filling would fabricate zero-variance days that corrupt the
/// covariance estimate. Surviving columns keep their ticker alignment.
pub fn load_market_data(path: &Path, cost: &CostConfig) -> Result<MarketData> {
    cost.validate()?;
    let file_name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let columns: Vec<&str> = headers.iter().collect();
    if columns.len() < 3 || columns[0] != "date" || columns[1] != "ticker" || columns[2] != "price"
    {
        return Err(Error::Parse {
            file: file_name,
            row: 1,
            column: columns.first().unwrap_or(&"").to_string(),
            message: "expected header date,ticker,price[,half_spread][,short_rate]".into(),
        });
    }
    let spread_col = columns.iter().position(|c| *c == "half_spread");
    let short_col = columns.iter().position(|c| *c == "short_rate");

    let mut cells: BTreeMap<NaiveDate, BTreeMap<String, Cell>> = BTreeMap::new();
    let mut tickers: Vec<String> = Vec::new();

    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record?;
        let field = |idx: usize, name: &str| -> Result<String> {
            record
                .get(idx)
                .map(|s| s.to_string())
                .ok_or_else(|| Error::Parse {
                    file: file_name.clone(),
                    row,
                    column: name.to_string(),
                    message: "missing field".into(),
                })
        };
        let parse_f64 = |raw: &str, name: &str| -> Result<f64> {
            raw.parse::<f64>().map_err(|e| Error::Parse {
                file: file_name.clone(),
                row,
                column: name.to_string(),
                message: e.to_string(),
            })
        };

        let date_raw = field(0, "date")?;
        let date = NaiveDate::parse_from_str(&date_raw, "%Y-%m-%d").map_err(|e| Error::Parse {
            file: file_name.clone(),
            row,
            column: "date".into(),
            message: format!("expected ISO-8601 date: {e}"),
        })?;
        let ticker = field(1, "ticker")?;
        if ticker.is_empty() {
            return Err(Error::Parse {
                file: file_name.clone(),
                row,
                column: "ticker".into(),
                message: "empty ticker".into(),
            });
        }
        let price = parse_f64(&field(2, "price")?, "price")?;
        if !(price > 0.0) {
            return Err(Error::Validation(format!(
                "non-positive price {price} for ticker {ticker} on {date}"
            )));
        }
        let half_spread = match spread_col {
            Some(idx) => Some(parse_f64(&field(idx, "half_spread")?, "half_spread")?),
            None => None,
        };
        let short_rate = match short_col {
            Some(idx) => Some(parse_f64(&field(idx, "short_rate")?, "short_rate")?),
            None => None,
        };

        let by_ticker = cells.entry(date).or_default();
        if by_ticker.contains_key(&ticker) {
            return Err(Error::Parse {
                file: file_name.clone(),
                row,
                column: "ticker".into(),
                message: format!("duplicate row for ({date}, {ticker})"),
            });
        }
        by_ticker.insert(
            ticker.clone(),
            Cell {
                price,
                half_spread,
                short_rate,
            },
        );
        if !tickers.contains(&ticker) {
            tickers.push(ticker);
        }
    }

    let dates: Vec<NaiveDate> = cells.keys().copied().collect();
    tickers.sort();

    // Keep only assets with full coverage across the date axis.
    let kept: Vec<String> = tickers
        .into_iter()
        .filter(|tk| dates.iter().all(|d| cells[d].contains_key(tk)))
        .collect();

    let t = dates.len();
    let n = kept.len();
    if t < 2 || n < 2 {
        return Err(Error::Dimension(format!(
            "need at least 2 dates and 2 fully covered assets, got {t} dates and {n} assets"
        )));
    }

    let mut prices = DMatrix::zeros(t, n);
    let mut half_spreads = DMatrix::zeros(t, n);
    let mut short_rates = DMatrix::zeros(t, n);
    for (row, date) in dates.iter().enumerate() {
        for (col, ticker) in kept.iter().enumerate() {
            let cell = cells[date][ticker];
            prices[(row, col)] = cell.price;
            half_spreads[(row, col)] = cell
                .half_spread
                .unwrap_or_else(|| cost.half_spread(cell.price));
            short_rates[(row, col)] = cell
                .short_rate
                .unwrap_or_else(|| cost.short_rate_per_period(cell.price));
        }
    }

    MarketData::new(dates, kept, prices, half_spreads, short_rates)
}
