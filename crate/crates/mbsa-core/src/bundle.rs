//! Reading and writing the backtest result bundle.
//!
//! A run directory holds `nav.csv` (date,nav,cash,return), `trades.csv`
//! (date,ticker,shares,price,cost), `positions.csv` (date,arb_id,q),
//! `diagnostics.jsonl` (one solver log per date), and `config.json` (the
//! resolved configuration echo). Writes go through a temp file and rename
//! so partially written bundles are never observed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;

use crate::backtest::{BacktestResult, ProblemDump, SolveLog};
use crate::error::{Error, Result};
use crate::market_data::MarketData;

/// Write `contents` to `dir/name` atomically (temp file + rename).
pub fn write_atomic(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".tmp-{name}"));
    fs::write(&tmp, contents)?;
    let target = dir.join(name);
    fs::rename(&tmp, &target)?;
    Ok(target)
}

pub fn write_bundle(
    dir: &Path,
    result: &BacktestResult,
    data: &MarketData,
    config_echo: &serde_json::Value,
) -> Result<()> {
    let mut nav = String::from("date,nav,cash,return\n");
    for (i, date) in result.dates.iter().enumerate() {
        writeln!(
            nav,
            "{date},{},{},{}",
            result.nav[i], result.cash[i], result.returns[i]
        )
        .expect("string write");
    }
    write_atomic(dir, "nav.csv", &nav)?;

    let mut trades = String::from("date,ticker,shares,price,cost\n");
    for (t, date) in result.dates.iter().enumerate() {
        let current = &result.h_history[t];
        for i in 0..data.num_assets() {
            let before = if t == 0 { 0.0 } else { result.h_history[t - 1][i] };
            let shares = current[i] - before;
            if shares != 0.0 {
                let price = data.prices[(t, i)];
                let cost = data.half_spreads[(t, i)] * shares.abs();
                writeln!(
                    trades,
                    "{date},{},{shares},{price},{cost}",
                    data.tickers[i]
                )
                .expect("string write");
            }
        }
    }
    write_atomic(dir, "trades.csv", &trades)?;

    let mut positions = String::from("date,arb_id,q\n");
    for (t, date) in result.dates.iter().enumerate() {
        for (id, q) in &result.q_history[t] {
            writeln!(positions, "{date},{id},{q}").expect("string write");
        }
    }
    write_atomic(dir, "positions.csv", &positions)?;

    let mut diagnostics = String::new();
    for log in &result.solver_log {
        diagnostics.push_str(&serde_json::to_string(log)?);
        diagnostics.push('\n');
    }
    write_atomic(dir, "diagnostics.jsonl", &diagnostics)?;

    write_atomic(
        dir,
        "config.json",
        &format!("{}\n", serde_json::to_string_pretty(config_echo)?),
    )?;
    Ok(())
}

/// Per-day problem summaries as JSON lines.
pub fn write_problem_dumps(dir: &Path, dumps: &[ProblemDump]) -> Result<()> {
    let mut out = String::new();
    for dump in dumps {
        out.push_str(&serde_json::to_string(dump)?);
        out.push('\n');
    }
    write_atomic(dir, "problems.jsonl", &out)?;
    Ok(())
}

/// Upper-triangle long-format dump of the smoothed asset covariances.
pub fn write_covariance_dump(
    dir: &Path,
    covariances: &[(NaiveDate, DMatrix<f64>)],
    tickers: &[String],
) -> Result<()> {
    let mut out = String::from("date,ticker_i,ticker_j,value\n");
    for (date, sigma) in covariances {
        for i in 0..sigma.nrows() {
            for j in i..sigma.ncols() {
                writeln!(out, "{date},{},{},{}", tickers[i], tickers[j], sigma[(i, j)])
                    .expect("string write");
            }
        }
    }
    write_atomic(dir, "cov.csv", &out)?;
    Ok(())
}

/// The NAV table of a run bundle.
#[derive(Debug, Clone)]
pub struct NavTable {
    pub dates: Vec<NaiveDate>,
    pub nav: Vec<f64>,
    pub cash: Vec<f64>,
    pub returns: Vec<f64>,
}

pub fn read_nav(dir: &Path) -> Result<NavTable> {
    let path = dir.join("nav.csv");
    let mut reader = csv::Reader::from_path(&path)?;
    let mut table = NavTable {
        dates: Vec::new(),
        nav: Vec::new(),
        cash: Vec::new(),
        returns: Vec::new(),
    };
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let parse = |idx: usize, name: &str| -> Result<f64> {
            record
                .get(idx)
                .ok_or_else(|| missing(&path, i + 2, name))?
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    file: path.display().to_string(),
                    row: i + 2,
                    column: name.into(),
                    message: e.to_string(),
                })
        };
        let date = record
            .get(0)
            .ok_or_else(|| missing(&path, i + 2, "date"))?
            .parse::<NaiveDate>()
            .map_err(|e| Error::Parse {
                file: path.display().to_string(),
                row: i + 2,
                column: "date".into(),
                message: e.to_string(),
            })?;
        table.dates.push(date);
        table.nav.push(parse(1, "nav")?);
        table.cash.push(parse(2, "cash")?);
        table.returns.push(parse(3, "return")?);
    }
    if table.dates.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no rows",
            path.display()
        )));
    }
    Ok(table)
}

fn missing(path: &Path, row: usize, column: &str) -> Error {
    Error::Parse {
        file: path.display().to_string(),
        row,
        column: column.into(),
        message: "missing field".into(),
    }
}

/// Total traded USD value per date from `trades.csv`.
pub fn read_traded_value(dir: &Path) -> Result<std::collections::BTreeMap<NaiveDate, f64>> {
    let path = dir.join("trades.csv");
    let mut reader = csv::Reader::from_path(&path)?;
    let mut out = std::collections::BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let date = record
            .get(0)
            .ok_or_else(|| missing(&path, i + 2, "date"))?
            .parse::<NaiveDate>()
            .map_err(|e| Error::Parse {
                file: path.display().to_string(),
                row: i + 2,
                column: "date".into(),
                message: e.to_string(),
            })?;
        let shares: f64 = record
            .get(2)
            .ok_or_else(|| missing(&path, i + 2, "shares"))?
            .parse()
            .map_err(|e: std::num::ParseFloatError| Error::Parse {
                file: path.display().to_string(),
                row: i + 2,
                column: "shares".into(),
                message: e.to_string(),
            })?;
        let price: f64 = record
            .get(3)
            .ok_or_else(|| missing(&path, i + 2, "price"))?
            .parse()
            .map_err(|e: std::num::ParseFloatError| Error::Parse {
                file: path.display().to_string(),
                row: i + 2,
                column: "price".into(),
                message: e.to_string(),
            })?;
        *out.entry(date).or_insert(0.0) += (shares * price).abs();
    }
    Ok(out)
}

pub fn read_diagnostics(dir: &Path) -> Result<Vec<SolveLog>> {
    let path = dir.join("diagnostics.jsonl");
    let raw = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backtest::{run, BacktestConfig};
    use crate::synthetic::{generate_synthetic, SyntheticSpec};

    fn small_run() -> (MarketData, BacktestResult) {
        let spec = SyntheticSpec {
            n_assets: 4,
            n_days: 80,
            n_baskets: 1,
            band_vol: 1.0,
            drift_vol: 0.005,
            reversion: 0.5,
            seed: 12,
            spread_bps: 5.0,
            short_rate_annual: 0.005,
        };
        let (data, arbs) = generate_synthetic(&spec).unwrap();
        let config = BacktestConfig {
            vol_half_life: 20.0,
            corr_half_life: 40.0,
            smooth_half_life: 40.0,
            ..BacktestConfig::default()
        };
        let result = run(&data, &arbs, &config).unwrap();
        (data, result)
    }

    #[test]
    fn bundle_roundtrips() {
        let (data, result) = small_run();
        let dir = tempfile::tempdir().unwrap();
        let echo = serde_json::json!({"window": 21});
        write_bundle(dir.path(), &result, &data, &echo).unwrap();

        let nav = read_nav(dir.path()).unwrap();
        assert_eq!(nav.dates, result.dates);
        assert_eq!(nav.nav, result.nav);
        assert_eq!(nav.returns, result.returns);

        let traded = read_traded_value(dir.path()).unwrap();
        let first_traded = result.first_traded.unwrap();
        assert!(traded.contains_key(&result.dates[first_traded]));

        let diags = read_diagnostics(dir.path()).unwrap();
        assert_eq!(diags.len(), result.dates.len());
        assert_eq!(diags[0].status, "warmup");
    }

    #[test]
    fn writes_are_byte_stable() {
        let (data, result) = small_run();
        let echo = serde_json::json!({"window": 21});
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_bundle(dir_a.path(), &result, &data, &echo).unwrap();
        write_bundle(dir_b.path(), &result, &data, &echo).unwrap();
        for name in ["nav.csv", "trades.csv", "positions.csv", "diagnostics.jsonl"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs");
        }
    }
}
