//! Forecast verification: RMSE, Gaussian log score, 90% interval coverage
//! and interval width, aggregated over groups of records.

use std::collections::BTreeMap;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use crate::densegp::LN_2PI;
use crate::engine::{ForecastRecord, ModelTag};
use crate::error::{contract, Result};

/// Two-sided 90% normal multiplier.
pub const Z90: f64 = 1.6449;

/// Smallest sd used in the log score; degenerate ensembles hit it.
pub const SD_FLOOR: f64 = 1e-6;

/// Days per day-of-year bucket.
pub const DOY_BUCKET: u32 = 30;

/// Gaussian predictive log density of `y`.
pub fn log_score(y: f64, mean: f64, sd: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(contract!("log score needs sd > 0, got {sd}"));
    }
    let z = (y - mean) / sd;
    Ok(-0.5 * LN_2PI - sd.ln() - 0.5 * z * z)
}

pub fn log_scores(y: &[f64], mean: &[f64], sd: &[f64]) -> Result<Vec<f64>> {
    if y.len() != mean.len() || y.len() != sd.len() {
        return Err(contract!("log score inputs differ in length"));
    }
    y.iter()
        .zip(mean)
        .zip(sd)
        .map(|((&y, &m), &s)| log_score(y, m, s))
        .collect()
}

/// Whether `y` lies in the closed 90% interval.
pub fn coverage90(y: f64, mean: f64, sd: f64) -> bool {
    (y - mean).abs() <= Z90 * sd
}

pub fn interval90(mean: f64, sd: f64) -> (f64, f64) {
    (mean - Z90 * sd, mean + Z90 * sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroupBy {
    All,
    Horizon,
    Depth,
    DoyBucket,
}

impl GroupBy {
    pub fn key(self) -> &'static str {
        match self {
            GroupBy::All => "all",
            GroupBy::Horizon => "horizon",
            GroupBy::Depth => "depth",
            GroupBy::DoyBucket => "doy_bucket",
        }
    }

    fn value(self, r: &ForecastRecord) -> u32 {
        match self {
            GroupBy::All => 0,
            GroupBy::Horizon => r.horizon,
            GroupBy::Depth => r.depth,
            GroupBy::DoyBucket => (r.ref_date.ordinal() - 1) / DOY_BUCKET,
        }
    }

    fn label(self, v: u32) -> String {
        match self {
            GroupBy::All => "all".into(),
            GroupBy::DoyBucket => format!("{}-{}", v * DOY_BUCKET + 1, (v + 1) * DOY_BUCKET),
            _ => v.to_string(),
        }
    }
}

/// One row of a score table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: ModelTag,
    pub group_key: String,
    pub group_value: String,
    pub rmse: f64,
    pub log_score: f64,
    pub coverage: f64,
    pub width: f64,
    pub n: usize,
    /// Records whose sd was raised to [`SD_FLOOR`] for the log score.
    pub n_floored: usize,
}

#[derive(Default)]
struct Acc {
    se: f64,
    ls: f64,
    cov: usize,
    width: f64,
    n: usize,
    floored: usize,
}

/// Scores every record that carries a truth value, grouped by model and
/// `group_by`. Rows come out ordered by model, then group value.
pub fn aggregate(records: &[ForecastRecord], group_by: GroupBy) -> Vec<ScoreRow> {
    let mut groups: BTreeMap<(ModelTag, u32), Acc> = BTreeMap::new();
    for r in records {
        let Some(y) = r.truth else { continue };
        let a = groups.entry((r.model, group_by.value(r))).or_default();
        let sd = if r.sd < SD_FLOOR {
            a.floored += 1;
            SD_FLOOR
        } else {
            r.sd
        };
        a.se += (y - r.mean).powi(2);
        a.ls += log_score(y, r.mean, sd).expect("floored sd is positive");
        a.cov += coverage90(y, r.mean, r.sd) as usize;
        a.width += 2.0 * Z90 * r.sd;
        a.n += 1;
    }
    groups
        .into_iter()
        .map(|((model, v), a)| {
            if a.floored > 0 {
                log::warn!(
                    "{}: {} forecasts scored with sd floored at {SD_FLOOR:e}",
                    model.name(),
                    a.floored
                );
            }
            let n = a.n as f64;
            ScoreRow {
                model,
                group_key: group_by.key().into(),
                group_value: group_by.label(v),
                rmse: (a.se / n).sqrt(),
                log_score: a.ls / n,
                coverage: a.cov as f64 / n,
                width: a.width / n,
                n: a.n,
                n_floored: a.floored,
            }
        })
        .collect()
}
