//! Field observations, horizon-aligned discrepancies and the bias-corrected
//! surrogate.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::covkernel::{ColumnRole, DesignMatrix, Hyperparams};
use crate::densegp::{PredictiveMoments, VarianceScale};
use crate::error::{contract, Error, Result};
use crate::gp::{FitOptions, Gp};
use crate::optim::HyperBounds;
use crate::surrogate::{HetSurrogate, SkMode};

/// Rows kept for the bias GP once discrepancies exceed this many.
pub const BIAS_WINDOW_CAP: usize = 500_000;

/// Sensor temperatures keyed by (date, depth in metres).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<(NaiveDate, u32, f64)>", try_from = "Vec<(NaiveDate, u32, f64)>")]
pub struct FieldSeries {
    obs: BTreeMap<(NaiveDate, u32), f64>,
}

impl From<FieldSeries> for Vec<(NaiveDate, u32, f64)> {
    fn from(f: FieldSeries) -> Self {
        f.iter().collect()
    }
}

impl TryFrom<Vec<(NaiveDate, u32, f64)>> for FieldSeries {
    type Error = Error;

    fn try_from(rows: Vec<(NaiveDate, u32, f64)>) -> Result<Self> {
        let mut f = FieldSeries::new();
        for (d, z, t) in rows {
            f.insert(d, z, t)?;
        }
        Ok(f)
    }
}

impl FieldSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, date: NaiveDate, depth: u32, temp: f64) -> Result<()> {
        if !temp.is_finite() {
            return Err(Error::Data(format!(
                "non-finite field temperature on {date} at depth {depth}"
            )));
        }
        if self.obs.insert((date, depth), temp).is_some() {
            return Err(Error::Data(format!(
                "duplicate field observation on {date} at depth {depth}"
            )));
        }
        Ok(())
    }

    pub fn get(&self, date: NaiveDate, depth: u32) -> Option<f64> {
        self.obs.get(&(date, depth)).copied()
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, u32, f64)> + '_ {
        self.obs.iter().map(|(&(d, z), &t)| (d, z, t))
    }

    /// Observations on one date, by depth.
    pub fn on(&self, date: NaiveDate) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.obs
            .range((date, 0)..=(date, u32::MAX))
            .map(|(&(_, z), &t)| (z, t))
    }

    pub fn first_date(&self) -> Option<NaiveDate> {
        self.obs.keys().next().map(|k| k.0)
    }

    pub fn last_date(&self) -> Option<NaiveDate> {
        self.obs.keys().next_back().map(|k| k.0)
    }

    /// Drops every observation after `date`.
    pub fn truncate_after(&mut self, date: NaiveDate) {
        if let Some(next) = date.succ_opt() {
            self.obs.split_off(&(next, 0));
        }
    }
}

/// Calendar date `h` days after day-of-year `doy` of `year`.
pub fn target_date(year: i32, doy: u32, h: u32) -> Option<NaiveDate> {
    NaiveDate::from_yo_opt(year, doy)?.checked_add_days(Days::new(h as u64))
}

fn row_target(x: &DesignMatrix, i: usize, cols: (usize, usize, usize)) -> Option<NaiveDate> {
    let r = x.row(i);
    target_date(r[cols.0] as i32, r[cols.1] as u32, r[cols.2] as u32)
}

fn alignment_columns(x: &DesignMatrix) -> Result<(usize, usize, usize, usize)> {
    let col = |role: ColumnRole| {
        x.column_index(role)
            .ok_or_else(|| contract!("design lacks a {} column", role.name()))
    };
    Ok((
        col(ColumnRole::Year)?,
        col(ColumnRole::Day)?,
        col(ColumnRole::Horizon)?,
        col(ColumnRole::Depth)?,
    ))
}

/// Field temperature at the calendar date each row forecasts, or `None`
/// where no observation exists.
pub fn align_field(xbar: &DesignMatrix, field: &FieldSeries) -> Result<Vec<Option<f64>>> {
    let (yc, dc, hc, zc) = alignment_columns(xbar)?;
    Ok((0..xbar.nrows())
        .map(|i| {
            let date = row_target(xbar, i, (yc, dc, hc))?;
            field.get(date, xbar.row(i)[zc] as u32)
        })
        .collect())
}

/// Inputs and responses of the bias GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discrepancies {
    pub x: DesignMatrix,
    pub y: Vec<f64>,
}

impl Discrepancies {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn append(&mut self, other: &Discrepancies) -> Result<()> {
        self.x.append(&other.x)?;
        self.y.extend_from_slice(&other.y);
        Ok(())
    }

    /// The most recent `cap` rows.
    pub fn window(&self, cap: usize) -> Discrepancies {
        if self.len() <= cap {
            return self.clone();
        }
        let idx: Vec<usize> = (self.len() - cap..self.len()).collect();
        Discrepancies {
            x: self.x.select_rows(&idx),
            y: self.y[self.len() - cap..].to_vec(),
        }
    }
}

/// Field minus surrogate mean at every row of `xbar` with an aligned
/// observation.
pub fn build_discrepancies(
    s: &HetSurrogate,
    xbar: &DesignMatrix,
    field: &FieldSeries,
) -> Result<Discrepancies> {
    let aligned = align_field(xbar, field)?;
    let keep: Vec<usize> = (0..aligned.len())
        .filter(|&i| aligned[i].is_some())
        .collect();
    if keep.is_empty() {
        return Err(Error::Data(
            "no surrogate inputs align with a field observation".into(),
        ));
    }
    let x = xbar.select_rows(&keep);
    let mu = s.mean_gp.predict(&x, VarianceScale::Ci)?.mean;
    let y = keep
        .iter()
        .zip(&mu)
        .map(|(&i, m)| aligned[i].unwrap() - m)
        .collect();
    Ok(Discrepancies { x, y })
}

/// Homoskedastic GP on discrepancies.
#[derive(Debug, Clone)]
pub struct BiasModel {
    pub gp: Gp,
}

pub fn fit_bias(
    disc: &Discrepancies,
    bounds: &HyperBounds,
    seed: u64,
    opts: &FitOptions,
    warm: Option<&Hyperparams>,
) -> Result<BiasModel> {
    if disc.len() < 10 {
        return Err(contract!(
            "bias model needs at least 10 discrepancies, got {}",
            disc.len()
        ));
    }
    let d = disc.window(BIAS_WINDOW_CAP);
    Ok(BiasModel {
        gp: Gp::fit(&d.x, &d.y, bounds, seed, opts, warm)?,
    })
}

/// Rebuilds a bias model on `disc` with fixed hyperparameters.
pub fn condition_bias(
    disc: &Discrepancies,
    hp: Hyperparams,
    opts: &FitOptions,
) -> Result<BiasModel> {
    let d = disc.window(BIAS_WINDOW_CAP);
    Ok(BiasModel {
        gp: Gp::condition(d.x, &d.y, hp, opts)?,
    })
}

/// Surrogate mean plus bias mean; surrogate CI variance plus bias PI variance.
pub fn predict_gpbc(
    s: &HetSurrogate,
    b: &BiasModel,
    xnew: &DesignMatrix,
) -> Result<PredictiveMoments> {
    s.mean_gp.inputs().check_roles_match(b.gp.inputs())?;
    let sk = s.predict(xnew, SkMode::Ci)?;
    let bias = b.gp.predict(xnew, VarianceScale::Pi)?;
    let mean = sk.mean.iter().zip(&bias.mean).map(|(a, b)| a + b).collect();
    let var = sk.var.iter().zip(&bias.var).map(|(a, b)| a + b).collect();
    Ok(PredictiveMoments {
        mean,
        var,
        scale: VarianceScale::Pi,
    })
}
