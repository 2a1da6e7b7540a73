//! Ensemble and sensor data as the engine consumes them.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::biascorrect::FieldSeries;
use crate::covkernel::{ColumnRole, DesignMatrix};
use crate::error::{contract, Error, Result};
use crate::repstats::{collapse, ReplicateSet};

/// One reference date's ensemble: `values[((h-1)·depths + d)·members + k]`
/// for horizon `h ≥ 1`, depth `d` and member `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDay {
    pub ref_date: NaiveDate,
    pub n_horizons: u32,
    pub n_depths: u32,
    pub n_members: u32,
    pub values: Vec<f64>,
}

impl EnsembleDay {
    pub fn new(
        ref_date: NaiveDate,
        n_horizons: u32,
        n_depths: u32,
        n_members: u32,
        values: Vec<f64>,
    ) -> Result<Self> {
        let want = (n_horizons * n_depths * n_members) as usize;
        if values.len() != want {
            return Err(contract!(
                "ensemble for {ref_date} has {} values, expected {want}",
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite ensemble value on {ref_date}"
            )));
        }
        Ok(Self {
            ref_date,
            n_horizons,
            n_depths,
            n_members,
            values,
        })
    }

    /// Members at horizon `h` (1-based) and depth `d`.
    pub fn members(&self, h: u32, d: u32) -> &[f64] {
        let k = self.n_members as usize;
        let start = (((h - 1) * self.n_depths + d) as usize) * k;
        &self.values[start..start + k]
    }

    /// Raw rows `(day, depth, horizon, year, member)` with responses.
    pub fn raw_design(&self) -> (DesignMatrix, Vec<f64>) {
        let (t, year) = (self.ref_date.ordinal() as f64, self.ref_date.year() as f64);
        let mut vals = Vec::with_capacity(self.values.len() * 5);
        for h in 1..=self.n_horizons {
            for d in 0..self.n_depths {
                for k in 0..self.n_members {
                    vals.extend([t, d as f64, h as f64, year, k as f64]);
                }
            }
        }
        let x = DesignMatrix::new(raw_roles(), vals).expect("grid values are finite");
        (x, self.values.clone())
    }

    pub fn collapse(&self) -> Result<ReplicateSet> {
        let (x, y) = self.raw_design();
        collapse(&x, &y)
    }
}

pub fn raw_roles() -> Vec<ColumnRole> {
    vec![
        ColumnRole::Day,
        ColumnRole::Depth,
        ColumnRole::Horizon,
        ColumnRole::Year,
        ColumnRole::Member,
    ]
}

/// Supplies the ensemble issued on a reference date.
pub trait EnsembleSource {
    fn ensemble(&self, ref_date: NaiveDate) -> Result<Option<EnsembleDay>>;
}

/// Supplies sensor observations for one calendar date.
pub trait TruthSource {
    fn truth(&self, date: NaiveDate) -> Result<Vec<(u32, f64)>>;
}

/// Fully materialized ensembles and field data.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Campaign {
    pub ensembles: BTreeMap<NaiveDate, EnsembleDay>,
    pub field: FieldSeries,
}

impl Campaign {
    pub fn ref_dates(&self) -> Vec<NaiveDate> {
        self.ensembles.keys().copied().collect()
    }
}

impl EnsembleSource for Campaign {
    fn ensemble(&self, ref_date: NaiveDate) -> Result<Option<EnsembleDay>> {
        Ok(self.ensembles.get(&ref_date).cloned())
    }
}

impl TruthSource for Campaign {
    fn truth(&self, date: NaiveDate) -> Result<Vec<(u32, f64)>> {
        Ok(self.field.on(date).collect())
    }
}

impl TruthSource for FieldSeries {
    fn truth(&self, date: NaiveDate) -> Result<Vec<(u32, f64)>> {
        Ok(self.on(date).collect())
    }
}
