//! The daily forecasting loop: initial training, per-day ingestion and
//! refitting, and forecast emission for the five comparator models.

use std::collections::BTreeMap;

use chrono::{Datelike, Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::biascorrect::{
    build_discrepancies, condition_bias, fit_bias, predict_gpbc, BiasModel, Discrepancies,
    FieldSeries,
};
use crate::campaign::{EnsembleDay, EnsembleSource, TruthSource};
use crate::covkernel::{ColumnRole, DesignMatrix, Hyperparams};
use crate::densegp::VarianceScale;
use crate::error::{contract, Error, Result};
use crate::gp::{FitOptions, Gp};
use crate::metrics::interval90;
use crate::optim::{HyperBounds, OptimizerSettings};
use crate::repstats::ReplicateSet;
use crate::surrogate::{condition_surrogate, fit_surrogate, HetSurrogate, SkMode};

/// Days averaged into φ.
pub const PHI_WINDOW: u64 = 5;
/// Longest gap bridged by carrying an observation forward.
pub const PHI_MAX_CARRY: u64 = 3;
/// Field data read before the first training reference date.
pub const FIELD_LOOKBACK: u64 = PHI_WINDOW + PHI_MAX_CARRY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelTag {
    Gpbc,
    GpbcNophi,
    Gpglm,
    Ogp,
    GlmRaw,
}

impl ModelTag {
    pub const ALL: [ModelTag; 5] = [
        ModelTag::Gpbc,
        ModelTag::GpbcNophi,
        ModelTag::Gpglm,
        ModelTag::Ogp,
        ModelTag::GlmRaw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Gpbc => "GPBC",
            ModelTag::GpbcNophi => "GPBC_NOPHI",
            ModelTag::Gpglm => "GPGLM",
            ModelTag::Ogp => "OGP",
            ModelTag::GlmRaw => "GLM_RAW",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown model tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub model: ModelTag,
    pub ref_date: NaiveDate,
    pub horizon: u32,
    pub depth: u32,
    pub mean: f64,
    pub sd: f64,
    pub lo90: f64,
    pub hi90: f64,
    pub truth: Option<f64>,
}

impl ForecastRecord {
    pub fn new(
        model: ModelTag,
        ref_date: NaiveDate,
        horizon: u32,
        depth: u32,
        mean: f64,
        sd: f64,
    ) -> Self {
        let (lo90, hi90) = interval90(mean, sd);
        Self {
            model,
            ref_date,
            horizon,
            depth,
            mean,
            sd,
            lo90,
            hi90,
            truth: None,
        }
    }

    pub fn target_date(&self) -> NaiveDate {
        self.ref_date + Days::new(self.horizon as u64)
    }
}

fn observed_or_carried(field: &FieldSeries, day: NaiveDate, depth: u32) -> Option<f64> {
    (0..=PHI_MAX_CARRY).find_map(|back| field.get(day.checked_sub_days(Days::new(back))?, depth))
}

/// Mean over the five days ending on `date` of the depth-0/depth-1 midpoint.
/// A missing reading is replaced by the latest one at most three days older.
pub fn compute_phi(field: &FieldSeries, date: NaiveDate) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..PHI_WINDOW {
        let day = date - Days::new(i);
        let pair = [0, 1].map(|d| observed_or_carried(field, day, d));
        match pair {
            [Some(a), Some(b)] => sum += 0.5 * (a + b),
            _ => {
                return Err(Error::Data(format!(
                    "no near-surface observation within {PHI_MAX_CARRY} days of {day} for phi on {date}"
                )))
            }
        }
    }
    Ok(sum / PHI_WINDOW as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub seed: u64,
    /// Whether GPBC and GPGLM take φ as an input.
    pub with_phi: bool,
    /// Daily steps between hyperparameter re-estimations.
    pub refit_every: usize,
    /// Keep every `train_stride`-th reference date of the training window.
    pub train_stride: usize,
    /// Settings for the initial fits.
    pub fit: FitOptions,
    /// Settings for warm-started refits.
    pub refit: FitOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let fit = FitOptions::default();
        let mut refit = fit.clone();
        refit.dense = OptimizerSettings {
            restarts: 1,
            max_evals: 120,
            ..OptimizerSettings::default()
        };
        refit.vecchia.refine = OptimizerSettings {
            restarts: 1,
            max_evals: 50,
            ftol: 1e-5,
            xtol: 1e-2,
            initial_step: 0.2,
        };
        refit.vecchia.opt_cap = 3000;
        Self {
            seed: 1,
            with_phi: true,
            refit_every: 7,
            train_stride: 1,
            fit,
            refit,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refit_every == 0 || self.train_stride == 0 {
            return Err(Error::Config(
                "refit cadence and training stride must be at least 1".into(),
            ));
        }
        for f in [&self.fit, &self.refit] {
            if f.vecchia.m == 0 || f.vecchia.pilot_size < 3 || f.vecchia.opt_cap < 3 {
                return Err(Error::Config(
                    "Vecchia m must be ≥ 1 and subsample sizes ≥ 3".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Climatological model on field data: day of year and depth, with
/// same-day observations from different years treated as replicates.
#[derive(Debug, Clone)]
pub struct Ogp {
    pub mean_gp: Gp,
    pub var_gp: Option<Gp>,
    /// Field data through this date were used.
    pub until: NaiveDate,
}

/// Minimum number of replicated (day, depth) groups for a variance GP.
const OGP_MIN_VAR_GROUPS: usize = 10;

struct OgpData {
    x: DesignMatrix,
    mean: Vec<f64>,
    var_x: DesignMatrix,
    sd: Vec<f64>,
}

fn ogp_data(field: &FieldSeries, until: NaiveDate) -> Result<OgpData> {
    let mut groups: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for (date, d, t) in field.iter().filter(|o| o.0 <= until) {
        groups.entry((date.ordinal(), d)).or_default().push(t);
    }
    if groups.len() < 3 {
        return Err(Error::Data(
            "too little field data for the climatological model".into(),
        ));
    }
    let roles = vec![ColumnRole::Day, ColumnRole::Depth];
    let (mut xs, mut mean, mut vx, mut sd) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (&(doy, d), v) in &groups {
        let k = v.len() as f64;
        let m = v.iter().sum::<f64>() / k;
        xs.extend([doy as f64, d as f64]);
        mean.push(m);
        if v.len() >= 2 {
            vx.extend([doy as f64, d as f64]);
            sd.push((v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt());
        }
    }
    Ok(OgpData {
        x: DesignMatrix::new(roles.clone(), xs)?,
        mean,
        var_x: DesignMatrix::new(roles, vx)?,
        sd,
    })
}

fn ogp_design(doys: &[(u32, u32)]) -> DesignMatrix {
    let vals = doys
        .iter()
        .flat_map(|&(t, d)| [t as f64, d as f64])
        .collect();
    DesignMatrix::new(vec![ColumnRole::Day, ColumnRole::Depth], vals).expect("finite grid")
}

impl Ogp {
    pub fn fit(field: &FieldSeries, until: NaiveDate, seed: u64, opts: &FitOptions) -> Result<Ogp> {
        let data = ogp_data(field, until)?;
        let bounds = HyperBounds::default_for(&data.x);
        let mean_gp = Gp::fit(&data.x, &data.mean, &bounds, seed, opts, None)?;
        let var_gp = if data.sd.len() >= OGP_MIN_VAR_GROUPS {
            let vb = HyperBounds::default_for(&data.var_x);
            Some(Gp::fit(
                &data.var_x,
                &data.sd,
                &vb,
                seed.wrapping_add(1),
                opts,
                None,
            )?)
        } else {
            None
        };
        Ok(Ogp {
            mean_gp,
            var_gp,
            until,
        })
    }

    pub fn condition(
        field: &FieldSeries,
        until: NaiveDate,
        mean_hp: Hyperparams,
        var_hp: Option<Hyperparams>,
        opts: &FitOptions,
    ) -> Result<Ogp> {
        let data = ogp_data(field, until)?;
        let mean_gp = Gp::condition(data.x, &data.mean, mean_hp, opts)?;
        let var_gp = match var_hp {
            Some(hp) => Some(Gp::condition(data.var_x, &data.sd, hp, opts)?),
            None => None,
        };
        Ok(Ogp {
            mean_gp,
            var_gp,
            until,
        })
    }

    /// Mean and variance at `(day of year, depth)` pairs.
    pub fn predict(&self, at: &[(u32, u32)]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = ogp_design(at);
        match &self.var_gp {
            Some(v) => {
                let m = self.mean_gp.predict(&x, VarianceScale::Ci)?;
                let s = v.predict(&x, VarianceScale::Ci)?;
                let var = m
                    .var
                    .iter()
                    .zip(s.mean.iter().zip(&s.var))
                    .map(|(mv, (mu, sv))| mv + (mu + Z90_95 * sv.sqrt()).max(0.0).powi(2))
                    .collect();
                Ok((m.mean, var))
            }
            None => {
                let m = self.mean_gp.predict(&x, VarianceScale::Pi)?;
                Ok((m.mean, m.var))
            }
        }
    }
}

const Z90_95: f64 = crate::surrogate::Q95_MULT;

/// Surrogate, discrepancies and bias model sharing one input space.
#[derive(Debug, Clone)]
pub struct Stack {
    pub with_phi: bool,
    pub bounds: HyperBounds,
    pub surrogate: HetSurrogate,
    pub disc: Discrepancies,
    pub bias: BiasModel,
}

/// Hyperparameters of a stack, used for warm starts and snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackParams {
    pub mean: Hyperparams,
    pub var: Hyperparams,
    pub bias: Hyperparams,
}

impl Stack {
    pub fn params(&self) -> StackParams {
        StackParams {
            mean: self.surrogate.mean_gp.hyperparams().clone(),
            var: self.surrogate.var_gp.hyperparams().clone(),
            bias: self.bias.gp.hyperparams().clone(),
        }
    }
}

/// Everything the engine knows at the start of a reference date.
#[derive(Debug, Clone)]
pub struct Engine {
    pub cfg: EngineConfig,
    /// Reference date of the next forecast. Field data are known through it.
    pub current: NaiveDate,
    pub train_start: NaiveDate,
    pub field: FieldSeries,
    /// Collapsed ensembles with columns (day, depth, horizon, year).
    pub corpus: ReplicateSet,
    /// First corpus row of each reference date.
    pub day_rows: BTreeMap<NaiveDate, usize>,
    pub phi: BTreeMap<NaiveDate, f64>,
    pub main: Stack,
    /// Present when `main` uses φ.
    pub nophi: Option<Stack>,
    pub ogp: Ogp,
    pub n_horizons: u32,
    pub n_depths: u32,
    pub steps: usize,
    pub steps_since_refit: usize,
    pub refits: usize,
}

fn fit_seed(base: u64, refits: usize, tag: u64) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add(refits as u64 * 1_000 + tag)
}

fn ingest_truth(field: &mut FieldSeries, truth: &dyn TruthSource, date: NaiveDate) -> Result<()> {
    for (d, t) in truth.truth(date)? {
        field.insert(date, d, t)?;
    }
    Ok(())
}

fn append_day(
    corpus: &mut ReplicateSet,
    day_rows: &mut BTreeMap<NaiveDate, usize>,
    day: &EnsembleDay,
) -> Result<()> {
    let rs = day.collapse()?;
    day_rows.insert(day.ref_date, corpus.len());
    corpus.xbar.append(&rs.xbar)?;
    corpus.ybar.extend(rs.ybar);
    corpus.s2.extend(rs.s2);
    corpus.counts.extend(rs.counts);
    Ok(())
}

fn ref_date_of(row: &[f64], year_col: usize, day_col: usize) -> NaiveDate {
    NaiveDate::from_yo_opt(row[year_col] as i32, row[day_col] as u32)
        .expect("corpus rows hold valid dates")
}

/// `x` with φ of each row's reference date appended as a column.
fn append_phi(x: &DesignMatrix, phi: &BTreeMap<NaiveDate, f64>) -> Result<DesignMatrix> {
    let (yc, dc) = (
        x.column_index(ColumnRole::Year).unwrap(),
        x.column_index(ColumnRole::Day).unwrap(),
    );
    let col: Vec<f64> = x
        .rows()
        .map(|r| {
            let date = ref_date_of(r, yc, dc);
            phi.get(&date)
                .copied()
                .ok_or_else(|| contract!("no phi recorded for {date}"))
        })
        .collect::<Result<_>>()?;
    x.with_column(ColumnRole::Phi, &col)
}

/// The corpus design for a stack, with φ appended when `with_phi`.
pub(crate) fn stack_design(
    corpus: &ReplicateSet,
    phi: &BTreeMap<NaiveDate, f64>,
    with_phi: bool,
) -> Result<ReplicateSet> {
    let xbar = if with_phi {
        append_phi(&corpus.xbar, phi)?
    } else {
        corpus.xbar.clone()
    };
    Ok(ReplicateSet {
        xbar,
        ybar: corpus.ybar.clone(),
        s2: corpus.s2.clone(),
        counts: corpus.counts.clone(),
    })
}

/// Prediction rows for reference date `r` over all horizons and depths.
fn forecast_design(r: NaiveDate, n_h: u32, n_d: u32, phi: Option<f64>) -> DesignMatrix {
    let mut roles = vec![
        ColumnRole::Day,
        ColumnRole::Depth,
        ColumnRole::Horizon,
        ColumnRole::Year,
    ];
    if phi.is_some() {
        roles.push(ColumnRole::Phi);
    }
    let mut vals = Vec::new();
    for h in 1..=n_h {
        for d in 0..n_d {
            vals.extend([r.ordinal() as f64, d as f64, h as f64, r.year() as f64]);
            if let Some(p) = phi {
                vals.push(p);
            }
        }
    }
    DesignMatrix::new(roles, vals).expect("finite grid")
}

fn fit_stack(
    rs: &ReplicateSet,
    field: &FieldSeries,
    with_phi: bool,
    seed: u64,
    opts: &FitOptions,
) -> Result<Stack> {
    let bounds = HyperBounds::default_for(&rs.xbar);
    let surrogate = fit_surrogate(rs, &bounds, seed, opts, None)?;
    let disc = build_discrepancies(&surrogate, &rs.xbar, field)?;
    let bias = fit_bias(&disc, &bounds, seed.wrapping_add(2), opts, None)?;
    Ok(Stack {
        with_phi,
        bounds,
        surrogate,
        disc,
        bias,
    })
}

impl Engine {
    /// Trains on reference dates in `[train_start, first_forecast)` (every
    /// `train_stride`-th date) with field data through `first_forecast`.
    pub fn initial_train(
        cfg: EngineConfig,
        ensembles: &dyn EnsembleSource,
        truth: &dyn TruthSource,
        train_start: NaiveDate,
        first_forecast: NaiveDate,
    ) -> Result<Engine> {
        cfg.validate()?;
        if first_forecast <= train_start {
            return Err(Error::Data(format!(
                "training window {train_start}..{first_forecast} is empty"
            )));
        }
        let mut field = FieldSeries::new();
        let mut date = train_start - Days::new(FIELD_LOOKBACK);
        while date <= first_forecast {
            ingest_truth(&mut field, truth, date)?;
            date = date.succ_opt().unwrap();
        }

        let mut corpus: Option<ReplicateSet> = None;
        let mut day_rows = BTreeMap::new();
        let mut phi = BTreeMap::new();
        let mut shape = None;
        for r in train_start
            .iter_days()
            .take_while(|d| *d < first_forecast)
            .step_by(cfg.train_stride)
        {
            let Some(day) = ensembles.ensemble(r)? else {
                log::warn!("no ensemble for training date {r}; skipped");
                continue;
            };
            let s = (day.n_horizons, day.n_depths);
            if *shape.get_or_insert(s) != s {
                return Err(Error::Data(format!(
                    "ensemble for {r} has a different horizon/depth grid"
                )));
            }
            if cfg.with_phi {
                phi.insert(r, compute_phi(&field, r)?);
            }
            match corpus.as_mut() {
                Some(c) => append_day(c, &mut day_rows, &day)?,
                None => {
                    day_rows.insert(r, 0);
                    corpus = Some(day.collapse()?);
                }
            }
        }
        let corpus =
            corpus.ok_or_else(|| Error::Data("no ensembles in the training window".into()))?;
        let (n_horizons, n_depths) = shape.unwrap();
        log::info!(
            "training on {} unique inputs from {} reference dates",
            corpus.len(),
            day_rows.len()
        );

        let nophi_rs = stack_design(&corpus, &phi, false)?;
        let (main, nophi) = if cfg.with_phi {
            let rs = stack_design(&corpus, &phi, true)?;
            let main = fit_stack(&rs, &field, true, fit_seed(cfg.seed, 0, 10), &cfg.fit)?;
            let nophi = fit_stack(
                &nophi_rs,
                &field,
                false,
                fit_seed(cfg.seed, 0, 20),
                &cfg.fit,
            )?;
            (main, Some(nophi))
        } else {
            (
                fit_stack(
                    &nophi_rs,
                    &field,
                    false,
                    fit_seed(cfg.seed, 0, 20),
                    &cfg.fit,
                )?,
                None,
            )
        };
        let ogp = Ogp::fit(&field, first_forecast, fit_seed(cfg.seed, 0, 30), &cfg.fit)?;
        Ok(Engine {
            cfg,
            current: first_forecast,
            train_start,
            field,
            corpus,
            day_rows,
            phi,
            main,
            nophi,
            ogp,
            n_horizons,
            n_depths,
            steps: 0,
            steps_since_refit: 0,
            refits: 0,
        })
    }

    fn nophi_stack(&self) -> &Stack {
        self.nophi.as_ref().unwrap_or(&self.main)
    }

    fn stacks(&self) -> Vec<&Stack> {
        std::iter::once(&self.main)
            .chain(self.nophi.as_ref())
            .collect()
    }

    /// Surrogate and bias models re-estimated (`refit`) or re-conditioned on
    /// the given corpus with frozen hyperparameters.
    fn rebuild_stack(
        &self,
        stack: &Stack,
        corpus: &ReplicateSet,
        phi: &BTreeMap<NaiveDate, f64>,
        refit: bool,
        tag: u64,
    ) -> Result<Stack> {
        let rs = stack_design(corpus, phi, stack.with_phi)?;
        let p = stack.params();
        let (surrogate, bias) = if refit {
            let seed = fit_seed(self.cfg.seed, self.refits + 1, tag);
            let opts = &self.cfg.refit;
            let s = fit_surrogate(&rs, &stack.bounds, seed, opts, Some((&p.mean, &p.var)))?;
            let b = fit_bias(
                &stack.disc,
                &stack.bounds,
                seed.wrapping_add(2),
                opts,
                Some(&p.bias),
            )?;
            (s, b)
        } else {
            let opts = &self.cfg.fit;
            (
                condition_surrogate(&rs, p.mean, p.var, opts)?,
                condition_bias(&stack.disc, p.bias, opts)?,
            )
        };
        Ok(Stack {
            with_phi: stack.with_phi,
            bounds: stack.bounds.clone(),
            surrogate,
            disc: stack.disc.clone(),
            bias,
        })
    }

    /// Discrepancy rows whose forecast target is `date`, from the corpus
    /// rows of every reference date `date − h`.
    fn discrepancies_for(&self, stack: &Stack, date: NaiveDate) -> Result<Option<Discrepancies>> {
        let mut rows = Vec::new();
        for h in 1..=self.n_horizons {
            let Some(r) = date.checked_sub_days(Days::new(h as u64)) else {
                continue;
            };
            if let Some(&start) = self.day_rows.get(&r) {
                for d in 0..self.n_depths {
                    rows.push(start + ((h - 1) * self.n_depths + d) as usize);
                }
            }
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let mut x = self.corpus.xbar.select_rows(&rows);
        if stack.with_phi {
            x = append_phi(&x, &self.phi)?;
        }
        match build_discrepancies(&stack.surrogate, &x, &self.field) {
            Ok(d) => Ok(Some(d)),
            Err(Error::Data(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Forecasts from all five models for reference date `r` with the
    /// current fits. `members` supplies the raw ensemble for GLM_RAW.
    pub fn emit(&self, r: NaiveDate, members: &EnsembleDay) -> Result<Vec<ForecastRecord>> {
        let (nh, nd) = (self.n_horizons, self.n_depths);
        if (members.n_horizons, members.n_depths) != (nh, nd) {
            return Err(Error::Data(format!(
                "ensemble for {r} has a different horizon/depth grid"
            )));
        }
        let phi = if self.cfg.with_phi {
            Some(compute_phi(&self.field, r)?)
        } else {
            None
        };
        let x_main = forecast_design(r, nh, nd, phi);
        let x_nophi = forecast_design(r, nh, nd, None);

        let gpbc = predict_gpbc(&self.main.surrogate, &self.main.bias, &x_main)?;
        let nophi = self.nophi_stack();
        let gpbc_nophi = predict_gpbc(&nophi.surrogate, &nophi.bias, &x_nophi)?;
        let gpglm = self.main.surrogate.predict(&x_main, SkMode::Pi)?;
        let targets: Vec<(u32, u32)> = (1..=nh)
            .flat_map(|h| (0..nd).map(move |d| ((r + Days::new(h as u64)).ordinal(), d)))
            .collect();
        let ogp = self.ogp.predict(&targets)?;

        let mut out = Vec::with_capacity(5 * (nh * nd) as usize);
        let cells = || {
            (1..=nh)
                .flat_map(|h| (0..nd).map(move |d| (h, d)))
                .enumerate()
        };
        for (model, mean, var) in [
            (ModelTag::Gpbc, &gpbc.mean, &gpbc.var),
            (ModelTag::GpbcNophi, &gpbc_nophi.mean, &gpbc_nophi.var),
            (ModelTag::Gpglm, &gpglm.mean, &gpglm.var),
            (ModelTag::Ogp, &ogp.0, &ogp.1),
        ] {
            for (i, (h, d)) in cells() {
                out.push(ForecastRecord::new(
                    model,
                    r,
                    h,
                    d,
                    mean[i],
                    var[i].max(0.0).sqrt(),
                ));
            }
        }
        for (_, (h, d)) in cells() {
            let m = members.members(h, d);
            let k = m.len() as f64;
            let mean = m.iter().sum::<f64>() / k;
            let sd = if m.len() > 1 {
                (m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            } else {
                0.0
            };
            out.push(ForecastRecord::new(ModelTag::GlmRaw, r, h, d, mean, sd));
        }
        if out
            .iter()
            .any(|o| !(o.mean.is_finite() && o.sd.is_finite()))
        {
            return Err(Error::Numerical(format!("non-finite forecast on {r}")));
        }
        Ok(out)
    }

    /// One reference date: ingest today's ensemble, update the fits, emit
    /// forecasts, then advance and read the next day's sensor data. On error
    /// the engine is left unchanged.
    pub fn daily_step(
        &mut self,
        ensembles: &dyn EnsembleSource,
        truth: &dyn TruthSource,
    ) -> Result<Vec<ForecastRecord>> {
        let r = self.current;
        let day = ensembles
            .ensemble(r)?
            .ok_or_else(|| Error::Data(format!("no ensemble available for {r}")))?;
        let mut next = self.clone();
        if next.cfg.with_phi {
            next.phi.insert(r, compute_phi(&next.field, r)?);
        }
        append_day(&mut next.corpus, &mut next.day_rows, &day)?;
        let refit = self.steps_since_refit + 1 >= self.cfg.refit_every;
        next.main = next.rebuild_stack(&self.main, &next.corpus, &next.phi, refit, 10)?;
        if let Some(s) = &self.nophi {
            next.nophi = Some(next.rebuild_stack(s, &next.corpus, &next.phi, refit, 20)?);
        }
        if refit {
            next.refits += 1;
            next.steps_since_refit = 0;
            log::info!("refit hyperparameters on {r}");
        } else {
            next.steps_since_refit += 1;
        }
        let records = next.emit(r, &day)?;

        let tomorrow = r
            .succ_opt()
            .ok_or_else(|| Error::Data("date overflow".into()))?;
        ingest_truth(&mut next.field, truth, tomorrow)?;
        next.current = tomorrow;
        next.steps += 1;
        let new_main = next.discrepancies_for(&next.main, tomorrow)?;
        let new_nophi = match &next.nophi {
            Some(s) => next.discrepancies_for(s, tomorrow)?,
            None => None,
        };
        if let Some(d) = new_main {
            next.main.disc.append(&d)?;
        }
        if let (Some(s), Some(d)) = (next.nophi.as_mut(), new_nophi) {
            s.disc.append(&d)?;
        }
        *self = next;
        Ok(records)
    }

    /// Retrospective forecasts for reference dates in `[from, to]` from the
    /// current fits, with field truth attached where known.
    pub fn hindcast(
        &self,
        ensembles: &dyn EnsembleSource,
        from: NaiveDate,
        to: NaiveDate,
    ) -> Result<Vec<ForecastRecord>> {
        if from > to {
            return Err(contract!("hindcast range {from}..{to} is reversed"));
        }
        if from < self.train_start || to >= self.current {
            return Err(Error::Data(format!(
                "hindcast range {from}..{to} outside the training window {}..{}",
                self.train_start,
                self.current - Days::new(1)
            )));
        }
        let mut out = Vec::new();
        for r in from.iter_days().take_while(|d| *d <= to) {
            let day = ensembles
                .ensemble(r)?
                .ok_or_else(|| Error::Data(format!("no ensemble available for {r}")))?;
            let mut recs = self.emit(r, &day)?;
            for rec in &mut recs {
                rec.truth = self.field.get(rec.target_date(), rec.depth);
            }
            out.extend(recs);
        }
        Ok(out)
    }

    pub fn with_phi(&self) -> bool {
        self.cfg.with_phi
    }

    /// Active input roles of the main and no-φ stacks.
    pub fn active_roles(&self) -> Vec<Vec<ColumnRole>> {
        self.stacks()
            .iter()
            .map(|s| s.surrogate.mean_gp.inputs().active_roles())
            .collect()
    }
}

/// Attaches field truth to records whose target date has an observation.
pub fn attach_truth(records: &mut [ForecastRecord], field: &FieldSeries) {
    for r in records {
        r.truth = field.get(r.target_date(), r.depth);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Z90;

    fn d(m: u32, day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2022, m, day).unwrap()
    }

    fn field_with(vals: &[(NaiveDate, u32, f64)]) -> FieldSeries {
        let mut f = FieldSeries::new();
        for &(date, depth, t) in vals {
            f.insert(date, depth, t).unwrap();
        }
        f
    }

    #[test]
    fn phi_of_constant_field() {
        let mut v = Vec::new();
        for i in 0..5 {
            for depth in 0..2 {
                v.push((d(3, 10) - Days::new(i), depth, 10.0));
            }
        }
        assert!((compute_phi(&field_with(&v), d(3, 10)).unwrap() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn phi_averages_daily_midpoints() {
        let mut v = Vec::new();
        // i = 4..0 ↦ depth 0 {1,2,3,4,5}, depth 1 {3,4,5,6,7}.
        for (k, i) in (0..5).rev().enumerate() {
            let day = d(3, 10) - Days::new(i);
            v.push((day, 0, 1.0 + k as f64));
            v.push((day, 1, 3.0 + k as f64));
        }
        assert!((compute_phi(&field_with(&v), d(3, 10)).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn phi_carries_forward_short_gaps_only() {
        let mut v = Vec::new();
        for i in 0..5u64 {
            let day = d(3, 10) - Days::new(i);
            if i != 1 {
                v.push((day, 0, i as f64));
            }
            v.push((day, 1, 10.0 + i as f64));
        }
        // Day 3/9 depth 0 is missing; 3/8 (i = 2) carries forward.
        let mut want = 0.0;
        for i in 0..5u64 {
            let a = if i == 1 { 2.0 } else { i as f64 };
            want += 0.5 * (a + 10.0 + i as f64);
        }
        let got = compute_phi(&field_with(&v), d(3, 10)).unwrap();
        assert!((got - want / 5.0).abs() < 1e-12);

        let only_old = field_with(&[(d(3, 1), 0, 1.0), (d(3, 1), 1, 1.0)]);
        assert!(compute_phi(&only_old, d(3, 10)).is_err());
        assert!(compute_phi(&FieldSeries::new(), d(3, 10)).is_err());
    }

    #[test]
    fn records_satisfy_interval_convention() {
        let r = ForecastRecord::new(ModelTag::Gpbc, d(1, 1), 3, 2, 12.5, 0.8);
        assert_eq!(r.hi90 - r.lo90, 2.0 * Z90 * 0.8);
        assert_eq!(r.target_date(), d(1, 4));
        for m in ModelTag::ALL {
            assert_eq!(ModelTag::parse(m.name()).unwrap(), m);
        }
        assert!(ModelTag::parse("GP").is_err());
    }
}
