//! Synthetic lake campaign: a known temperature truth, noisy sensor readings
//! of it, and a biased, spread-out ensemble simulator forecasting it.
//!
//! Every random draw comes from a counter-based ChaCha stream keyed by the
//! date it belongs to, so any date can be regenerated on its own and parallel
//! generation gives the same bytes as serial generation.

use std::f64::consts::PI;

use chrono::{Datelike, Days, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::biascorrect::FieldSeries;
use crate::campaign::{Campaign, EnsembleDay, EnsembleSource, TruthSource};
use crate::error::{Error, Result};

const ENSEMBLE_STREAM: u64 = 1 << 32;
const FIELD_STREAM: u64 = 2 << 32;
const ANOMALY_STREAM: u64 = 3;
const ANOMALY_TERMS: usize = 6;
/// Field data start this many days before the first reference date.
pub const FIELD_LEAD_DAYS: u64 = 7;

/// Simulator bias `offset + seasonal_amp·sin(2πt/365)·(h/H) + depth_slope·d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub offset: f64,
    pub seasonal_amp: f64,
    pub depth_slope: f64,
}

/// A smooth warm anomaly `amplitude·sin²(π·s/days)` over `days` days from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmSpell {
    pub start: NaiveDate,
    pub days: u32,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub start_year: i32,
    pub n_years: u32,
    pub n_depths: u32,
    pub n_horizons: u32,
    pub n_ensemble: u32,
    /// Surface annual mean [°C].
    pub base_temp: f64,
    /// Cooling per metre of depth [°C/m].
    pub depth_gradient: f64,
    pub seasonal_amp: f64,
    /// Exponential damping of seasonal and anomaly signals per metre.
    pub depth_damping: f64,
    /// Standard deviation of the smooth multi-week anomaly [°C].
    pub anomaly_sd: f64,
    /// Member deviation sd per √day of horizon at the surface [°C].
    pub spread_growth: f64,
    /// Exponential decay of member spread per metre.
    pub spread_depth_decay: f64,
    /// Member spread relative to `spread_growth`.
    pub spread_scale: f64,
    /// Shared forecast error relative to `spread_growth`. With `spread_scale`
    /// equal to it the ensemble is calibrated; 0 centers the ensemble on
    /// truth plus bias.
    pub error_scale: f64,
    pub bias: BiasSpec,
    pub obs_noise_sd: f64,
    pub warm_spell: Option<WarmSpell>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            start_year: 2021,
            n_years: 2,
            n_depths: 10,
            n_horizons: 30,
            n_ensemble: 31,
            base_temp: 14.0,
            depth_gradient: 0.6,
            seasonal_amp: 9.0,
            depth_damping: 0.15,
            anomaly_sd: 1.5,
            spread_growth: 0.3,
            spread_depth_decay: 0.2,
            spread_scale: 1.0,
            error_scale: 1.0,
            bias: BiasSpec {
                offset: -1.0,
                seasonal_amp: 2.0,
                depth_slope: 0.0,
            },
            obs_noise_sd: 0.5,
            warm_spell: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_years,
            self.n_depths,
            self.n_horizons,
            self.n_ensemble,
        ];
        if counts.contains(&0) {
            return Err(Error::Config(
                "simulator counts (years, depths, horizons, members) must be at least 1".into(),
            ));
        }
        let sds = [
            self.anomaly_sd,
            self.spread_growth,
            self.spread_scale,
            self.error_scale,
            self.obs_noise_sd,
        ];
        if sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config(
                "simulator spreads and noise levels must be finite and non-negative".into(),
            ));
        }
        let reals = [
            self.base_temp,
            self.depth_gradient,
            self.seasonal_amp,
            self.depth_damping,
            self.spread_depth_decay,
            self.bias.offset,
            self.bias.seasonal_amp,
            self.bias.depth_slope,
        ];
        if reals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("simulator parameters must be finite".into()));
        }
        if let Some(w) = &self.warm_spell {
            if w.days == 0 || !w.amplitude.is_finite() {
                return Err(Error::Config(
                    "warm spell needs a positive length and finite amplitude".into(),
                ));
            }
        }
        if NaiveDate::from_yo_opt(self.start_year, 1).is_none()
            || NaiveDate::from_yo_opt(self.start_year + self.n_years as i32, 1).is_none()
        {
            return Err(Error::Config(format!(
                "start year {} out of range",
                self.start_year
            )));
        }
        Ok(())
    }
}

/// Deterministic generator for one configured campaign.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SimConfig,
    /// (amplitude, period in days, phase) per anomaly term.
    anomaly: Vec<(f64, f64, f64)>,
    first_ref: NaiveDate,
    last_ref: NaiveDate,
}

/// Generated temperatures carry six decimals, matching the CSV format.
fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn day_index(d: NaiveDate) -> u64 {
    d.num_days_from_ce() as u64
}

impl Simulator {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, ANOMALY_STREAM);
        // Equal-power terms whose sum has standard deviation `anomaly_sd`.
        let amp = cfg.anomaly_sd * (2.0 / ANOMALY_TERMS as f64).sqrt();
        let anomaly = (0..ANOMALY_TERMS)
            .map(|_| {
                (
                    amp,
                    rng.random_range(25.0..150.0),
                    rng.random_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let first_ref = NaiveDate::from_yo_opt(cfg.start_year, 1).unwrap();
        let last_ref = NaiveDate::from_yo_opt(cfg.start_year + cfg.n_years as i32, 1)
            .unwrap()
            .pred_opt()
            .unwrap();
        Ok(Self {
            cfg,
            anomaly,
            first_ref,
            last_ref,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn ref_dates(&self) -> Vec<NaiveDate> {
        self.first_ref
            .iter_days()
            .take_while(|d| *d <= self.last_ref)
            .collect()
    }

    pub fn first_ref(&self) -> NaiveDate {
        self.first_ref
    }

    pub fn last_ref(&self) -> NaiveDate {
        self.last_ref
    }

    /// Inclusive range of dates with field data.
    pub fn field_window(&self) -> (NaiveDate, NaiveDate) {
        (
            self.first_ref - Days::new(FIELD_LEAD_DAYS),
            self.last_ref + Days::new(self.cfg.n_horizons as u64),
        )
    }

    fn check_depth(&self, depth: u32) -> Result<()> {
        if depth >= self.cfg.n_depths {
            return Err(Error::Data(format!(
                "depth {depth} outside 0..{}",
                self.cfg.n_depths
            )));
        }
        Ok(())
    }

    /// Anomaly signal at the surface (before depth damping).
    pub fn anomaly(&self, date: NaiveDate) -> f64 {
        let s = day_index(date) as f64;
        let mut a: f64 = self
            .anomaly
            .iter()
            .map(|&(amp, period, phase)| amp * (2.0 * PI * s / period + phase).sin())
            .sum();
        if let Some(w) = &self.cfg.warm_spell {
            let k = (date - w.start).num_days();
            if k >= 0 && k <= w.days as i64 {
                a += w.amplitude * (PI * k as f64 / w.days as f64).sin().powi(2);
            }
        }
        a
    }

    fn truth_unchecked(&self, date: NaiveDate, depth: u32) -> f64 {
        let c = &self.cfg;
        let d = depth as f64;
        let season = c.seasonal_amp * (2.0 * PI * (date.ordinal() as f64 - 105.0) / 365.25).sin();
        c.base_temp - c.depth_gradient * d
            + (-c.depth_damping * d).exp() * (season + self.anomaly(date))
    }

    /// Noiseless temperature used to generate the campaign.
    pub fn truth(&self, date: NaiveDate, depth: u32) -> Result<f64> {
        self.check_depth(depth)?;
        let (lo, hi) = self.field_window();
        if date < lo || date > hi {
            return Err(Error::Data(format!(
                "{date} outside the simulated window {lo}..{hi}"
            )));
        }
        Ok(self.truth_unchecked(date, depth))
    }

    /// Injected simulator bias at reference day-of-year `t`, depth and horizon.
    pub fn bias(&self, t: u32, depth: u32, h: u32) -> f64 {
        let b = &self.cfg.bias;
        b.offset
            + b.seasonal_amp
                * (2.0 * PI * t as f64 / 365.0).sin()
                * (h as f64 / self.cfg.n_horizons as f64)
            + b.depth_slope * depth as f64
    }

    /// Sd of one member's deviation at horizon `h` and depth `d`.
    pub fn member_sd(&self, h: u32, depth: u32) -> f64 {
        self.cfg.spread_growth
            * (h as f64).sqrt()
            * (-self.cfg.spread_depth_decay * depth as f64).exp()
    }

    pub fn ensemble_for(&self, ref_date: NaiveDate) -> Result<EnsembleDay> {
        if ref_date < self.first_ref || ref_date > self.last_ref {
            return Err(Error::Data(format!("no simulated ensemble for {ref_date}")));
        }
        let c = &self.cfg;
        let (nh, nd, nm) = (c.n_horizons, c.n_depths, c.n_ensemble);
        let mut rng = stream(c.seed, ENSEMBLE_STREAM + day_index(ref_date));
        // Random walks over horizon; path 0 is the shared forecast error.
        let mut walks = vec![0.0; (nm as usize + 1) * nh as usize];
        for k in 0..=nm as usize {
            let mut acc = 0.0;
            for h in 0..nh as usize {
                acc += rng.sample::<f64, _>(StandardNormal);
                walks[k * nh as usize + h] = acc;
            }
        }
        let t = ref_date.ordinal();
        let mut values = Vec::with_capacity((nh * nd * nm) as usize);
        for h in 1..=nh {
            let target = ref_date + Days::new(h as u64);
            for d in 0..nd {
                let center = self.truth_unchecked(target, d) + self.bias(t, d, h);
                let sd = c.spread_growth * (-c.spread_depth_decay * d as f64).exp();
                let common = walks[(h - 1) as usize];
                for k in 1..=nm as usize {
                    let own = walks[k * nh as usize + (h - 1) as usize];
                    values.push(round6(center + sd * (c.spread_scale * own - c.error_scale * common)));
                }
            }
        }
        EnsembleDay::new(ref_date, nh, nd, nm, values)
    }

    /// Noisy sensor readings on one date, all depths.
    pub fn field_on(&self, date: NaiveDate) -> Vec<(u32, f64)> {
        let (lo, hi) = self.field_window();
        if date < lo || date > hi {
            return Vec::new();
        }
        let mut rng = stream(self.cfg.seed, FIELD_STREAM + day_index(date));
        (0..self.cfg.n_depths)
            .map(|d| {
                let e: f64 = rng.sample(StandardNormal);
                (d, round6(self.truth_unchecked(date, d) + self.cfg.obs_noise_sd * e))
            })
            .collect()
    }

    pub fn field(&self) -> FieldSeries {
        let (lo, hi) = self.field_window();
        let mut f = FieldSeries::new();
        for date in lo.iter_days().take_while(|d| *d <= hi) {
            for (d, v) in self.field_on(date) {
                f.insert(date, d, v).expect("generated keys are unique");
            }
        }
        f
    }
}

impl EnsembleSource for Simulator {
    fn ensemble(&self, ref_date: NaiveDate) -> Result<Option<EnsembleDay>> {
        if ref_date < self.first_ref || ref_date > self.last_ref {
            return Ok(None);
        }
        self.ensemble_for(ref_date).map(Some)
    }
}

impl TruthSource for Simulator {
    fn truth(&self, date: NaiveDate) -> Result<Vec<(u32, f64)>> {
        Ok(self.field_on(date))
    }
}

/// All ensembles and field data of the campaign.
pub fn generate_campaign(cfg: &SimConfig) -> Result<Campaign> {
    let sim = Simulator::new(cfg.clone())?;
    let days: Vec<EnsembleDay> = sim
        .ref_dates()
        .into_par_iter()
        .map(|r| sim.ensemble_for(r))
        .collect::<Result<_>>()?;
    Ok(Campaign {
        ensembles: days.into_iter().map(|d| (d.ref_date, d)).collect(),
        field: sim.field(),
    })
}
