//! Run configuration: a flat `key = value` file.
//!
//! ```text
//! # paths are relative to the config file
//! ensemble_csv = data/ensemble.csv
//! field_csv = data/field.csv
//! output_dir = out
//! state_dir = state
//! train_start = 2021-01-01
//! forecast_start = 2022-01-01
//! with_phi = true
//! vecchia_m = 30
//! sim.n_years = 2
//! sim.bias_offset = -1.0
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;

use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::lakesim::{SimConfig, WarmSpell};

/// Largest accepted Vecchia conditioning-set size.
pub const MAX_VECCHIA_M: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ensemble_csv: PathBuf,
    pub field_csv: PathBuf,
    pub output_dir: PathBuf,
    pub state_dir: PathBuf,
    /// First reference date of the training window.
    pub train_start: NaiveDate,
    /// First reference date forecast by the daily loop; training stops the day before.
    pub forecast_start: NaiveDate,
    pub engine: EngineConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        let (train_start, forecast_start) = default_window(&sim);
        Self {
            ensemble_csv: "ensemble.csv".into(),
            field_csv: "field.csv".into(),
            output_dir: "out".into(),
            state_dir: "state".into(),
            train_start,
            forecast_start,
            engine: EngineConfig::default(),
            sim,
        }
    }
}

/// Train from the first simulated day; forecast from the start of the last
/// simulated year, or from mid-year when only one year is simulated.
fn default_window(sim: &SimConfig) -> (NaiveDate, NaiveDate) {
    let start = NaiveDate::from_ymd_opt(sim.start_year, 1, 1).unwrap_or(NaiveDate::MIN);
    let forecast = if sim.n_years >= 2 {
        NaiveDate::from_ymd_opt(sim.start_year + sim.n_years as i32 - 1, 1, 1)
    } else {
        NaiveDate::from_ymd_opt(sim.start_year, 7, 1)
    };
    (start, forecast.unwrap_or(NaiveDate::MAX))
}

fn value<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {v:?} for {key}")))
}

impl RunConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for p in [&mut cfg.ensemble_csv, &mut cfg.field_csv, &mut cfg.output_dir, &mut cfg.state_dir] {
            *p = base.join(&*p);
        }
        let mut seen = BTreeSet::new();
        let mut window = (None, None);
        let mut spell: (Option<NaiveDate>, Option<u32>, Option<f64>) = (None, None, None);
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, v) = content
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line}: duplicate key {key}")));
            }
            let e = &mut cfg.engine;
            let s = &mut cfg.sim;
            match key {
                "ensemble_csv" => cfg.ensemble_csv = base.join(v),
                "field_csv" => cfg.field_csv = base.join(v),
                "output_dir" => cfg.output_dir = base.join(v),
                "state_dir" => cfg.state_dir = base.join(v),
                "train_start" => window.0 = Some(value(key, v, line)?),
                "forecast_start" => window.1 = Some(value(key, v, line)?),
                "with_phi" => e.with_phi = value(key, v, line)?,
                "vecchia_m" => {
                    let m = value(key, v, line)?;
                    e.fit.vecchia.m = m;
                    e.refit.vecchia.m = m;
                }
                "seed" => e.seed = value(key, v, line)?,
                "refit_every" => e.refit_every = value(key, v, line)?,
                "train_stride" => e.train_stride = value(key, v, line)?,
                "sim.seed" => s.seed = value(key, v, line)?,
                "sim.start_year" => s.start_year = value(key, v, line)?,
                "sim.n_years" => s.n_years = value(key, v, line)?,
                "sim.n_depths" => s.n_depths = value(key, v, line)?,
                "sim.n_horizons" => s.n_horizons = value(key, v, line)?,
                "sim.n_ensemble" => s.n_ensemble = value(key, v, line)?,
                "sim.base_temp" => s.base_temp = value(key, v, line)?,
                "sim.depth_gradient" => s.depth_gradient = value(key, v, line)?,
                "sim.seasonal_amp" => s.seasonal_amp = value(key, v, line)?,
                "sim.depth_damping" => s.depth_damping = value(key, v, line)?,
                "sim.anomaly_sd" => s.anomaly_sd = value(key, v, line)?,
                "sim.spread_growth" => s.spread_growth = value(key, v, line)?,
                "sim.spread_depth_decay" => s.spread_depth_decay = value(key, v, line)?,
                "sim.spread_scale" => s.spread_scale = value(key, v, line)?,
                "sim.error_scale" => s.error_scale = value(key, v, line)?,
                "sim.bias_offset" => s.bias.offset = value(key, v, line)?,
                "sim.bias_seasonal_amp" => s.bias.seasonal_amp = value(key, v, line)?,
                "sim.bias_depth_slope" => s.bias.depth_slope = value(key, v, line)?,
                "sim.obs_noise_sd" => s.obs_noise_sd = value(key, v, line)?,
                "sim.warm_spell_start" => spell.0 = Some(value(key, v, line)?),
                "sim.warm_spell_days" => spell.1 = Some(value(key, v, line)?),
                "sim.warm_spell_amplitude" => spell.2 = Some(value(key, v, line)?),
                _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
            }
        }
        cfg.sim.warm_spell = match spell {
            (None, None, None) => None,
            (Some(start), Some(days), Some(amplitude)) => Some(WarmSpell { start, days, amplitude }),
            _ => {
                return Err(Error::Config(
                    "warm spell needs sim.warm_spell_start, sim.warm_spell_days and sim.warm_spell_amplitude".into(),
                ))
            }
        };
        let (ts, fs) = default_window(&cfg.sim);
        cfg.train_start = window.0.unwrap_or(ts);
        cfg.forecast_start = window.1.unwrap_or(fs);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        let paths = [&self.ensemble_csv, &self.field_csv, &self.output_dir, &self.state_dir];
        for (i, a) in paths.iter().enumerate() {
            if paths[i + 1..].contains(a) {
                return Err(Error::Config(format!("path {} is used twice", a.display())));
            }
        }
        if self.forecast_start <= self.train_start {
            return Err(Error::Config(format!(
                "forecast_start {} must follow train_start {}",
                self.forecast_start, self.train_start
            )));
        }
        let m = self.engine.fit.vecchia.m;
        if !(1..=MAX_VECCHIA_M).contains(&m) {
            return Err(Error::Config(format!("vecchia_m must be in 1..={MAX_VECCHIA_M}, got {m}")));
        }
        self.engine.validate()?;
        self.sim.validate()
    }

    /// Renders every key; parsing the result with the same base reproduces `self`
    /// when its paths are relative.
    pub fn to_text(&self) -> String {
        let e = &self.engine;
        let s = &self.sim;
        let mut out = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("ensemble_csv", &self.ensemble_csv.display());
        kv("field_csv", &self.field_csv.display());
        kv("output_dir", &self.output_dir.display());
        kv("state_dir", &self.state_dir.display());
        kv("train_start", &self.train_start);
        kv("forecast_start", &self.forecast_start);
        kv("with_phi", &e.with_phi);
        kv("vecchia_m", &e.fit.vecchia.m);
        kv("seed", &e.seed);
        kv("refit_every", &e.refit_every);
        kv("train_stride", &e.train_stride);
        kv("sim.seed", &s.seed);
        kv("sim.start_year", &s.start_year);
        kv("sim.n_years", &s.n_years);
        kv("sim.n_depths", &s.n_depths);
        kv("sim.n_horizons", &s.n_horizons);
        kv("sim.n_ensemble", &s.n_ensemble);
        kv("sim.base_temp", &s.base_temp);
        kv("sim.depth_gradient", &s.depth_gradient);
        kv("sim.seasonal_amp", &s.seasonal_amp);
        kv("sim.depth_damping", &s.depth_damping);
        kv("sim.anomaly_sd", &s.anomaly_sd);
        kv("sim.spread_growth", &s.spread_growth);
        kv("sim.spread_depth_decay", &s.spread_depth_decay);
        kv("sim.spread_scale", &s.spread_scale);
        kv("sim.error_scale", &s.error_scale);
        kv("sim.bias_offset", &s.bias.offset);
        kv("sim.bias_seasonal_amp", &s.bias.seasonal_amp);
        kv("sim.bias_depth_slope", &s.bias.depth_slope);
        kv("sim.obs_noise_sd", &s.obs_noise_sd);
        if let Some(w) = &s.warm_spell {
            kv("sim.warm_spell_start", &w.start);
            kv("sim.warm_spell_days", &w.days);
            kv("sim.warm_spell_amplitude", &w.amplitude);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_resolves_paths() {
        let text = "# demo\nensemble_csv = data/e.csv  # inline\nwith_phi = false\nvecchia_m = 12\nsim.n_years = 1\n\nsim.bias_offset = -2.5\n";
        let c = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(c.ensemble_csv, PathBuf::from("/cfg/data/e.csv"));
        assert_eq!(c.field_csv, PathBuf::from("/cfg/field.csv"));
        assert!(!c.engine.with_phi);
        assert_eq!((c.engine.fit.vecchia.m, c.engine.refit.vecchia.m), (12, 12));
        assert_eq!(c.sim.bias.offset, -2.5);
        assert_eq!(c.forecast_start, NaiveDate::from_ymd_opt(2021, 7, 1).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let base = Path::new(".");
        for (text, needle) in [
            ("colour = blue\n", "unknown key colour"),
            ("seed = 1\nseed = 2\n", "duplicate key"),
            ("seed = one\n", "invalid value"),
            ("with_phi\n", "expected key = value"),
            ("vecchia_m = 0\n", "vecchia_m"),
            ("field_csv = a.csv\nensemble_csv = a.csv\n", "used twice"),
            ("sim.n_years = 0\n", "at least 1"),
            ("train_start = 2022-01-01\nforecast_start = 2021-06-01\n", "must follow"),
            ("sim.warm_spell_days = 10\n", "warm spell"),
        ] {
            let err = RunConfig::parse(text, base).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}");
            assert!(err.to_string().contains(needle), "{text}: {err}");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.sim.warm_spell = Some(WarmSpell {
            start: NaiveDate::from_ymd_opt(2022, 6, 1).unwrap(),
            days: 20,
            amplitude: 4.5,
        });
        c.engine.with_phi = false;
        c.sim.spread_scale = 0.5;
        let base = Path::new("");
        assert_eq!(RunConfig::parse(&c.to_text(), base).unwrap(), c);
    }
}
