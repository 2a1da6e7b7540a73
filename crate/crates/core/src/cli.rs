//! Command implementations behind the `lakecast` binary.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;

use crate::biascorrect::FieldSeries;
use crate::config::RunConfig;
use crate::covkernel::Hyperparams;
use crate::engine::{attach_truth, Engine, ForecastRecord};
use crate::error::{Error, Result};
use crate::io;
use crate::lakesim::generate_campaign;
use crate::metrics::{aggregate, GroupBy, ScoreRow};
use crate::persist::{self, DirLock};

pub const STATE_FILE: &str = "state.json";
pub const MODELS_FILE: &str = "models.json";
pub const FORECASTS_FILE: &str = "forecasts.csv";
pub const HINDCAST_FILE: &str = "hindcast.csv";
pub const SCORES_FILE: &str = "scores.csv";

pub fn state_path(cfg: &RunConfig) -> PathBuf {
    cfg.state_dir.join(STATE_FILE)
}

pub fn forecasts_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(FORECASTS_FILE)
}

pub fn scores_path(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(SCORES_FILE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub ref_dates: usize,
    pub ensemble_rows: usize,
    pub field_rows: usize,
}

/// Writes the simulated ensemble and field files.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateSummary> {
    let camp = generate_campaign(&cfg.sim)?;
    io::write_ensembles(&cfg.ensemble_csv, camp.ensembles.values())?;
    io::write_field(&cfg.field_csv, &camp.field)?;
    Ok(SimulateSummary {
        ref_dates: camp.ensembles.len(),
        ensemble_rows: camp.ensembles.values().map(|d| d.values.len()).sum(),
        field_rows: camp.field.len(),
    })
}

/// Hyperparameters of every fitted GP, for inspection.
#[derive(Debug, Serialize)]
struct ModelSummary<'a> {
    current: NaiveDate,
    training_rows: usize,
    stacks: Vec<StackSummary<'a>>,
    ogp_mean: &'a Hyperparams,
    ogp_var: Option<&'a Hyperparams>,
}

#[derive(Debug, Serialize)]
struct StackSummary<'a> {
    with_phi: bool,
    surrogate_mean: &'a Hyperparams,
    surrogate_var: &'a Hyperparams,
    bias: &'a Hyperparams,
    discrepancies: usize,
}

fn write_models(path: &Path, e: &Engine) -> Result<()> {
    let stacks = std::iter::once(&e.main)
        .chain(e.nophi.as_ref())
        .map(|s| StackSummary {
            with_phi: s.with_phi,
            surrogate_mean: s.surrogate.mean_gp.hyperparams(),
            surrogate_var: s.surrogate.var_gp.hyperparams(),
            bias: s.bias.gp.hyperparams(),
            discrepancies: s.disc.len(),
        })
        .collect();
    let summary = ModelSummary {
        current: e.current,
        training_rows: e.corpus.len(),
        stacks,
        ogp_mean: e.ogp.mean_gp.hyperparams(),
        ogp_var: e.ogp.var_gp.as_ref().map(|g| g.hyperparams()),
    };
    let text = serde_json::to_string_pretty(&summary).map_err(|err| Error::State(err.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|err| Error::io(path, err))
}

/// Initial training; persists the engine snapshot and a model summary.
pub fn cmd_train(cfg: &RunConfig) -> Result<Engine> {
    let _lock = DirLock::acquire(&cfg.state_dir)?;
    let camp = io::read_campaign(&cfg.ensemble_csv, &cfg.field_csv)?;
    let engine = Engine::initial_train(cfg.engine.clone(), &camp, &camp, cfg.train_start, cfg.forecast_start)?;
    persist::save_engine(&state_path(cfg), &engine)?;
    write_models(&cfg.state_dir.join(MODELS_FILE), &engine)?;
    Ok(engine)
}

fn load_state(cfg: &RunConfig) -> Result<Engine> {
    let path = state_path(cfg);
    if !path.exists() {
        return Err(Error::State(format!("{}: no trained state; run `train` first", path.display())));
    }
    persist::load_engine(&path)
}

/// Runs daily steps from the stored current date through `through`,
/// appending to the forecast file and saving state after every step.
/// Records left behind by an interrupted run are discarded first.
pub fn cmd_forecast(cfg: &RunConfig, through: NaiveDate) -> Result<usize> {
    let _lock = DirLock::acquire(&cfg.state_dir)?;
    let mut engine = load_state(cfg)?;
    if through < engine.current {
        return Err(Error::Data(format!("{through} precedes the next forecast date {}", engine.current)));
    }
    let camp = io::read_campaign(&cfg.ensemble_csv, &cfg.field_csv)?;
    let out = forecasts_path(cfg);
    io::truncate_forecasts(&out, engine.current)?;
    let state = state_path(cfg);
    let mut written = 0;
    while engine.current <= through {
        let records = engine.daily_step(&camp, &camp)?;
        io::write_forecasts(&out, &records, true)?;
        persist::save_engine(&state, &engine)?;
        written += records.len();
        log::info!("forecast {} written", records[0].ref_date);
    }
    write_models(&cfg.state_dir.join(MODELS_FILE), &engine)?;
    Ok(written)
}

/// Retrospective forecasts over part of the training window.
pub fn cmd_hindcast(cfg: &RunConfig, from: NaiveDate, to: NaiveDate) -> Result<Vec<ForecastRecord>> {
    let _lock = DirLock::acquire(&cfg.state_dir)?;
    let engine = load_state(cfg)?;
    let camp = io::read_campaign(&cfg.ensemble_csv, &cfg.field_csv)?;
    let records = engine.hindcast(&camp, from, to)?;
    io::write_forecasts(&cfg.output_dir.join(HINDCAST_FILE), &records, false)?;
    Ok(records)
}

/// Stored forecasts with reference dates in `[from, to]` joined with truth.
pub fn joined_forecasts(
    path: &Path,
    field: &FieldSeries,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
) -> Result<Vec<ForecastRecord>> {
    let mut records: Vec<ForecastRecord> = io::read_forecasts(path)?
        .into_iter()
        .filter(|r| from.is_none_or(|f| r.ref_date >= f) && to.is_none_or(|t| r.ref_date <= t))
        .collect();
    attach_truth(&mut records, field);
    records.retain(|r| r.truth.is_some());
    Ok(records)
}

/// Scores stored forecasts by (model, horizon) plus any `extra` groupings
/// and writes the score table.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    from: Option<NaiveDate>,
    to: Option<NaiveDate>,
    extra: &[GroupBy],
) -> Result<Vec<ScoreRow>> {
    let field = io::read_field(&cfg.field_csv)?;
    let records = joined_forecasts(&forecasts_path(cfg), &field, from, to)?;
    if records.is_empty() {
        return Err(Error::Data("no stored forecast overlaps the field data".into()));
    }
    let mut groups = vec![GroupBy::Horizon];
    for g in extra {
        if !groups.contains(g) {
            groups.push(*g);
        }
    }
    let rows: Vec<ScoreRow> = groups.iter().flat_map(|&g| aggregate(&records, g)).collect();
    io::write_scores(&scores_path(cfg), &rows)?;
    Ok(rows)
}

pub fn parse_group(s: &str) -> Result<GroupBy> {
    match s {
        "all" => Ok(GroupBy::All),
        "horizon" => Ok(GroupBy::Horizon),
        "depth" => Ok(GroupBy::Depth),
        "doy_bucket" => Ok(GroupBy::DoyBucket),
        _ => Err(Error::Config(format!("unknown grouping {s:?} (all, horizon, depth, doy_bucket)"))),
    }
}
