use std::cell::Cell;

use chrono::{Days, NaiveDate};
use lakecast::biascorrect::FieldSeries;
use lakecast::campaign::{Campaign, EnsembleDay, EnsembleSource, TruthSource};
use lakecast::engine::{Engine, EngineConfig, ForecastRecord, ModelTag};
use lakecast::lakesim::{generate_campaign, SimConfig};
use lakecast::metrics::Z90;
use lakecast::persist::{load_engine, save_engine};
use lakecast::{ColumnRole, Error, Result};

const H: u32 = 5;
const D: u32 = 3;

fn ymd(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn small_sim(seed: u64) -> SimConfig {
    SimConfig { seed, n_years: 1, n_depths: D, n_horizons: H, n_ensemble: 6, ..SimConfig::default() }
}

fn train(camp: &Campaign, cfg: EngineConfig) -> Engine {
    Engine::initial_train(cfg, camp, camp, ymd(2021, 2, 1), ymd(2021, 3, 15)).unwrap()
}

fn steps(e: &mut Engine, camp: &Campaign, n: usize) -> Vec<ForecastRecord> {
    (0..n).flat_map(|_| e.daily_step(camp, camp).unwrap()).collect()
}

fn assert_close(a: &[ForecastRecord], b: &[ForecastRecord], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!((x.model, x.ref_date, x.horizon, x.depth), (y.model, y.ref_date, y.horizon, y.depth));
        assert!((x.mean - y.mean).abs() <= tol && (x.sd - y.sd).abs() <= tol, "{x:?} vs {y:?}");
    }
}

#[test]
fn step_emits_every_model_horizon_and_depth() {
    let camp = generate_campaign(&small_sim(5)).unwrap();
    let mut e = train(&camp, EngineConfig::default());
    let recs = e.daily_step(&camp, &camp).unwrap();
    assert_eq!(recs.len(), 5 * (H * D) as usize);
    let mut i = 0;
    for m in ModelTag::ALL {
        for h in 1..=H {
            for d in 0..D {
                let r = &recs[i];
                assert_eq!((r.model, r.horizon, r.depth, r.ref_date), (m, h, d, ymd(2021, 3, 15)));
                assert!(r.mean.is_finite() && r.sd > 0.0);
                assert!((r.hi90 - r.lo90 - 2.0 * Z90 * r.sd).abs() <= 1e-12 * (1.0 + r.mean.abs()));
                i += 1;
            }
        }
    }
    assert_eq!(e.current, ymd(2021, 3, 16));
    assert_eq!(e.steps, 1);
}

#[test]
fn glm_raw_matches_member_moments() {
    let camp = generate_campaign(&small_sim(6)).unwrap();
    let mut e = train(&camp, EngineConfig::default());
    let day = camp.ensembles[&e.current].clone();
    let recs = e.daily_step(&camp, &camp).unwrap();
    for r in recs.iter().filter(|r| r.model == ModelTag::GlmRaw) {
        let m = day.members(r.horizon, r.depth);
        let n = m.len() as f64;
        let mean = m.iter().sum::<f64>() / n;
        let var = m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((r.mean - mean).abs() < 1e-12);
        assert!((r.sd - var.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn phi_mode_adds_exactly_one_active_column() {
    let camp = generate_campaign(&small_sim(7)).unwrap();
    let with = train(&camp, EngineConfig::default());
    let roles = with.active_roles();
    assert_eq!(roles.len(), 2);
    assert_eq!(roles[0], vec![ColumnRole::Day, ColumnRole::Depth, ColumnRole::Horizon, ColumnRole::Phi]);
    assert_eq!(roles[1], vec![ColumnRole::Day, ColumnRole::Depth, ColumnRole::Horizon]);

    let without = train(&camp, EngineConfig { with_phi: false, ..EngineConfig::default() });
    assert_eq!(without.active_roles(), vec![roles[1].clone()]);
    let mut without = without;
    let recs = without.daily_step(&camp, &camp).unwrap();
    let pick = |m| recs.iter().filter(|r| r.model == m).map(|r| (r.mean, r.sd)).collect::<Vec<_>>();
    assert_eq!(recs.len(), 5 * (H * D) as usize);
    assert_eq!(pick(ModelTag::Gpbc), pick(ModelTag::GpbcNophi));
}

#[test]
fn runs_are_deterministic() {
    let camp = generate_campaign(&small_sim(8)).unwrap();
    let mut a = train(&camp, EngineConfig::default());
    let mut b = train(&camp, EngineConfig::default());
    assert_eq!(steps(&mut a, &camp, 3), steps(&mut b, &camp, 3));
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let camp = generate_campaign(&small_sim(9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");

    let mut full = train(&camp, EngineConfig::default());
    let straight = steps(&mut full, &camp, 10);

    let mut first = train(&camp, EngineConfig::default());
    let head = steps(&mut first, &camp, 4);
    save_engine(&path, &first).unwrap();
    drop(first);
    let mut resumed = load_engine(&path).unwrap();
    assert_eq!(resumed.current, ymd(2021, 3, 19));
    let tail = steps(&mut resumed, &camp, 6);

    assert_eq!(resumed.refits, full.refits);
    assert_eq!(head, straight[..head.len()]);
    assert_close(&tail, &straight[head.len()..], 1e-9);
}

#[test]
fn reloaded_snapshot_predicts_identically() {
    let camp = generate_campaign(&small_sim(10)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.json");
    let e = train(&camp, EngineConfig::default());
    save_engine(&path, &e).unwrap();
    let back = load_engine(&path).unwrap();
    let day = &camp.ensembles[&ymd(2021, 3, 1)];
    assert_close(&e.emit(day.ref_date, day).unwrap(), &back.emit(day.ref_date, day).unwrap(), 1e-9);
    assert_eq!(e.corpus, back.corpus);
    assert_eq!(e.field, back.field);
}

/// Truth source that refuses any date past a movable horizon, and can shift
/// every value after a cutoff.
struct Guarded<'a> {
    field: &'a FieldSeries,
    limit: Cell<NaiveDate>,
    max_seen: Cell<Option<NaiveDate>>,
    perturb_after: Option<NaiveDate>,
}

impl TruthSource for Guarded<'_> {
    fn truth(&self, date: NaiveDate) -> Result<Vec<(u32, f64)>> {
        if date > self.limit.get() {
            return Err(Error::Data(format!("leak: {date} requested before its time")));
        }
        self.max_seen.set(self.max_seen.get().max(Some(date)));
        let shift = match self.perturb_after {
            Some(c) if date > c => 3.0,
            _ => 0.0,
        };
        Ok(self.field.on(date).map(|(z, t)| (z, t + shift)).collect())
    }
}

struct Ensembles<'a>(&'a Campaign);

impl EnsembleSource for Ensembles<'_> {
    fn ensemble(&self, ref_date: NaiveDate) -> Result<Option<EnsembleDay>> {
        self.0.ensemble(ref_date)
    }
}

#[test]
fn no_truth_is_read_ahead_of_the_clock() {
    let camp = generate_campaign(&small_sim(11)).unwrap();
    let first = ymd(2021, 3, 15);
    let guard = |perturb_after| Guarded {
        field: &camp.field,
        limit: Cell::new(first),
        max_seen: Cell::new(None),
        perturb_after,
    };
    let ens = Ensembles(&camp);

    let honest = guard(None);
    let mut e = Engine::initial_train(EngineConfig::default(), &ens, &honest, ymd(2021, 2, 1), first).unwrap();
    assert_eq!(honest.max_seen.get(), Some(first));

    // Everything after day r+1 is shifted: forecasts issued on r+1 and earlier
    // cannot change.
    let cut = first + Days::new(1);
    let shifted = guard(Some(cut));
    let mut f = Engine::initial_train(EngineConfig::default(), &ens, &shifted, ymd(2021, 2, 1), first).unwrap();

    for k in 0..3u64 {
        let r = first + Days::new(k);
        for g in [&honest, &shifted] {
            g.limit.set(r);
        }
        assert!(e.daily_step(&ens, &honest).unwrap_err().to_string().contains("leak"));
        assert_eq!(e.current, r, "failed step must leave the engine unchanged");
        for g in [&honest, &shifted] {
            g.limit.set(r + Days::new(1));
        }
        let a = e.daily_step(&ens, &honest).unwrap();
        let b = f.daily_step(&ens, &shifted).unwrap();
        assert_eq!(honest.max_seen.get(), Some(r + Days::new(1)));
        if r <= cut {
            assert_eq!(a, b, "forecast on {r} saw future truth");
        } else {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn missing_ensemble_aborts_without_side_effects() {
    let mut camp = generate_campaign(&small_sim(12)).unwrap();
    let mut e = train(&camp, EngineConfig::default());
    let before = e.clone();
    let day = camp.ensembles.remove(&e.current).unwrap();
    assert!(matches!(e.daily_step(&camp, &camp), Err(Error::Data(_))));
    assert_eq!(e.current, before.current);
    assert_eq!(e.corpus, before.corpus);
    camp.ensembles.insert(day.ref_date, day);
    e.daily_step(&camp, &camp).unwrap();
}

#[test]
fn hindcast_tracks_truth_and_validates_range() {
    let camp = generate_campaign(&small_sim(13)).unwrap();
    let e = train(&camp, EngineConfig::default());
    let recs = e.hindcast(&camp, ymd(2021, 2, 10), ymd(2021, 3, 5)).unwrap();
    assert_eq!(recs.len(), 24 * 5 * (H * D) as usize);
    assert!(recs.iter().all(|r| r.truth.is_some()));
    let rmse = |m: ModelTag| {
        let e: Vec<f64> = recs.iter().filter(|r| r.model == m).map(|r| (r.mean - r.truth.unwrap()).powi(2)).collect();
        (e.iter().sum::<f64>() / e.len() as f64).sqrt()
    };
    let (gpbc, raw) = (rmse(ModelTag::Gpbc), rmse(ModelTag::GlmRaw));
    assert!(gpbc < raw, "in-sample GPBC rmse {gpbc:.3} vs raw ensemble {raw:.3}");

    assert!(matches!(e.hindcast(&camp, ymd(2021, 3, 5), ymd(2021, 3, 1)), Err(Error::Contract(_))));
    assert!(matches!(e.hindcast(&camp, ymd(2021, 1, 20), ymd(2021, 3, 1)), Err(Error::Data(_))));
    assert!(matches!(e.hindcast(&camp, ymd(2021, 3, 1), ymd(2021, 3, 15)), Err(Error::Data(_))));
}
