//! C ABI for lakecast.
//!
//! Every fallible function returns an [`LcStatus`]; on failure the message is
//! kept per thread and read back with [`lc_last_error_message`]. Handles are
//! opaque heap objects released with their matching `*_free` function.
//! Dates cross the boundary as `YYYYMMDD` integers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use chrono::{Datelike, NaiveDate};
use lakecast::campaign::Campaign;
use lakecast::cli;
use lakecast::config::RunConfig;
use lakecast::engine::{Engine, ForecastRecord, ModelTag};
use lakecast::{io, metrics, persist, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Contract = 3,
    Numerical = 4,
    Fit = 5,
    Data = 6,
    Config = 7,
    State = 8,
    Io = 9,
    Csv = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LcModel {
    Gpbc = 0,
    GpbcNophi = 1,
    Gpglm = 2,
    Ogp = 3,
    GlmRaw = 4,
}

impl From<ModelTag> for LcModel {
    fn from(m: ModelTag) -> Self {
        match m {
            ModelTag::Gpbc => LcModel::Gpbc,
            ModelTag::GpbcNophi => LcModel::GpbcNophi,
            ModelTag::Gpglm => LcModel::Gpglm,
            ModelTag::Ogp => LcModel::Ogp,
            ModelTag::GlmRaw => LcModel::GlmRaw,
        }
    }
}

/// One forecast row.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LcForecast {
    pub model: LcModel,
    pub ref_date: i32,
    pub horizon: u32,
    pub depth: u32,
    pub mean: f64,
    pub sd: f64,
    pub lo90: f64,
    pub hi90: f64,
}

/// A parsed run configuration.
pub struct LcConfig {
    cfg: RunConfig,
}

/// A trained engine together with the campaign it reads from. Holds the
/// state-directory lock while open.
pub struct LcEngine {
    _lock: persist::DirLock,
    cfg: RunConfig,
    engine: Engine,
    campaign: Campaign,
}

/// Forecast rows produced by one call.
pub struct LcForecasts {
    rows: Vec<LcForecast>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> LcStatus {
    match e {
        Error::Contract(_) => LcStatus::Contract,
        Error::Numerical(_) => LcStatus::Numerical,
        Error::Fit(_) => LcStatus::Fit,
        Error::Data(_) => LcStatus::Data,
        Error::Config(_) => LcStatus::Config,
        Error::State(_) => LcStatus::State,
        Error::Io { .. } => LcStatus::Io,
        Error::Csv { .. } => LcStatus::Csv,
    }
}

enum Failure {
    Status(LcStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(LcStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Status(LcStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            LcStatus::Ok
        }
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            LcStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn date_arg(ymd: i32) -> Result<NaiveDate, Failure> {
    NaiveDate::from_ymd_opt(ymd / 10_000, (ymd / 100 % 100) as u32, (ymd % 100) as u32)
        .ok_or_else(|| invalid(format!("{ymd} is not a YYYYMMDD date")))
}

fn date_int(d: NaiveDate) -> i32 {
    d.year() * 10_000 + d.month() as i32 * 100 + d.day() as i32
}

fn boxed_rows(records: &[ForecastRecord]) -> *mut LcForecasts {
    let rows = records
        .iter()
        .map(|r| LcForecast {
            model: r.model.into(),
            ref_date: date_int(r.ref_date),
            horizon: r.horizon,
            depth: r.depth,
            mean: r.mean,
            sd: r.sd,
            lo90: r.lo90,
            hi90: r.hi90,
        })
        .collect();
    Box::into_raw(Box::new(LcForecasts { rows }))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Gaussian log predictive density of `y`.
///
/// # Safety
/// `out` must be null or point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn lc_log_score(y: f64, mean: f64, sd: f64, out: *mut f64) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = metrics::log_score(y, mean, sd)?;
        Ok(())
    })
}

/// Whether `y` falls inside the central 90% interval of N(mean, sd²).
#[no_mangle]
pub extern "C" fn lc_coverage90(y: f64, mean: f64, sd: f64) -> bool {
    metrics::coverage90(y, mean, sd)
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_config_load(path: *const c_char, out: *mut *mut LcConfig) -> LcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let cfg = RunConfig::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(LcConfig { cfg }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from [`lc_config_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_config_free(cfg: *mut LcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Writes the simulated ensemble and field files named by the config.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn lc_simulate(cfg: *const LcConfig) -> LcStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        cli::cmd_simulate(&cfg.cfg)?;
        Ok(())
    })
}

/// Trains all models and saves the engine state under the state directory.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn lc_train(cfg: *const LcConfig) -> LcStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        cli::cmd_train(&cfg.cfg)?;
        Ok(())
    })
}

/// Loads the saved engine and the campaign files named by the config.
///
/// # Safety
/// `cfg` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_open(cfg: *const LcConfig, out: *mut *mut LcEngine) -> LcStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let out = out_arg(out, "out")?;
        let cfg = cfg.cfg.clone();
        let lock = persist::DirLock::acquire(&cfg.state_dir)?;
        let engine = persist::load_engine(&cli::state_path(&cfg))?;
        let campaign = io::read_campaign(&cfg.ensemble_csv, &cfg.field_csv)?;
        *out = Box::into_raw(Box::new(LcEngine { _lock: lock, cfg, engine, campaign }));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from [`lc_engine_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_free(engine: *mut LcEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Next reference date the engine will forecast from, as `YYYYMMDD`.
///
/// # Safety
/// `engine` must be a live engine handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_current(engine: *const LcEngine, out: *mut i32) -> LcStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        *out_arg(out, "out")? = date_int(e.engine.current);
        Ok(())
    })
}

/// Runs one daily step. When `persist` is true the new state is saved
/// under the state directory. The rows are returned in a new handle.
///
/// # Safety
/// `engine` must be a live engine handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_step(engine: *mut LcEngine, persist: bool, out: *mut *mut LcForecasts) -> LcStatus {
    guard(|| {
        let e = engine.as_mut().ok_or_else(|| null("engine"))?;
        let out = out_arg(out, "out")?;
        let records = e.engine.daily_step(&e.campaign, &e.campaign)?;
        if persist {
            persist::save_engine(&cli::state_path(&e.cfg), &e.engine)?;
        }
        *out = boxed_rows(&records);
        Ok(())
    })
}

/// Retrospective forecasts for reference dates `from..=to` (`YYYYMMDD`).
///
/// # Safety
/// `engine` must be a live engine handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lc_engine_hindcast(
    engine: *const LcEngine,
    from: i32,
    to: i32,
    out: *mut *mut LcForecasts,
) -> LcStatus {
    guard(|| {
        let e = engine.as_ref().ok_or_else(|| null("engine"))?;
        let out = out_arg(out, "out")?;
        let records = e.engine.hindcast(&e.campaign, date_arg(from)?, date_arg(to)?)?;
        *out = boxed_rows(&records);
        Ok(())
    })
}

/// # Safety
/// `rows` must be a live forecast handle.
#[no_mangle]
pub unsafe extern "C" fn lc_forecasts_len(rows: *const LcForecasts) -> usize {
    rows.as_ref().map_or(0, |r| r.rows.len())
}

/// Pointer to the contiguous rows, valid until the handle is freed.
///
/// # Safety
/// `rows` must be a live forecast handle.
#[no_mangle]
pub unsafe extern "C" fn lc_forecasts_data(rows: *const LcForecasts) -> *const LcForecast {
    rows.as_ref().map_or(ptr::null(), |r| r.rows.as_ptr())
}

/// # Safety
/// `rows` must be null or a forecast handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lc_forecasts_free(rows: *mut LcForecasts) {
    if !rows.is_null() {
        drop(Box::from_raw(rows));
    }
}
