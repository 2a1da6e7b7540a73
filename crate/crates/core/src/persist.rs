//! Engine snapshots with integrity checks, and the state-directory lock.
//!
//! A snapshot file is one header line `lakecast-state v1 sha256=<hex>`
//! followed by a JSON body whose digest the header records. Fitted GPs are
//! stored as hyperparameters and rebuilt on load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::biascorrect::{condition_bias, Discrepancies, FieldSeries};
use crate::covkernel::Hyperparams;
use crate::engine::{stack_design, Engine, EngineConfig, Ogp, Stack, StackParams};
use crate::error::{Error, Result};
use crate::optim::HyperBounds;
use crate::repstats::ReplicateSet;
use crate::surrogate::condition_surrogate;

const MAGIC: &str = "lakecast-state v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StackState {
    with_phi: bool,
    bounds: HyperBounds,
    params: StackParams,
    disc: Discrepancies,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OgpState {
    mean: Hyperparams,
    var: Option<Hyperparams>,
    until: NaiveDate,
}

/// Everything needed to rebuild an [`Engine`] exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSnapshot {
    cfg: EngineConfig,
    current: NaiveDate,
    train_start: NaiveDate,
    field: FieldSeries,
    corpus: ReplicateSet,
    day_rows: BTreeMap<NaiveDate, usize>,
    phi: BTreeMap<NaiveDate, f64>,
    main: StackState,
    nophi: Option<StackState>,
    ogp: OgpState,
    n_horizons: u32,
    n_depths: u32,
    steps: usize,
    steps_since_refit: usize,
    refits: usize,
}

fn stack_state(s: &Stack) -> StackState {
    StackState { with_phi: s.with_phi, bounds: s.bounds.clone(), params: s.params(), disc: s.disc.clone() }
}

impl EngineSnapshot {
    pub fn of(e: &Engine) -> Self {
        Self {
            cfg: e.cfg.clone(),
            current: e.current,
            train_start: e.train_start,
            field: e.field.clone(),
            corpus: e.corpus.clone(),
            day_rows: e.day_rows.clone(),
            phi: e.phi.clone(),
            main: stack_state(&e.main),
            nophi: e.nophi.as_ref().map(stack_state),
            ogp: OgpState {
                mean: e.ogp.mean_gp.hyperparams().clone(),
                var: e.ogp.var_gp.as_ref().map(|g| g.hyperparams().clone()),
                until: e.ogp.until,
            },
            n_horizons: e.n_horizons,
            n_depths: e.n_depths,
            steps: e.steps,
            steps_since_refit: e.steps_since_refit,
            refits: e.refits,
        }
    }

    pub fn current(&self) -> NaiveDate {
        self.current
    }

    fn rebuild_stack(&self, s: &StackState) -> Result<Stack> {
        let rs = stack_design(&self.corpus, &self.phi, s.with_phi)?;
        let p = s.params.clone();
        let opts = &self.cfg.fit;
        Ok(Stack {
            with_phi: s.with_phi,
            bounds: s.bounds.clone(),
            surrogate: condition_surrogate(&rs, p.mean, p.var, opts)?,
            disc: s.disc.clone(),
            bias: condition_bias(&s.disc, p.bias, opts)?,
        })
    }

    /// Reconditions every model on the stored data and hyperparameters.
    pub fn restore(&self) -> Result<Engine> {
        self.cfg.validate()?;
        let ogp = Ogp::condition(&self.field, self.ogp.until, self.ogp.mean.clone(), self.ogp.var.clone(), &self.cfg.fit)?;
        Ok(Engine {
            cfg: self.cfg.clone(),
            current: self.current,
            train_start: self.train_start,
            field: self.field.clone(),
            corpus: self.corpus.clone(),
            day_rows: self.day_rows.clone(),
            phi: self.phi.clone(),
            main: self.rebuild_stack(&self.main)?,
            nophi: self.nophi.as_ref().map(|s| self.rebuild_stack(s)).transpose()?,
            ogp,
            n_horizons: self.n_horizons,
            n_depths: self.n_depths,
            steps: self.steps,
            steps_since_refit: self.steps_since_refit,
            refits: self.refits,
        })
    }
}

fn state_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::State(format!("{}: {msg}", path.display()))
}

/// Serializes `value` under a checksummed header. Writes to a temporary file
/// first so a crash never leaves a truncated snapshot in place.
pub fn save_checked<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_vec(value).map_err(|e| state_err(path, e))?;
    let digest = hex::encode(Sha256::digest(&body));
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = File::create(&tmp)?;
        writeln!(f, "{MAGIC} sha256={digest}")?;
        f.write_all(&body)?;
        f.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checked<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| state_err(path, "missing header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| state_err(path, "unreadable header"))?;
    let want = header
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().strip_prefix("sha256="))
        .ok_or_else(|| state_err(path, format!("not a state file (header {header:?})")))?;
    let body = &bytes[nl + 1..];
    let got = hex::encode(Sha256::digest(body));
    if got != want {
        return Err(state_err(path, "checksum mismatch; the snapshot is corrupted"));
    }
    serde_json::from_slice(body).map_err(|e| state_err(path, e))
}

pub fn save_engine(path: &Path, e: &Engine) -> Result<()> {
    save_checked(path, &EngineSnapshot::of(e))
}

pub fn load_engine(path: &Path) -> Result<Engine> {
    load_checked::<EngineSnapshot>(path)?.restore()
}

/// Exclusive advisory lock on a state directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    _file: File,
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("lock");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        // SAFETY: the descriptor is owned by `file` and open for the call.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc != 0 {
            return Err(state_err(dir, "state directory is locked by another process"));
        }
        Ok(Self { _file: file, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Probe {
        a: Vec<f64>,
        b: String,
    }

    #[test]
    fn checked_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.json");
        let v = Probe { a: vec![0.1, 1.0 / 3.0, -2e-300], b: "x".into() };
        save_checked(&p, &v).unwrap();
        assert_eq!(load_checked::<Probe>(&p).unwrap(), v);

        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x01;
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checked::<Probe>(&p).unwrap_err();
        assert!(matches!(err, Error::State(_)) && err.to_string().contains("checksum"), "{err}");

        std::fs::write(&p, b"{}\n").unwrap();
        assert!(matches!(load_checked::<Probe>(&p), Err(Error::State(_))));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let first = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(Error::State(_))));
        drop(first);
        DirLock::acquire(dir.path()).unwrap();
    }
}
