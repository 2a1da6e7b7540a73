use std::ffi::{c_char, CString};
use std::ptr;

use lakecast_ffi::*;

const CONFIG: &str = "\
train_start = 2021-02-01
forecast_start = 2021-03-15
seed = 3
sim.seed = 11
sim.n_years = 1
sim.n_depths = 3
sim.n_horizons = 5
sim.n_ensemble = 6
";

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { lc_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(511));
    String::from_utf8(buf).unwrap()
}

#[test]
fn metrics_and_error_reporting() {
    let mut ls = 0.0;
    assert_eq!(unsafe { lc_log_score(0.0, 0.0, 1.0, &mut ls) }, LcStatus::Ok);
    assert!((ls + 0.918_938_5).abs() < 1e-6);
    assert!(lc_coverage90(1.6, 0.0, 1.0));
    assert!(!lc_coverage90(1.7, 0.0, 1.0));

    assert_eq!(unsafe { lc_log_score(0.0, 0.0, -1.0, &mut ls) }, LcStatus::Contract);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { lc_log_score(0.0, 0.0, 1.0, ptr::null_mut()) }, LcStatus::NullPointer);
    assert!(last_error().contains("null"));

    let mut cfg = ptr::null_mut();
    let missing = CString::new("/nonexistent/lakecast.conf").unwrap();
    assert_eq!(unsafe { lc_config_load(missing.as_ptr(), &mut cfg) }, LcStatus::Io);
    assert!(cfg.is_null());
    unsafe { lc_config_free(ptr::null_mut()) };
}

#[test]
fn simulate_train_step_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, CONFIG).unwrap();
    let path = CString::new(conf.to_str().unwrap()).unwrap();
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(lc_config_load(path.as_ptr(), &mut cfg), LcStatus::Ok, "{}", last_error());
        assert_eq!(lc_simulate(cfg), LcStatus::Ok, "{}", last_error());
        assert_eq!(lc_train(cfg), LcStatus::Ok, "{}", last_error());

        let mut eng = ptr::null_mut();
        assert_eq!(lc_engine_open(cfg, &mut eng), LcStatus::Ok, "{}", last_error());
        let mut busy = ptr::null_mut();
        assert_eq!(lc_engine_open(cfg, &mut busy), LcStatus::State);

        let mut today = 0;
        assert_eq!(lc_engine_current(eng, &mut today), LcStatus::Ok);
        assert_eq!(today, 20210315);

        let mut rows = ptr::null_mut();
        assert_eq!(lc_engine_step(eng, true, &mut rows), LcStatus::Ok, "{}", last_error());
        let n = lc_forecasts_len(rows);
        assert_eq!(n, 5 * 5 * 3);
        let data = std::slice::from_raw_parts(lc_forecasts_data(rows), n);
        assert!(data.iter().all(|r| r.ref_date == 20210315 && r.sd > 0.0 && r.lo90 < r.mean && r.mean < r.hi90));
        assert_eq!(data[0].model, LcModel::Gpbc);
        lc_forecasts_free(rows);
        assert_eq!(lc_engine_current(eng, &mut today), LcStatus::Ok);
        assert_eq!(today, 20210316);

        let mut hind = ptr::null_mut();
        assert_eq!(lc_engine_hindcast(eng, 20210301, 20210302, &mut hind), LcStatus::Ok, "{}", last_error());
        assert_eq!(lc_forecasts_len(hind), 2 * 75);
        lc_forecasts_free(hind);
        assert_eq!(lc_engine_hindcast(eng, 20210230, 20210302, &mut hind), LcStatus::InvalidArgument);
        assert_eq!(lc_engine_hindcast(eng, 20210320, 20210321, &mut hind), LcStatus::Data);
        lc_engine_free(eng);

        let mut again = ptr::null_mut();
        assert_eq!(lc_engine_open(cfg, &mut again), LcStatus::Ok, "{}", last_error());
        assert_eq!(lc_engine_current(again, &mut today), LcStatus::Ok);
        assert_eq!(today, 20210316);
        lc_engine_free(again);
        lc_config_free(cfg);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lakecast.h")).unwrap();
    for f in [
        "lc_last_error_message",
        "lc_log_score",
        "lc_coverage90",
        "lc_config_load",
        "lc_config_free",
        "lc_simulate",
        "lc_train",
        "lc_engine_open",
        "lc_engine_free",
        "lc_engine_current",
        "lc_engine_step",
        "lc_engine_hindcast",
        "lc_forecasts_len",
        "lc_forecasts_data",
        "lc_forecasts_free",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct LcEngine LcEngine;"));
}
