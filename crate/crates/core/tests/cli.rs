use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
# small campaign
train_start = 2021-02-01
forecast_start = 2021-03-15
output_dir = out
state_dir = state
sim.n_years = 1
sim.n_depths = 3
sim.n_horizons = 5
sim.n_ensemble = 6
";

fn lakecast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lakecast"))
        .current_dir(dir)
        .arg("--config")
        .arg(dir.join("run.conf"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn err(out: Output) -> String {
    assert_eq!(out.status.code(), Some(1));
    String::from_utf8(out.stderr).unwrap()
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), CONFIG).unwrap();

    let e = err(lakecast(d, &["forecast", "--days", "2"]));
    assert!(e.starts_with("error[state]:") || e.starts_with("error[io]:"), "{e}");

    assert!(ok(lakecast(d, &["simulate"])).contains("ensemble rows"));
    assert!(d.join("ensemble.csv").exists() && d.join("field.csv").exists());
    assert!(ok(lakecast(d, &["train"])).contains("next forecast 2021-03-15"));
    assert!(d.join("state/state.json").exists() && d.join("state/models.json").exists());

    ok(lakecast(d, &["forecast", "--days", "2"]));
    ok(lakecast(d, &["forecast", "--through", "2021-03-18"]));
    let csv = std::fs::read_to_string(d.join("out/forecasts.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("model,"));
    assert_eq!(lines.count(), 4 * 75);

    let e = err(lakecast(d, &["forecast", "--through", "2021-03-10"]));
    assert!(e.starts_with("error[data]:"), "{e}");

    ok(lakecast(d, &["hindcast", "--from", "2021-03-01", "--to", "2021-03-02"]));
    let hind = std::fs::read_to_string(d.join("out/hindcast.csv")).unwrap();
    assert_eq!(hind.lines().count(), 1 + 2 * 75);
    let e = err(lakecast(d, &["hindcast", "--from", "2021-03-10", "--to", "2021-03-20"]));
    assert!(e.starts_with("error[data]:"), "{e}");

    assert!(ok(lakecast(d, &["evaluate", "--by", "depth,all"])).contains("score rows"));
    let scores = std::fs::read_to_string(d.join("out/scores.csv")).unwrap();
    assert!(scores.lines().any(|l| l.starts_with("GPBC,horizon,1,")));
    assert!(scores.lines().any(|l| l.starts_with("OGP,depth,2,")));
    assert!(scores.lines().any(|l| l.starts_with("GLM_RAW,all,")));
    let e = err(lakecast(d, &["evaluate", "--by", "month"]));
    assert!(e.starts_with("error[config]:"), "{e}");
}

#[test]
fn bad_config_is_reported_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "vecchia_m = 0\n").unwrap();
    let e = err(lakecast(dir.path(), &["simulate"]));
    assert!(e.starts_with("error[config]:") && e.trim_end().lines().count() == 1, "{e}");

    std::fs::write(dir.path().join("run.conf"), "colour = blue\n").unwrap();
    let e = err(lakecast(dir.path(), &["train"]));
    assert!(e.contains("colour"), "{e}");
}

#[test]
fn corrupted_state_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.conf"), CONFIG).unwrap();
    ok(lakecast(d, &["simulate"]));
    ok(lakecast(d, &["train"]));
    let p = d.join("state/state.json");
    let mut bytes = std::fs::read(&p).unwrap();
    let k = bytes.len() / 2;
    bytes[k] = if bytes[k] == b'1' { b'2' } else { b'1' };
    std::fs::write(&p, bytes).unwrap();
    let e = err(lakecast(d, &["forecast", "--days", "1"]));
    assert!(e.starts_with("error[state]:") && e.contains("checksum"), "{e}");
}
