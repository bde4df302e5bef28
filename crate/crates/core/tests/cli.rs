use dvpp_core::dvpp::{self, Allocation, Member, ParticipationFactor};
use dvpp_core::engine::read_csv;
use std::path::Path;
use std::process::{Command, Output};

fn dvppsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvppsim")).args(args).env_remove("DVPPSIM_OUT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp2");
    let o = dvppsim(&["run", "--experiment", "2", "--t-end", "3", "--plots", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["timeseries.csv", "metrics.json", "scenario.json", "response.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let table = read_csv(std::fs::File::open(out.join("timeseries.csv")).unwrap()).unwrap();
    assert_eq!(table.column("t").unwrap().len(), 3001);
    assert!(table.column("dvpp1.hydro.dp_pu").is_some());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(m["metrics"]["nadir_hz"].as_f64().unwrap() < 60.0, "{m}");

    // The saved scenario reproduces the run.
    let again = dir.path().join("again");
    let o = dvppsim(&["run", "--config", out.join("scenario.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("timeseries.csv")).unwrap(), std::fs::read(again.join("timeseries.csv")).unwrap());
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dvppsim"))
        .args(["run", "--experiment", "1", "--t-end", "1.5"])
        .env("DVPPSIM_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("timeseries.csv").is_file());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"schema_version\": 1, \"devices\": [").unwrap();
    let out = dir.path().join("o");
    for args in [
        vec!["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()],
        vec!["run", "--experiment", "5"],
        vec!["run", "--experiment", "1", "--step-bus", "42", "--out", out.to_str().unwrap()],
        vec!["audit", "no_such_spec"],
        vec!["sweep", "--experiment", "1", "--param", "j", "--values", "", "--out", out.to_str().unwrap()],
        vec!["sweep", "--experiment", "1", "--param", "j", "--out", out.to_str().unwrap()],
        vec!["sweep", "--experiment", "1", "--param", "bogus", "--values", "1", "--out", out.to_str().unwrap()],
        vec!["frobnicate"],
    ] {
        let o = dvppsim(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(!out.join("timeseries.csv").exists());
    assert_eq!(code(&dvppsim(&["--help"])), 0);
}

#[test]
fn audit_builtin_passes() {
    for name in ["dvpp1", "dvpp2"] {
        let o = dvppsim(&["audit", name, "--json"]);
        assert_eq!(code(&o), 0);
        let alloc: Allocation = serde_json::from_str(&stdout(&o)).unwrap();
        assert!(alloc.audit.pass && alloc.audit.max_residual() < 1e-12, "{:?}", alloc.audit);
    }
}

#[test]
fn audit_writes_frequency_response() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("fr.csv");
    let o = dvppsim(&["audit", "dvpp1", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("hydro"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), dvpp::audit_grid().len() + 1);
}

fn write_spec(dir: &Path, spec: &dvpp::DvppSpec) -> String {
    let p = dir.join(format!("{}.json", spec.name));
    std::fs::write(&p, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn audit_duplicated_fast_member_still_sums_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = dvpp::dvpp1_spec();
    spec.name = "dup".into();
    let fast = spec.members.iter().find(|m| m.id == "sc").unwrap().clone();
    spec.members.push(Member { id: "sc2".into(), capacity_mva: 2.0 * fast.capacity_mva, ..fast });
    let o = dvppsim(&["audit", &write_spec(dir.path(), &spec), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let alloc: Allocation = serde_json::from_str(&stdout(&o)).unwrap();
    let a = alloc.member("sc").unwrap().xi.phi_wp.dc_gain().unwrap().finite().unwrap();
    let b = alloc.member("sc2").unwrap().xi.phi_wp.dc_gain().unwrap().finite().unwrap();
    assert_eq!(a, b);
}

#[test]
fn audit_fixed_only_shortfall_fails() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = dvpp::dvpp1_spec();
    spec.name = "short".into();
    let target = dvpp::allocate(&spec).unwrap().xi_target;
    let first = spec.members[0].clone();
    spec.members = vec![Member {
        id: "fixed".into(),
        controllable: false,
        fixed: Some(ParticipationFactor { phi_wp: target.phi_wp.scale(0.9), gamma_vq: target.gamma_vq.scale(0.9) }),
        capacity_mva: spec.rating_mva,
        ..first
    }];
    let o = dvppsim(&["audit", &write_spec(dir.path(), &spec), "--json"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    let alloc: Allocation = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((alloc.audit.max_residual() - 0.1).abs() < 1e-9, "{:?}", alloc.audit);
}

#[test]
fn sweep_continues_past_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = dvppsim(&[
        "sweep", "--experiment", "2", "--t-end", "3", "--param", "dt", "--values", "0.002,-1,0.001", "--jobs", "2", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rd = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    let status = rd.headers().unwrap().iter().position(|h| h == "status").unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(&rows[0][status], "ok");
    assert!(rows[1][status].starts_with("error"), "{:?}", rows[1]);
    assert_eq!(&rows[2][status], "ok");

    let o = dvppsim(&["sweep", "--experiment", "2", "--param", "dt", "--values", "-1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}
