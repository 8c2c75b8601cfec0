use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn rbridge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbridge")).args(args).output().expect("binary runs")
}

fn rbridge_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbridge")).args(args).env(key, value).output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn artifact_paths(m: &Value) -> Vec<String> {
    m["stages"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|st| st["artifacts"].as_array().unwrap().iter().map(|a| a["path"].as_str().unwrap().to_string()))
        .collect()
}

/// Writes `text` to `dir/name` and returns the path.
fn config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn kernel_solve_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&rbridge(&["pipeline", "--config", s(&fixture("gaussian.toml")), "--out", s(&out), "--stages", "kernel,solve"]));
    assert!(out.join("potentials.csv").is_file());
    let conv = std::fs::read_to_string(out.join("conv.csv")).unwrap();
    assert_eq!(conv.lines().next(), Some("iter,residual"));
    let m = manifest(&out);
    assert_eq!(m["status"], "ok");
    let names: Vec<&str> = m["stages"].as_array().unwrap().iter().map(|st| st["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["kernel", "solve"]);
    let marg = std::fs::read_to_string(out.join("rho0.csv")).unwrap();
    assert_eq!(marg.lines().next(), Some("regime,x1,density"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&rbridge(&["pipeline", "--config", s(&fixture("gaussian.toml")), "--out", s(&a)]));
    ok(&rbridge_env(&["pipeline", "--config", s(&fixture("gaussian.toml")), "--out", s(&b)], "RB_THREADS", "1"));
    let (ma, mb) = (manifest(&a), manifest(&b));
    let paths = artifact_paths(&ma);
    assert!(paths.iter().any(|p| p == "bridge_paths.csv"));
    for p in &paths {
        assert_eq!(std::fs::read(a.join(p)).unwrap(), std::fs::read(b.join(p)).unwrap(), "{p} differs");
    }
    let hashes = |m: &Value| -> Vec<Value> {
        m["stages"].as_array().unwrap().iter().flat_map(|st| st["artifacts"].as_array().unwrap().clone()).collect()
    };
    assert_eq!(hashes(&ma), hashes(&mb));
    assert_eq!(ma["seeds"], mb["seeds"]);
    assert_eq!(ma["config_sha256"], mb["config_sha256"]);
}

#[test]
fn usbp_stage_lists_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("u");
    ok(&rbridge(&["pipeline", "--config", s(&fixture("usbp.toml")), "--out", s(&out)]));
    let paths = artifact_paths(&manifest(&out));
    for name in ["p11.bin", "p12.bin", "potentials.csv", "marginals.csv", "killing_rate.csv", "report.json"] {
        assert!(paths.contains(&format!("usbp/{name}")), "missing {name}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("usbp/report.json")).unwrap()).unwrap();
    assert!(report["killed_mass"]["error"].as_f64().unwrap() < 1e-6);
    let rate = std::fs::read_to_string(out.join("usbp/killing_rate.csv")).unwrap();
    assert_eq!(rate.lines().next(), Some("t,x1,rate"));
}

#[test]
fn subcommands_match_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    ok(&rbridge(&["pipeline", "--config", s(&fixture("gaussian.toml")), "--out", s(&run), "--stages", "kernel,solve,bridge"]));
    let cfg = fixture("gaussian.toml");
    let ks = dir.path().join("ks");
    ok(&rbridge(&["kernel", "--config", s(&cfg), "--slices", "8", "--out", s(&ks)]));
    let pot = dir.path().join("p.csv");
    let conv = dir.path().join("conv.csv");
    ok(&rbridge(&[
        "solve",
        "--kernel",
        s(&ks),
        "--rho0",
        s(&run.join("rho0.csv")),
        "--rhoT",
        s(&run.join("rhoT.csv")),
        "--out",
        s(&pot),
        "--report",
        s(&conv),
    ]));
    assert_eq!(std::fs::read(&pot).unwrap(), std::fs::read(run.join("potentials.csv")).unwrap());
    assert!(dir.path().join("solve.json").is_file());
    let bk = dir.path().join("bk.bin");
    let marg = dir.path().join("m.csv");
    ok(&rbridge(&["bridge", "--potentials", s(&pot), "--kernels", s(&ks), "--out", s(&bk), "--marginals", s(&marg)]));
    assert_eq!(std::fs::read(&marg).unwrap(), std::fs::read(run.join("marginals.csv")).unwrap());
    assert_eq!(std::fs::read(&bk).unwrap(), std::fs::read(run.join("bridge_kernel.bin")).unwrap());
    let report = dir.path().join("report.json");
    ok(&rbridge(&[
        "verify",
        "--suite",
        "backward,adjoint",
        "--config",
        s(&cfg),
        "--potentials",
        s(&dir.path().join("potential_slices.csv")),
        "--out",
        s(&report),
    ]));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["schema"], "rbridge.verify/1");
    assert_eq!(r["suites"].as_array().unwrap().len(), 2);
    assert!(r["suites"][1]["max_relative"].as_f64().unwrap() < 1e-6);
}

#[test]
fn single_kernel_and_reference_paths() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("K.bin");
    ok(&rbridge(&["kernel", "--config", s(&fixture("gaussian.toml")), "--grid", "-4:4:40", "--t", "0.25", "--s", "0.75", "--out", s(&k)]));
    let kernel = rbridge::kernel::read_kernel(&k).unwrap();
    assert_eq!((kernel.t, kernel.s, kernel.grid.len()), (0.25, 0.75, 40));
    let paths = dir.path().join("paths.csv");
    ok(&rbridge(&[
        "simulate",
        "--config",
        s(&fixture("gaussian.toml")),
        "--paths",
        "5",
        "--dt",
        "0.1",
        "--x0",
        "-0.5",
        "--regime",
        "stress",
        "--out",
        s(&paths),
    ]));
    let text = std::fs::read_to_string(&paths).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path_id,t,x1,regime,event_kind"));
    assert_eq!(lines.count(), 5 * 11);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(fixture("gaussian.toml")).unwrap();
    let bad = config(dir.path(), "bad.toml", &base.replace("tol = 1e-10", "tolerance = 1e-10"));
    let o = rbridge(&["pipeline", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x").exists(), "nothing runs before validation");
    let o = rbridge(&["pipeline", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = rbridge_env(&["pipeline", "--config", s(&fixture("gaussian.toml"))], "RB_THREADS", "zero");
    assert_eq!(o.status.code(), Some(2));
    let o = rbridge(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn nonconvergence_exits_with_3_and_keeps_partials() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(fixture("gaussian.toml")).unwrap();
    let cfg = config(dir.path(), "slow.toml", &base.replace("max_iters = 10000", "max_iters = 2"));
    let out = dir.path().join("run");
    let o = rbridge(&["pipeline", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join("conv.csv.partial").is_file());
    assert!(!out.join("conv.csv").exists());
    assert!(out.join("kernels/kernels.json").is_file());
    let m = manifest(&out);
    assert_eq!(m["status"], "failed");
    assert_eq!(m["failed_stage"], "solve");
    assert_eq!(m["stages"].as_array().unwrap().len(), 1);
}

#[test]
fn unsupported_models_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        dir.path(),
        "jumps.toml",
        r#"
[model]
d = 1
T = 1.0
regimes = 1
[model.sigma.1]
s11 = "1"
[model.gamma.1]
x1 = "z1"
[model.nu]
atoms = [[0.5, 1.0]]
[grid]
spec = "-3:3:30"
[usbp]
v = "1"
"#,
    );
    let o = rbridge(&["usbp", "--config", s(&cfg), "--out", s(&dir.path().join("u"))]);
    assert_eq!(o.status.code(), Some(4));
    let o = rbridge(&["kernel", "--config", s(&cfg), "--method", "gaussian", "--out", s(&dir.path().join("k.bin"))]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn json_tables_carry_a_schema() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(fixture("gaussian.toml")).unwrap();
    let cfg = config(dir.path(), "json.toml", &base.replace("dir = \"out\"", "dir = \"out\"\nformat = \"json\""));
    let out = dir.path().join("run");
    ok(&rbridge(&["pipeline", "--config", s(&cfg), "--out", s(&out), "--stages", "kernel,solve"]));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(out.join("conv.json")).unwrap()).unwrap();
    assert_eq!(v["schema"], "rbridge.table/1");
    assert_eq!(v["columns"], serde_json::json!(["iter", "residual"]));
}
