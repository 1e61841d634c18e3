use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn modnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_modnet")).args(args).output().expect("binary runs")
}

fn data(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "data", name].iter().collect();
    p.display().to_string()
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(modnet(&["--help"]).status.code(), Some(0));
    assert_eq!(modnet(&["--version"]).status.code(), Some(0));
    assert_eq!(modnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(modnet(&["analyze", "--m-v", "10"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    // Missing --scenario is a usage error.
    assert_eq!(modnet(&["analyze", "--m-v", "10", "--m-d", "2", "--out", &out]).status.code(), Some(2));
}

#[test]
fn bad_inputs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(&tmp.path().join("o"));
    let missing = tmp.path().join("nope.json").display().to_string();
    let r = modnet(&["analyze", "--scenario", &missing, "--m-v", "10", "--m-d", "2", "--out", &out]);
    assert_eq!(r.status.code(), Some(1));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"n": 2, "lambda": [1.0, -1.0], "p": [[0,1],[1,0]], "t": [[0,1],[1,0]]}"#).unwrap();
    let r = modnet(&["analyze", "--scenario", &bad.display().to_string(), "--m-v", "10", "--m-d", "2", "--out", &out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!r.stderr.is_empty());
    // Fewer vehicles than drivers.
    let r = modnet(&["analyze", "--scenario", &data("three.json"), "--m-v", "2", "--m-d", "4", "--out", &out]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn analyze_matches_golden_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    let r = modnet(&["analyze", "--scenario", &data("three.json"), "--m-v", "12", "--m-d", "4", "--out", &out]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let got = rows(&std::fs::read_to_string(tmp.path().join("availability.csv")).unwrap());
    let want = rows(&std::fs::read_to_string(data("three_availability.csv")).unwrap());
    assert_eq!(got[0], want[0]);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want).skip(1) {
        for (a, b) in g.iter().zip(w) {
            let (a, b): (f64, f64) = (a.parse().unwrap(), b.parse().unwrap());
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
    // The linear solution balances the customer-driven fleet.
    let a1: Vec<f64> = got.iter().skip(1).map(|r| r[5].parse().unwrap()).collect();
    assert!(a1.iter().all(|&a| (a - a1[0]).abs() < 1e-12));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "analyze");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    let outputs: Vec<&str> = m["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert!(outputs.contains(&"availability.csv"));
}

#[test]
fn replay_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let args = ["simulate", "--scenario", &data("three.json"), "--mode", "loss", "--m-v", "12", "--m-d", "4", "--horizon", "2000", "--replicas", "3", "--seed", "3"];
    let mut a: Vec<&str> = args.to_vec();
    let o1 = out_arg(&first);
    a.extend(["--out", &o1]);
    assert!(modnet(&a).status.success());
    let manifest = first.join("manifest.json").display().to_string();
    let o2 = out_arg(&second);
    let r = modnet(&["replay", "--manifest", &manifest, "--out", &o2, "--jobs", "3"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["availability.csv", "summary.json", "sim_config.json"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
    // A different seed changes the sampled availability.
    let third = tmp.path().join("third");
    let o3 = out_arg(&third);
    let mut b: Vec<&str> = args.to_vec();
    let last = b.len() - 1;
    b[last] = "4";
    b.extend(["--out", &o3]);
    assert!(modnet(&b).status.success());
    assert_ne!(std::fs::read(first.join("availability.csv")).unwrap(), std::fs::read(third.join("availability.csv")).unwrap());
}

#[test]
fn gen_then_rebalance_lp() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("g");
    assert!(modnet(&["gen", "--stations", "5", "--style", "grid", "--seed", "2", "--out", &out_arg(&g)]).status.success());
    let sc = g.join("scenario.json").display().to_string();
    let lp = tmp.path().join("lp");
    assert!(modnet(&["rebalance", "lp", "--scenario", &sc, "--out", &out_arg(&lp)]).status.success());
    let flows = rows(&std::fs::read_to_string(lp.join("flows.csv")).unwrap());
    assert!(flows.len() > 1);
    let params: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(lp.join("params.json")).unwrap()).unwrap();
    assert_eq!(params["psi"].as_array().unwrap().len(), 5);
}
