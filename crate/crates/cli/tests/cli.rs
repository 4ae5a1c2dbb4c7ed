use std::process::{Command, Output};

use crlb_core::bounds::bound_linear_any;
use crlb_core::{Activation, ModelConfig};

fn crlb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crlb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .parse()
        .unwrap()
}

#[test]
fn linear_constants_are_one() {
    let o = crlb(&["constants", "--activation", "linear", "--alpha", "1", "--sigma-x2", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "eta0=1 theta11=1 eta1=1");
}

#[test]
fn linear_bound_matches_library() {
    let o = crlb(&[
        "bound", "linear", "--d", "100", "--m", "200", "--alpha", "1", "--sigma-x2", "1", "--sigma-eps2", "0.1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let cfg = ModelConfig {
        d: 100,
        m: 200,
        sigma_eps2: 0.1,
        ..ModelConfig::default()
    };
    let lib = bound_linear_any(&cfg).unwrap().value;
    assert_eq!(field(stdout(&o).trim(), "value"), lib);
}

#[test]
fn two_layer_json_has_both_terms() {
    let o = crlb(&["bound", "two-layer", "--activation", "sigmoid", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let b1 = v["b1"].as_f64().unwrap();
    let b2 = v["b2"].as_f64().unwrap();
    assert_eq!(v["value"].as_f64().unwrap(), b1.max(b2));
    let cfg = ModelConfig::default();
    let lib = crlb_core::bounds::bound_two_layer(&cfg, Activation::Sigmoid).unwrap();
    assert_eq!(v["value"].as_f64().unwrap(), lib.value);
}

#[test]
fn sweep_csv_schema_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fig.cfg");
    std::fs::write(&cfg, "d = 12\nn1 = 12\nsigma_eps2 = 0.2\n").unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = crlb(&[
            "sweep", "gamma0", "--from", "0.5", "--to", "2", "--points", "3", "--activation", "tanh",
            "--config", cfg.to_str().unwrap(), "--sgd", "--epochs", "2", "--n-theta", "2", "--n-datasets", "2",
            "--n-test", "50", "--threads", "2", "--out", out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out).unwrap()
    };
    let a = run("a.csv");
    let b = run("b.csv");
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], crlb_core::experiments::SWEEP_HEADER);
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 9);
        assert_eq!(cols[0], "gamma0");
        assert_eq!(cols[8], "ok");
        let gen: f64 = cols[5].parse().unwrap();
        let bound: f64 = cols[4].parse().unwrap();
        assert!(gen > 0.0 && bound > 0.0);
    }
}

#[test]
fn seed_changes_sgd_but_not_bounds() {
    let base = ["sweep", "snr", "--from", "0", "--to", "10", "--points", "2", "--d", "10", "--n1", "10", "--sgd",
        "--epochs", "1", "--n-theta", "1", "--n-datasets", "1", "--n-test", "20"];
    let a = stdout(&crlb(&[&base[..], &["--seed", "1"]].concat()));
    let b = stdout(&crlb(&[&base[..], &["--seed", "2"]].concat()));
    let cols = |s: &str, i: usize| s.lines().skip(1).map(|l| l.split(',').nth(i).unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(cols(&a, 4), cols(&b, 4));
    assert_ne!(cols(&a, 5), cols(&b, 5));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(crlb(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(crlb(&["bound", "linear", "--d", "0"]).status.code(), Some(1));
    assert_eq!(crlb(&["constants", "--activation", "softplus"]).status.code(), Some(1));
    assert_eq!(crlb(&["mp", "integrate", "--gamma", "-1"]).status.code(), Some(1));
    assert_eq!(crlb(&["--help"]).status.code(), Some(0));
    assert_eq!(crlb(&["--version"]).status.code(), Some(0));
}

#[test]
fn invalid_input_writes_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");
    let o = crlb(&["sweep", "gamma0", "--from", "-1", "--to", "2", "--points", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "d = 10\nwidth = 3\n").unwrap();
    let o = crlb(&["constants", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert!(!out.exists());
}

#[test]
fn numerical_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.txt");
    let o = crlb(&[
        "sgd", "--d", "5", "--n1", "5", "--m", "20", "--lr-c", "1e6", "--epochs", "5", "--n-theta", "1",
        "--n-datasets", "1", "--n-test", "10", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(!out.exists());
}

#[test]
fn mp_commands() {
    let o = crlb(&["mp", "integrate", "--gamma", "2", "--integrand", "s2"]);
    assert!((field(stdout(&o).trim(), "value") - 3.0).abs() < 1e-10);
    let o = crlb(&["mp", "density", "--gamma", "0.5", "--points", "11"]);
    let s = stdout(&o);
    assert_eq!(s.lines().next(), Some("s,density"));
    assert_eq!(s.lines().count(), 12);
}

#[test]
fn verify_commands_report() {
    let o = crlb(&["verify", "stieltjes", "--u", "0.5,2"]);
    assert_eq!(o.status.code(), Some(0));
    for l in stdout(&o).lines().skip(1) {
        let res: f64 = l.split(',').nth(3).unwrap().parse().unwrap();
        assert!(res <= 1e-12);
    }
    let o = crlb(&["verify", "replacements", "--d", "20", "--n1", "20", "--m", "20", "--dims", "10,20", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let s = stdout(&o);
    assert_eq!(s.lines().next(), Some("check,dim,metric,trials"));
    assert_eq!(s.lines().count(), 5);
    let o = crlb(&["verify", "ar", "--d", "60", "--n1", "60"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn fisher_rank_of_linear_model_is_d() {
    let o = crlb(&["fisher-rank", "--d", "6", "--n1", "6", "--activation", "linear"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(field(stdout(&o).trim(), "rank"), 6.0);
}
