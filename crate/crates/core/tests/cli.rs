use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sdserve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdserve"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn eq1_doc(dir: &TempDir, name: &str, c1: f64, c2: f64) -> PathBuf {
    write(
        dir,
        name,
        &format!(
            r#"{{"version": 1, "model": "eq1", "parameters": {{"c1": {c1}, "c2": {c2}}},
                "provenance": {{"tool_version": "test"}}}}"#
        ),
    )
}

const EQ3: &str = r#"{"version": 1, "model": "eq3",
    "parameters": {"c1p": 0.1, "c1v": 0.02, "c1d": 0.002, "c2p": 0.001, "c2v": 0.0002, "c2d": 0.00002},
    "workload": {"prefill_tokens": 128, "decode_tokens": 128},
    "provenance": {"tool_version": "test"}}"#;

const HEADER: &str = "model_id,hardware_id,prefill_tokens,decode_tokens,mode,alpha,draft_k,rps,mean_latency_s,p95_latency_s,p99_latency_s,n_requests\n";

fn sim_config(dir: &TempDir, arrival: &str) -> PathBuf {
    write(
        dir,
        "sim.json",
        &format!(
            r#"{{
            "step_costs": {{"verify": {{"sigma1": 0.01, "sigma2": 0.002}}}},
            "workload": {{"model_id": "toy", "hardware_id": "sim", "prefill_tokens": 64,
                          "decode_tokens": 256, "mode": "dense"}},
            "arrival": "{arrival}",
            "seed": 7,
            "measured_requests": 3000
        }}"#
        ),
    )
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in ["fit", "predict", "speedup", "optimize-k", "simulate", "sweep", "scaling"] {
        let o = sdserve(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("--"), "{sub}");
    }
    assert_eq!(sdserve(&["--help"]).status.code(), Some(0));
    assert_eq!(sdserve(&["--version"]).status.code(), Some(0));
    assert_eq!(sdserve(&["fit", "--bogus"]).status.code(), Some(1));
}

#[test]
fn predict_dense_law() {
    let dir = TempDir::new().unwrap();
    let doc = eq1_doc(&dir, "c.json", 2.0, 0.5);
    let o = sdserve(&["predict", "--coeffs", path_str(&doc), "--rps", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "4.00000");

    let o = sdserve(&["predict", "--coeffs", path_str(&doc), "--rps", "2.5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("1/c2"), "{}", stderr(&o));
}

#[test]
fn predict_without_speculation_matches_dense() {
    let dir = TempDir::new().unwrap();
    let sd = write(&dir, "sd.json", EQ3);
    // Dense form of the same costs at g = 128.
    let c1 = 0.1 + 128.0 * 0.02;
    let c2 = 0.001 + 128.0 * 0.0002;
    let dense = eq1_doc(&dir, "d.json", c1, c2);
    let a = sdserve(&["predict", "--coeffs", path_str(&sd), "--rps", "10", "--k", "0"]);
    let b = sdserve(&["predict", "--coeffs", path_str(&dense), "--rps", "10"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn missing_file_names_path() {
    let o = sdserve(&[
        "fit", "--input", "/nonexistent/sweep.csv", "--model", "eq1", "--output", "/tmp/x.json",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/sweep.csv"), "{}", stderr(&o));
}

#[test]
fn malformed_config_is_a_parse_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.json", "{\n  \"seed\": ,\n}");
    let out = dir.path().join("s.csv");
    let o = sdserve(&["sweep", "--config", path_str(&cfg), "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn eq3_single_k_warns() {
    let dir = TempDir::new().unwrap();
    let mut text = HEADER.to_string();
    let (c1, c2) = (1.2, 0.05);
    for i in 1..=9 {
        let rps = f64::from(i);
        let l = c1 / (1.0 - rps * c2);
        text.push_str(&format!("m,h,128,128,sd,0.8,3,{rps},{l},,,100\n"));
    }
    let input = write(&dir, "sweep.csv", &text);
    let out = dir.path().join("c.json");
    let o = sdserve(&[
        "fit", "--input", path_str(&input), "--model", "eq3", "--output", path_str(&out),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("IdentifiabilityWarning"), "{}", stderr(&o));
}

#[test]
fn sweep_then_fit_recovers_analytic_coefficients() {
    let dir = TempDir::new().unwrap();
    let cfg = sim_config(&dir, "constant_rate");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let o = sdserve(&["sweep", "--config", path_str(&cfg), "--out", path_str(&a)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("rps*L="));
    let o = sdserve(&["sweep", "--config", path_str(&cfg), "--out", path_str(&b)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let coeffs = dir.path().join("c.json");
    let o = sdserve(&[
        "fit", "--input", path_str(&a), "--model", "eq1", "--output", path_str(&coeffs), "--strict",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let value = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{name} ="))).unwrap();
        line.split('=').nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap()
    };
    assert!(value("r2") >= 0.999, "{text}");
    assert!((value("c1") / (256.0 * 0.01) - 1.0).abs() < 0.02, "{text}");
    assert!((value("c2") / (256.0 * 0.002) - 1.0).abs() < 0.02, "{text}");
    let doc = fs::read_to_string(&coeffs).unwrap();
    assert!(doc.contains("\"sha256\""));
}

#[test]
fn simulate_marks_saturated_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = sim_config(&dir, "poisson");
    let out = dir.path().join("s.csv");
    // Saturation sits near 1 / (256 * 0.002) ≈ 1.95 requests per second.
    let o = sdserve(&["simulate", "--config", path_str(&cfg), "--rps", "3", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("SATURATED"), "{}", stdout(&o));
    assert_eq!(fs::read_to_string(&out).unwrap(), HEADER);

    let o = sdserve(&["simulate", "--config", path_str(&cfg), "--rps", "1", "--out", path_str(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!stdout(&o).contains("SATURATED"));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn speedup_summary_and_identity() {
    let dir = TempDir::new().unwrap();
    let dense = eq1_doc(&dir, "d.json", 10.0, 0.2);
    let slower = eq1_doc(&dir, "s.json", 4.0, 0.24);
    let o = sdserve(&[
        "speedup", "--dense", path_str(&dense), "--sd", path_str(&slower), "--rps-grid", "0:4:5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("rps,r,speedup_formula,speedup_ratio\n"));
    assert_eq!(text.lines().last(), Some("speedup decreases with load"));
    for line in text.lines().skip(1).take(5) {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cols[2] - cols[3]).abs() <= 1e-12 * cols[3], "{line}");
    }

    let o = sdserve(&[
        "speedup", "--dense", path_str(&dense), "--sd", path_str(&dense), "--rps-grid", "0:4:5",
    ]);
    let text = stdout(&o);
    assert!(text.lines().skip(1).take(5).all(|l| l.split(',').nth(2).unwrap().parse::<f64>().unwrap() == 1.0), "{text}");
    assert_eq!(text.lines().last(), Some("speedup is independent of load"));
}

#[test]
fn optimize_k_reports_choice() {
    let dir = TempDir::new().unwrap();
    let doc = write(&dir, "sd.json", EQ3);
    let o = sdserve(&["optimize-k", "--coeffs", path_str(&doc), "--alpha", "0.8", "--rps", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("k* = "));
    let o = sdserve(&["optimize-k", "--coeffs", path_str(&doc), "--alpha", "0", "--rps", "0"]);
    assert!(stdout(&o).contains("speculation off"), "{}", stdout(&o));
    let o = sdserve(&["optimize-k", "--coeffs", path_str(&doc), "--alpha", "0.8", "--rps", "1000"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn scaling_with_leave_n_out() {
    let dir = TempDir::new().unwrap();
    let mut text = "verifier_params,coefficient\n".to_string();
    for (i, x) in [0.6, 1.7, 4.0, 8.0, 14.0, 32.0].iter().enumerate() {
        let wobble = if i % 2 == 0 { 1.02 } else { 0.98 };
        text.push_str(&format!("{x},{}\n", (0.001 + 0.002 * x) * wobble));
    }
    let table = write(&dir, "t.csv", &text);
    let o = sdserve(&[
        "scaling", "--coeff-table", path_str(&table), "--predictor", "verifier_params", "--leave-n", "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("leave-2-out over 15 enumerated folds"), "{}", stdout(&o));

    let o = sdserve(&[
        "scaling", "--coeff-table", path_str(&table), "--predictor", "verifier_params", "--leave-n", "5",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
