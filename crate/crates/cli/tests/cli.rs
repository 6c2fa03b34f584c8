use std::path::Path;
use std::process::{Command, Output};

fn cilab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cilab")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_then_diagnose_a_saved_processor() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let proc = dir.path().join("f.json");
    let trace = dir.path().join("trace.csv");
    stdout(&cilab(&["gen", "--n", "500", "--seed", "3", "--out", p(&data)]));
    for f in ["X.csv", "Z.csv", "Y.csv", "manifest.json"] {
        assert!(data.join(f).exists());
    }
    let demo = stdout(&cilab(&["demo", "--n0", "30", "--save-processor", p(&proc), "--trace", p(&trace)]));
    assert!(demo.contains("standard  test_mse") && demo.contains("processor test_mse"));
    let header = std::fs::read_to_string(&trace).unwrap();
    assert!(header.starts_with("step,total,downstream_term,pretext_term,grad_norm,ms"));
    let diag = stdout(&cilab(&["diagnose", "--processor", p(&proc), "--data", p(&data)]));
    assert!(diag.contains("c1_residual") && diag.contains("c2_gap"));
}

#[test]
fn sweep_from_config_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.cfg");
    std::fs::write(&cfg, "preset = lambda\nvalues = 0.1, 1.5\nrepeats = 2\nn1 = 500\nouter_steps = 10\n").unwrap();
    let out = dir.path().join("out");
    let text = stdout(&cilab(&["sweep", "--config", p(&cfg), "--no-baseline", "--out", p(&out)]));
    assert!(text.starts_with("value,mean_mse,std_mse,ci_low,ci_high,repeats"));
    assert!(out.join("summary.csv").exists() && !out.join("baseline_summary.csv").exists());
}

#[test]
fn capacity_reports_a_rate() {
    let text = stdout(&cilab(&["capacity", "--class", "linear", "--d", "10", "--n", "8", "--trials", "3", "--tol", "1e-8"]));
    assert!(text.contains("success_rate 1.0000"));
}

#[test]
fn bad_input_fails_cleanly() {
    let o = cilab(&["sweep", "--preset", "nope", "--out", "/tmp/unused-cilab"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
}
