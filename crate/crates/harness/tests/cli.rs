use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn htdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htdc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/small.trace.jsonl")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, recipe: &str, name: &str) -> PathBuf {
    let r = dir.join(format!("{name}.recipe.json"));
    std::fs::write(&r, recipe).unwrap();
    let out = dir.join(format!("{name}.jsonl"));
    let o = htdc(&["gen-synthetic", "--recipe", s(&r), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn validate_trace_accepts_the_fixture() {
    let o = htdc(&["validate-trace", s(&fixture())]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("valid (6 steps, 0 violation(s))"));

    let o = htdc(&["validate-trace", "--json", s(&fixture())]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["valid"], true);
}

#[test]
fn validate_trace_rejects_a_corrupted_copy() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = std::fs::read(fixture()).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] = if bytes[mid] == b'A' { b'B' } else { b'A' };
    let bad = dir.path().join("bad.trace.jsonl");
    std::fs::write(&bad, &bytes).unwrap();
    let o = htdc(&["validate-trace", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("INVALID"));
}

#[test]
fn replay_verifies_the_sidecar() {
    let o = htdc(&["replay", "--trace", s(&fixture()), "--verify"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).trim_end().ends_with("PASS"));
}

#[test]
fn replay_flags_a_tampered_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture().with_extension("jsonl.ref.json")).unwrap()).unwrap();
    let x = &mut sc["steps"][2]["scores"]["full"][0];
    *x = serde_json::json!(x.as_f64().unwrap() + 1e-3);
    let path = dir.path().join("tampered.ref.json");
    std::fs::write(&path, sc.to_string()).unwrap();
    let o = htdc(&["replay", "--trace", s(&fixture()), "--sidecar", s(&path), "--verify"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("worst: step 2"));
    assert!(stdout(&o).trim_end().ends_with("FAIL"));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&htdc(&["frobnicate"])), 1);
    assert_eq!(code(&htdc(&["run", "--out", "x"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), r#"{"family": "calm", "count": 3}"#, "calm");
    let out = dir.path().join("out");
    assert_eq!(
        code(&htdc(&[
            "run",
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--decoder",
            "greedy"
        ])),
        1
    );
    assert_eq!(
        code(&htdc(&[
            "sweep",
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--axis",
            "depth",
            "--values",
            "1"
        ])),
        1
    );
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"hesitation": {"w_minimum": 0.3}}"#).unwrap();
    assert_eq!(
        code(&htdc(&[
            "run",
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--config",
            s(&cfg)
        ])),
        1
    );
    std::fs::write(&cfg, r#"{"hesitation": {"alpha": 1.0}}"#).unwrap();
    assert_eq!(
        code(&htdc(&[
            "run",
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--config",
            s(&cfg)
        ])),
        1
    );
    assert_eq!(code(&htdc(&["--help"])), 0);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&htdc(&["run", "--dataset", s(&missing), "--out", s(&out)])), 2);
    let junk = dir.path().join("junk.jsonl");
    std::fs::write(&junk, "{\"id\": \"a\"}\n").unwrap();
    let o = htdc(&["run", "--dataset", s(&junk), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("junk.jsonl:1:"));
}

#[test]
fn default_config_round_trips_through_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.json");
    assert_eq!(code(&htdc(&["default-config", "--out", s(&cfg)])), 0);
    let data = gen(dir.path(), r#"{"family": "prior_bias", "count": 20}"#, "pb");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&htdc(&["run", "--dataset", s(&data), "--out", s(&a)])), 0);
    assert_eq!(
        code(&htdc(&[
            "run",
            "--dataset",
            s(&data),
            "--out",
            s(&b),
            "--config",
            s(&cfg)
        ])),
        0
    );
    let read = |d: &Path| std::fs::read_to_string(d.join("report.json")).unwrap();
    let (ra, rb): (serde_json::Value, serde_json::Value) = (
        serde_json::from_str(&read(&a)).unwrap(),
        serde_json::from_str(&read(&b)).unwrap(),
    );
    assert_eq!(ra["fingerprint"], rb["fingerprint"]);
    for f in ["report.md", "per_instance.csv"] {
        assert!(a.join(f).is_file());
    }
    let csv = std::fs::read_to_string(a.join("per_instance.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("id,chosen,truth,triggered,flipped,forward_passes,w_t,hes")
    );
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn gen_synthetic_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let recipe = r#"{"family": "mixed", "count": 40, "seed": 5}"#;
    let a = std::fs::read(gen(dir.path(), recipe, "a")).unwrap();
    let b = std::fs::read(gen(dir.path(), recipe, "b")).unwrap();
    assert_eq!(a, b);
    let r = dir.path().join("a.recipe.json");
    let c = dir.path().join("c.jsonl");
    assert_eq!(
        code(&htdc(&[
            "gen-synthetic",
            "--recipe",
            s(&r),
            "--out",
            s(&c),
            "--seed",
            "6"
        ])),
        0
    );
    assert_ne!(std::fs::read(&c).unwrap(), a);

    std::fs::write(&r, r#"{"family": "chaotic", "count": 4}"#).unwrap();
    assert_ne!(code(&htdc(&["gen-synthetic", "--recipe", s(&r), "--out", s(&c)])), 0);
}

#[test]
fn run_over_a_trace_backend() {
    let dir = tempfile::tempdir().unwrap();
    let lines: Vec<String> = (0..6)
        .map(|t| {
            serde_json::json!({
                "id": format!("t{t}"),
                "question": "Is there a dog in the image?",
                "scenario": {"step": t},
                "candidates": {"candidates": [
                    {"label": "yes", "token_ids": [3, 4]},
                    {"label": "no", "token_ids": [10, 11]}
                ]},
                "ground_truth": "yes"
            })
            .to_string()
        })
        .collect();
    let data = dir.path().join("steps.jsonl");
    std::fs::write(&data, lines.join("\n") + "\n").unwrap();
    let out = dir.path().join("out");
    let backend = format!("trace:{}", fixture().display());
    let o = htdc(&["run", "--dataset", s(&data), "--out", s(&out), "--backend", &backend]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["decoded"], 6);
    let n_fwd = r["n_fwd"].as_f64().unwrap();
    let rate = r["trigger_rate"].as_f64().unwrap();
    assert!((n_fwd - (1.0 + 2.0 * rate)).abs() < 1e-12);

    // Inline scenarios cannot be mixed with a shared backend.
    let calm = gen(dir.path(), r#"{"family": "calm", "count": 2}"#, "calm");
    let o = htdc(&["run", "--dataset", s(&calm), "--out", s(&out), "--backend", &backend]);
    assert_eq!(code(&o), 2);
}

#[test]
fn calibrate_gate_hits_the_requested_rate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(
        dir.path(),
        r#"{"family": "mixed", "count": 400, "weights": {"calm": 0, "oscillating": 0, "prior_bias": 0, "procedural": 1}}"#,
        "proc",
    );
    let cfg = dir.path().join("gate.json");
    let o = htdc(&[
        "calibrate-gate",
        "--dataset",
        s(&data),
        "--target-rate",
        "0.1",
        "--out",
        s(&cfg),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("(40 of 400 steps trigger"));
    let out = dir.path().join("out");
    assert_eq!(
        code(&htdc(&[
            "run",
            "--dataset",
            s(&data),
            "--out",
            s(&out),
            "--config",
            s(&cfg)
        ])),
        0
    );
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["trigger_rate"].as_f64(), Some(0.1));
    assert_eq!(r["n_fwd"].as_f64(), Some(1.2));
}

#[test]
fn sweep_writes_one_run_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), r#"{"family": "oscillating", "count": 10}"#, "osc");
    let out = dir.path().join("sweep");
    let o = htdc(&[
        "sweep",
        "--dataset",
        s(&data),
        "--out",
        s(&out),
        "--axis",
        "gate_mode_static_vs_dynamic",
        "--values",
        "static,dynamic",
    ]);
    assert_eq!(code(&o), 0);
    for v in ["static", "dynamic"] {
        assert!(out
            .join(format!("gate_mode_static_vs_dynamic={v}/report.json"))
            .is_file());
    }
    let sw: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sw["rows"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(out.join("sweep.md"))
        .unwrap()
        .contains("| static |"));
}
