mod common;

use common::{fplab, s, write_config, TINY};

#[test]
fn identical_runs_write_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = fplab(&["run", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = std::fs::read(a.join("rounds.jsonl")).unwrap();
    assert_eq!(log.iter().filter(|&&c| c == b'\n').count(), 4);
    assert_eq!(log, std::fs::read(b.join("rounds.jsonl")).unwrap());
    for f in ["config.toml", "initial_model.fplb", "final_model.fplb", "mis.json", "summary.csv", "generator.fplb", "generator.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let o = fplab(&["check", s(&a)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(fplab(&["run", "--config", s(&cfg), "--out", s(&a)]).status.success());
    assert!(fplab(&["run", "--config", s(&cfg), "--out", s(&b), "--seed", "11"]).status.success());
    assert_ne!(std::fs::read(a.join("rounds.jsonl")).unwrap(), std::fs::read(b.join("rounds.jsonl")).unwrap());
    let snap = std::fs::read_to_string(b.join("config.toml")).unwrap();
    assert!(snap.contains("seed = 11"));
}

#[test]
fn zero_rounds_leave_an_empty_log_and_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "zero.toml", &TINY.replace("rounds = 4", "rounds = 0"));
    let out = dir.path().join("run");
    let o = fplab(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("rounds.jsonl")).unwrap().len(), 0);
    assert!(out.join("initial_model.fplb").is_file());
    assert_eq!(std::fs::read_to_string(out.join("summary.csv")).unwrap().lines().nth(1), Some("0,NA,NA,NA"));
    // an empty log still plots
    let o = fplab(&["plot", s(&out)]);
    assert!(o.status.success());
    let svg = std::fs::read_to_string(out.join("acc_asr.svg")).unwrap();
    assert!(svg.contains("class=\"axes\"") && !svg.contains("<polyline"));
    assert!(fplab(&["check", s(&out)]).status.success());
}

#[test]
fn validation_failures_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write_config(dir.path(), "bad.toml", &TINY.replace("pmr = 0.5", "pmr = 1.5"));
    let o = fplab(&["run", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pmr"));

    let unknown = write_config(dir.path(), "unknown.toml", &format!("{TINY}\n[extra]\nx = 1\n"));
    assert_eq!(fplab(&["run", "--config", s(&unknown)]).status.code(), Some(2));

    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let o = fplab(&["sweep", "--config", s(&cfg), "--param", "gamma", "--values", "1,2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn plot_without_inputs_lists_expected_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = fplab(&["plot", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rounds.jsonl") && err.contains("sweep.csv"), "{err}");
}

#[test]
fn tampered_summary_fails_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("run");
    assert!(fplab(&["run", "--config", s(&cfg), "--out", s(&out)]).status.success());
    std::fs::write(out.join("summary.csv"), "rounds,final_acc,final_asr,mis\n4,0.123000,0.000000,NA\n").unwrap();
    assert_eq!(fplab(&["check", s(&out)]).status.code(), Some(1));
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.toml", TINY);
    let out = dir.path().join("data");
    assert!(fplab(&["gen-data", "--config", s(&cfg), "--out", s(&out)]).status.success());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("train/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 36);
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 3);
}
