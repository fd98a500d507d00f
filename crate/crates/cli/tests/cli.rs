use std::process::Command;

fn kolmo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kolmo"))
}

#[test]
fn presets_are_listed() {
    let out = kolmo().arg("presets").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in kolmo_cli::presets::NAMES {
        assert!(text.contains(name), "{name}");
    }
}

#[test]
fn invalid_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"problem": {"steps": 1}, "paths": {"paths": 0}}"#).unwrap();
    let out = kolmo().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(kolmo_cli::exit::CONFIG_ERROR));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("steps") && err.contains("paths"), "{err}");

    let out = kolmo().args(["check", "everything"]).output().unwrap();
    assert_eq!(out.status.code(), Some(kolmo_cli::exit::CONFIG_ERROR));
}

#[test]
fn small_run_writes_a_report_independent_of_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, r#"{"problem": {"steps": 16}, "paths": {"paths": 4000}, "space": {"quad_order": 12}}"#)
        .unwrap();
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out_dir = dir.path().join(format!("out{threads}"));
        let status = kolmo()
            .args(["--threads", threads, "run", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap()
            .status;
        assert!(status.code() == Some(0) || status.code() == Some(1));
        for f in ["report.json", "timings.json", "u.csv", "y0_hist.csv"] {
            assert!(out_dir.join(f).exists(), "{f}");
        }
        let mut report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
        report["config"]["out"] = serde_json::Value::Null;
        reports.push(report);
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0]["bsde"].is_object());
}
