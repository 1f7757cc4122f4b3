use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hallucheck(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hallucheck"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hallucheck(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn demo(dir: &Path, items: usize, flip: &str) -> String {
    let d = dir.to_str().unwrap();
    ok(&["demo", "--dir", d, "--items", &items.to_string(), "--flip-rate", flip]);
    dir.join("manifest.toml").to_str().unwrap().to_owned()
}

fn report_auroc(out: &Path, metric: &str) -> f64 {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    v["metrics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["metric_name"] == metric)
        .unwrap()["auroc"]
        .as_f64()
        .unwrap()
}

#[test]
fn demo_run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = demo(dir.path(), 40, "0");
    let stdout = ok(&["run", "--manifest", &manifest, "--svg"]);
    assert!(stdout.contains("| Metric | AUROC | AUPRC | n_pos | n_neg |"));
    let out = dir.path().join("out");
    for f in ["items.jsonl", "run.json", "scores.jsonl", "report.json", "summary.md", "pr_curve.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    for m in ["f_certain", "f_uncertain", "f_ensemble", "entropy", "selfcheck_nli"] {
        assert_eq!(report_auroc(&out, m), 1.0, "{m}");
    }

    let md = ok(&["report", "--manifest", &manifest]);
    assert!(md.contains("f_ensemble"));
    let written = dir.path().join("r.md");
    ok(&["report", "--report", out.join("report.json").to_str().unwrap(), "--out", written.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(written).unwrap(), md);
}

#[test]
fn staged_commands_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = demo(dir.path(), 20, "0.1");
    let out = dir.path().join("elsewhere");
    let o = out.to_str().unwrap();
    let common = ["--manifest", &manifest, "--out", o, "--metrics", "f_certain,f_uncertain,f_ensemble"];
    let with = |cmd: &'static str, extra: &[&'static str]| {
        let mut a = vec![cmd];
        a.extend_from_slice(&common);
        a.extend_from_slice(extra);
        ok(&a)
    };
    with("collect", &["--subset-seed", "3", "--subset-size", "10"]);
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["subset"]["ids"].as_array().unwrap().len(), 10);

    with("collect", &[]);
    with("score", &[]);
    with("eval", &["--threshold-normalization", "sigmoid"]);
    let scores = fs::read_to_string(out.join("scores.jsonl")).unwrap();
    assert_eq!(scores.lines().count(), 20 * 3);
    let auroc = report_auroc(&out, "f_ensemble");
    assert!((0.5..1.0).contains(&auroc), "{auroc}");
    assert!(!dir.path().join("out").exists());

    with("triage", &[]);
    assert_eq!(fs::read_to_string(out.join("triage.jsonl")).unwrap().lines().count(), 20);
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "corpus_path = \"missing.jsonl\"\n").unwrap();
    let out = hallucheck(&["collect", "--manifest", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let manifest = demo(dir.path(), 4, "0");
    let out = hallucheck(&["collect", "--manifest", &manifest, "--metrics", "nonsense"]);
    assert!(!out.status.success());

    let out = hallucheck(&["collect", "--manifest", &manifest, "--subset-seed", "1"]);
    assert!(!out.status.success());

    let out = hallucheck(&["score", "--manifest", &manifest]);
    assert!(!out.status.success(), "scoring before collect must fail");
}
