use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dasd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dasd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn default_config() -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    fs::read_to_string(path).unwrap()
}

/// The shipped defaults with some keys replaced (or dropped when the value is `None`).
fn config_with(overrides: &[(&str, Option<&str>)]) -> String {
    default_config()
        .lines()
        .filter_map(|line| {
            let key = line.split('=').next().unwrap_or("").trim();
            match overrides.iter().find(|(k, _)| *k == key) {
                Some((_, Some(v))) => Some(format!("{key} = {v}")),
                Some((_, None)) => None,
                None => Some(line.to_string()),
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn small(mode: &str, beta: &str) -> String {
    config_with(&[
        ("mode", Some(&format!("\"{mode}\""))),
        ("beta", Some(beta)),
        ("updates", Some("6")),
        ("batch_prompts", Some("4")),
        ("group_size", Some("4")),
        ("warmup_traces", Some("2000")),
        ("eval_instances", Some("8")),
        ("eval_k", Some("4")),
        ("eval_every", Some("3")),
        ("checkpoint_every", Some("3")),
    ])
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_key_fails_before_creating_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &config_with(&[("rho", None)]));
    let out = tmp.path().join("run");
    let o = dasd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("rho"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn out_of_range_value_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &config_with(&[("rho", Some("1.5"))]));
    let out = tmp.path().join("run");
    let o = dasd(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(dasd(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn eval_on_missing_run_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = dasd(&["eval", "--run", tmp.path().join("none").to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn grpo_and_zero_beta_dasd_report_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (mode, beta) in [("grpo", "1.0"), ("dasd", "0.0")] {
        let cfg = write(tmp.path(), &format!("{mode}.toml"), &small(mode, beta));
        let run = tmp.path().join(mode);
        let o = dasd(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(run);
    }
    let report = tmp.path().join("report");
    let o = dasd(&[
        "report",
        runs[0].to_str().unwrap(),
        runs[1].to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = fs::read_to_string(report.join("report.csv")).unwrap();
    let lines: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0][0], "run");
    let step = lines[0].iter().position(|&c| c == "step").unwrap();
    assert_eq!(lines[1][step + 1..], lines[2][step + 1..]);
    assert_ne!(lines[1][1], lines[2][1]);
    assert!(fs::read_to_string(report.join("report.txt"))
        .unwrap()
        .contains("avg_at_k"));
}

#[test]
fn train_eval_and_probes_write_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "dasd.toml", &small("dasd", "1.0"));
    let run = tmp.path().join("run");
    let r = run.to_str().unwrap();
    let o = dasd(&["train", "--config", cfg.to_str().unwrap(), "--out", r]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "config.toml",
        "instances.txt",
        "stats.jsonl",
        "report.csv",
        "eval/final.json",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("stats.jsonl")).unwrap().lines().count(), 6);

    // a second train on the same directory resumes from the final checkpoint
    let o = dasd(&["train", "--config", cfg.to_str().unwrap(), "--out", r]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(run.join("stats.jsonl")).unwrap().lines().count(), 6);

    let o = dasd(&["eval", "--run", r, "--name", "again"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(run.join("eval/again.json")).unwrap().len(),
        fs::read_to_string(run.join("eval/final.json")).unwrap().len()
    );

    for args in [
        vec!["probe", "pressure", "--run", r],
        vec!["probe", "tv-shift", "--run", r, "--sign", "minus"],
        vec![
            "intervene",
            "fork",
            "--run",
            r,
            "--target",
            "high",
            "--per-instance",
            "2",
        ],
        vec![
            "intervene",
            "revision",
            "--run",
            r,
            "--action",
            "preserve",
            "--per-instance",
            "2",
        ],
    ] {
        let o = dasd(&args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    assert!(run.join("probes/pressure.json").exists());
    assert!(run.join("probes/tv_shift_minus.jsonl").exists());

    // 8 instances x 2 rollouts is below the minimum sample size for prefix interventions
    let o = dasd(&["intervene", "prefix", "--run", r, "--per-instance", "2"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
