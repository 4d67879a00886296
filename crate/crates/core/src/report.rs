//! Run-directory persistence and multi-run reports.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.toml        copy of the resolved configuration
//! instances.txt      pinned evaluation instances
//! stats.jsonl        one UpdateStats record per line, tagged with STATS_SCHEMA
//! checkpoints/       step-NNNNNN.ckpt files
//! eval/              <name>.json HealthReport plus plot-ready CSVs
//! probes/            <name>.jsonl records and <name>.json summaries
//! report.txt         plain-text summary
//! report.csv         the same rows with REPORT_COLUMNS
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, PolicyCheckpoint};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::metrics::{entropy_histogram, pass_curve, pooled_entropies, EvalSample, HealthReport};
use crate::taskenv::{load_instances, save_instances, TaskInstance};
use crate::trainer::{eval_set, Trainer, UpdateStats};

pub const STATS_SCHEMA: &str = "dasd.stats.v1";
pub const EVAL_SCHEMA: &str = "dasd.eval.v1";
pub const PROBE_SCHEMA: &str = "dasd.probe.v1";

/// Columns of `report.csv`, in order.
pub const REPORT_COLUMNS: [&str; 18] = [
    "run",
    "mode",
    "seed",
    "step",
    "avg_at_k",
    "pass_at_1",
    "pass_at_k",
    "step_acc",
    "first_error_step",
    "correct_step_ratio",
    "e_density",
    "rev_rate",
    "distinct3",
    "entropy_p50",
    "entropy_p80",
    "entropy_p95",
    "mean_length",
    "final_reward",
];

/// Number of leading identity columns in [`REPORT_COLUMNS`].
pub const REPORT_ID_COLUMNS: usize = 4;

/// Handle on a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct StatsLine {
    schema: String,
    #[serde(flatten)]
    stats: UpdateStats,
}

/// Evaluation document written to `eval/<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDocument {
    pub schema: String,
    pub step: u64,
    pub health: HealthReport,
}

#[derive(Serialize)]
struct ProbeLine<'a, T> {
    schema: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))
}

impl RunDir {
    /// Creates the directory tree and writes the config copy. Fails if the
    /// directory already holds a run.
    pub fn create(root: &Path, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if root.join("config.toml").exists() {
            return Err(Error::Validation(format!("{} already contains a run", root.display())));
        }
        for sub in ["checkpoints", "eval", "probes"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let run = Self {
            root: root.to_path_buf(),
        };
        write_file(&run.config_path(), &config.to_toml())?;
        write_file(&run.stats_path(), "")?;
        Ok(run)
    }

    /// Opens an existing run directory.
    pub fn open(root: &Path) -> Result<Self> {
        let run = Self {
            root: root.to_path_buf(),
        };
        if !run.config_path().is_file() {
            return Err(Error::Validation(format!("{} is not a run directory", root.display())));
        }
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn stats_path(&self) -> PathBuf {
        self.root.join("stats.jsonl")
    }

    pub fn instances_path(&self) -> PathBuf {
        self.root.join("instances.txt")
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::load(&self.config_path())
    }

    pub fn write_instances(&self, instances: &[TaskInstance]) -> Result<()> {
        save_instances(instances, &self.instances_path())
    }

    pub fn instances(&self) -> Result<Vec<TaskInstance>> {
        load_instances(&self.instances_path())
    }

    pub fn append_stats(&self, stats: &UpdateStats) -> Result<()> {
        let path = self.stats_path();
        let line = serde_json::to_string(&StatsLine {
            schema: STATS_SCHEMA.into(),
            stats: stats.clone(),
        })
        .map_err(|e| Error::Serde(e.to_string()))?;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    /// Drops stats lines at or beyond `step`, used when resuming.
    pub fn truncate_stats(&self, step: u64) -> Result<()> {
        let kept: Vec<UpdateStats> = self.stats()?.into_iter().filter(|s| s.step < step).collect();
        write_file(&self.stats_path(), "")?;
        kept.iter().try_for_each(|s| self.append_stats(s))
    }

    pub fn stats(&self) -> Result<Vec<UpdateStats>> {
        let path = self.stats_path();
        read_file(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let line: StatsLine = serde_json::from_str(l).map_err(|e| Error::Corrupt {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                if line.schema != STATS_SCHEMA {
                    return Err(Error::VersionMismatch {
                        found: line.schema,
                        expected: STATS_SCHEMA.into(),
                    });
                }
                Ok(line.stats)
            })
            .collect()
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:06}.ckpt"))
    }

    pub fn save_checkpoint(&self, checkpoint: &PolicyCheckpoint) -> Result<PathBuf> {
        let path = self.checkpoint_path(checkpoint.step);
        save_checkpoint(checkpoint, &path)?;
        Ok(path)
    }

    /// Checkpoint with the highest step, if any.
    pub fn latest_checkpoint(&self) -> Result<Option<PolicyCheckpoint>> {
        let dir = self.root.join("checkpoints");
        let mut names: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("step-") && n.ends_with(".ckpt"))
            .collect();
        names.sort();
        names.last().map(|n| load_checkpoint(&dir.join(n))).transpose()
    }

    /// Writes `eval/<name>.json`, `eval/<name>_pass_curve.csv` and
    /// `eval/<name>_entropy_hist.csv`.
    pub fn write_eval(&self, name: &str, step: u64, samples: &[EvalSample], vocab_size: usize) -> Result<HealthReport> {
        let health = HealthReport::from_samples(samples)?;
        let dir = self.root.join("eval");
        let doc = EvalDocument {
            schema: EVAL_SCHEMA.into(),
            step,
            health: health.clone(),
        };
        write_file(&dir.join(format!("{name}.json")), &to_json(&doc)?)?;
        let mut curve = String::from("k,pass_at_k\n");
        for (i, p) in pass_curve(samples)?.iter().enumerate() {
            curve.push_str(&format!("{},{p}\n", i + 1));
        }
        write_file(&dir.join(format!("{name}_pass_curve.csv")), &curve)?;
        let hist = entropy_histogram(&pooled_entropies(samples), 20, vocab_size)?;
        let mut csv = String::from("bin_lo,bin_hi,count,log10_count\n");
        for i in 0..hist.counts.len() {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                hist.edges[i],
                hist.edges[i + 1],
                hist.counts[i],
                hist.log10_counts[i]
            ));
        }
        write_file(&dir.join(format!("{name}_entropy_hist.csv")), &csv)?;
        Ok(health)
    }

    pub fn read_eval(&self, name: &str) -> Result<EvalDocument> {
        let path = self.root.join("eval").join(format!("{name}.json"));
        let doc: EvalDocument = serde_json::from_str(&read_file(&path)?).map_err(|e| Error::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if doc.schema != EVAL_SCHEMA {
            return Err(Error::VersionMismatch {
                found: doc.schema,
                expected: EVAL_SCHEMA.into(),
            });
        }
        Ok(doc)
    }

    /// Writes `probes/<name>.jsonl` (one record per line) and
    /// `probes/<name>.json` (the summary).
    pub fn write_probe<R: Serialize, S: Serialize>(&self, name: &str, records: &[R], summary: &S) -> Result<()> {
        let dir = self.root.join("probes");
        let mut lines = String::new();
        for r in records {
            let line = serde_json::to_string(&ProbeLine {
                schema: PROBE_SCHEMA,
                record: r,
            })
            .map_err(|e| Error::Serde(e.to_string()))?;
            lines.push_str(&line);
            lines.push('\n');
        }
        write_file(&dir.join(format!("{name}.jsonl")), &lines)?;
        let doc = serde_json::json!({ "schema": PROBE_SCHEMA, "summary": summary });
        write_file(&dir.join(format!("{name}.json")), &to_json(&doc)?)
    }

    /// Report row built from the config and the `final` evaluation.
    pub fn summary(&self) -> Result<ReportRow> {
        let cfg = self.config()?;
        let eval = self.read_eval("final")?;
        let stats = self.stats()?;
        let name = self
            .root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| cfg.label());
        Ok(ReportRow::new(
            name,
            &cfg,
            eval.step,
            &eval.health,
            stats.last().map(|s| s.mean_reward),
        ))
    }
}

/// One row of a multi-run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub mode: String,
    pub seed: u64,
    pub step: u64,
    /// Metric values in the order of `REPORT_COLUMNS[REPORT_ID_COLUMNS..]`.
    pub metrics: Vec<f64>,
}

impl ReportRow {
    pub fn new(run: String, config: &TrainConfig, step: u64, h: &HealthReport, final_reward: Option<f64>) -> Self {
        let k = h.pass_at_k.len();
        Self {
            run,
            mode: config.mode.name().into(),
            seed: config.master_seed,
            step,
            metrics: vec![
                h.avg_at_k,
                h.pass_at(1),
                h.pass_at(k),
                h.steps.step_acc,
                h.steps.first_error_step,
                h.steps.correct_step_ratio,
                h.exploration.e_density,
                h.exploration.rev_rate,
                h.exploration.distinct3,
                h.entropy_p50,
                h.entropy_p80,
                h.entropy_p95,
                h.mean_length,
                final_reward.unwrap_or(f64::NAN),
            ],
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `report.csv` contents.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let mut fields = vec![
            csv_field(&r.run),
            r.mode.clone(),
            r.seed.to_string(),
            r.step.to_string(),
        ];
        fields.extend(r.metrics.iter().map(|m| m.to_string()));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// `report.txt` contents: an aligned table with four decimals.
pub fn render_text(rows: &[ReportRow]) -> String {
    let mut table: Vec<Vec<String>> = vec![REPORT_COLUMNS.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        let mut line = vec![r.run.clone(), r.mode.clone(), r.seed.to_string(), r.step.to_string()];
        line.extend(r.metrics.iter().map(|m| format!("{m:.4}")));
        table.push(line);
    }
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len())
        .map(|c| table.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in &table {
        let cells: Vec<String> = line.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Writes `report.txt` and `report.csv` into `dir`.
pub fn write_report(dir: &Path, rows: &[ReportRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.txt"), &render_text(rows))?;
    write_file(&dir.join("report.csv"), &render_csv(rows))
}

/// Trains `config` into `root`, resuming from the latest checkpoint when the
/// directory already holds a run of the same config. Writes stats,
/// checkpoints and evaluation snapshots at the configured cadences, then the
/// final checkpoint, the `final` evaluation and a one-row report.
pub fn execute_run<F>(root: &Path, config: &TrainConfig, mut progress: F) -> Result<ReportRow>
where
    F: FnMut(&UpdateStats),
{
    config.validate()?;
    let run = if root.join("config.toml").exists() {
        let run = RunDir::open(root)?;
        if run.config()? != *config {
            return Err(Error::Validation(format!(
                "{} holds a run with a different config",
                root.display()
            )));
        }
        run
    } else {
        RunDir::create(root, config)?
    };
    let instances = eval_set(config)?;
    run.write_instances(&instances)?;
    let vocab = config.vocabulary().size();
    let mut trainer = match run.latest_checkpoint()? {
        Some(ck) => {
            run.truncate_stats(ck.step)?;
            Trainer::from_checkpoint(config.clone(), ck)?
        }
        None => {
            run.truncate_stats(0)?;
            Trainer::new(config.clone())?
        }
    };
    let snapshot = |t: &Trainer, name: &str| -> Result<()> {
        let samples = evaluate(t.params(), &instances, config.eval_k, config.max_len, config.eval_seed)?;
        run.write_eval(name, t.step_index(), &samples, vocab)?;
        Ok(())
    };
    if trainer.step_index() == 0 && config.eval_every > 0 {
        snapshot(&trainer, "step-000000")?;
    }
    trainer.run(|t, stats| {
        run.append_stats(stats)?;
        progress(stats);
        let step = t.step_index();
        if config.checkpoint_every > 0 && step % config.checkpoint_every == 0 {
            run.save_checkpoint(&t.checkpoint())?;
        }
        if config.eval_every > 0 && step % config.eval_every == 0 {
            snapshot(t, &format!("step-{step:06}"))?;
        }
        Ok(())
    })?;
    run.save_checkpoint(&trainer.checkpoint())?;
    snapshot(&trainer, "final")?;
    let row = run.summary()?;
    write_report(root, std::slice::from_ref(&row))?;
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{EvalRollout, EvalSample};
    use crate::policy::Token;

    fn samples() -> Vec<EvalSample> {
        let r = |reward| EvalRollout {
            tokens: vec![Token(9), Token(4), Token(1)],
            reward,
            step_flags: vec![true],
            entropies: vec![0.1, 0.2, 0.3],
            terminated: true,
        };
        vec![EvalSample {
            instance_id: 0,
            rollouts: vec![r(1), r(0)],
        }]
    }

    #[test]
    fn run_dir_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("run");
        let cfg = TrainConfig::default();
        let run = RunDir::create(&root, &cfg).unwrap();
        assert!(RunDir::create(&root, &cfg).is_err());
        let s = UpdateStats {
            step: 0,
            mean_reward: 0.5,
            mean_length: 3.0,
            mean_entropy: 0.2,
            mean_abs_omega: 0.0,
            frac_omega_positive: 0.0,
            surrogate: 0.0,
            max_ratio_deviation: 0.0,
            learning_rate: 1.0,
        };
        run.append_stats(&s).unwrap();
        run.append_stats(&UpdateStats { step: 1, ..s.clone() }).unwrap();
        assert_eq!(run.stats().unwrap().len(), 2);
        let line = fs::read_to_string(run.stats_path()).unwrap();
        assert!(line.lines().all(|l| l.contains(STATS_SCHEMA)));
        run.truncate_stats(1).unwrap();
        assert_eq!(run.stats().unwrap(), vec![s]);
        let health = run.write_eval("final", 2, &samples(), 16).unwrap();
        assert_eq!(run.read_eval("final").unwrap().health, health);
        let row = RunDir::open(&root).unwrap().summary().unwrap();
        assert_eq!(row.run, "run");
        assert_eq!(row.metrics.len(), REPORT_COLUMNS.len() - REPORT_ID_COLUMNS);
        let csv = render_csv(std::slice::from_ref(&row));
        assert_eq!(csv.lines().next().unwrap(), REPORT_COLUMNS.join(","));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), REPORT_COLUMNS.len());
        assert_eq!(render_text(&[row]).lines().count(), 2);
    }

    #[test]
    fn executed_run_resumes_to_the_same_result() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            updates: 6,
            checkpoint_every: 3,
            eval_every: 3,
            warmup_traces: 500,
            batch_prompts: 4,
            eval_instances: 8,
            eval_k: 4,
            ..TrainConfig::default()
        };
        let full = execute_run(&tmp.path().join("full"), &cfg, |_| {}).unwrap();
        let part = tmp.path().join("part");
        execute_run(
            &part,
            &TrainConfig {
                updates: 3,
                ..cfg.clone()
            },
            |_| {},
        )
        .unwrap();
        // graft the partial run onto the full-length config, then resume
        fs::write(part.join("config.toml"), cfg.to_toml()).unwrap();
        let mut resumed = execute_run(&part, &cfg, |_| {}).unwrap();
        resumed.run = full.run.clone();
        assert_eq!(resumed, full);
        let run = RunDir::open(&part).unwrap();
        assert_eq!(
            run.stats().unwrap(),
            RunDir::open(&tmp.path().join("full")).unwrap().stats().unwrap()
        );
        assert!(tmp.path().join("full/eval/step-000003.json").is_file());
        assert!(tmp.path().join("full/report.csv").is_file());
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
