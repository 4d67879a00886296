use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dasd_core::config::{Mode, TrainConfig};
use dasd_core::metrics::evaluate;
use dasd_core::probes::{
    ablation_grid, arm_flip_run, causal_fork_intervention, group_pressure, intervention_report, revision_intervention,
    signflip_probe, standard_specs, tv_shift, FlipArm, ForkTarget, Panel, RevisionAction,
};
use dasd_core::report::{execute_run, render_text, write_report, RunDir};
use dasd_core::trainer::{eval_set, Trainer};
use dasd_core::{load_checkpoint, ErrorClass, PolicyCheckpoint};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

/// Entropy-routed signed self-distillation testbed.
#[derive(Parser)]
#[command(name = "dasd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run into a run directory (resumes if it already exists).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the run's pinned instances.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the latest checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Training-time probes.
    Probe {
        #[command(subcommand)]
        probe: ProbeCommand,
    },
    /// Interventions on a trained checkpoint.
    Intervene {
        #[command(subcommand)]
        intervention: InterveneCommand,
    },
    /// Design-space and sensitivity sweeps; one run directory per setting.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        panel: PanelArg,
    },
    /// Plain-text and CSV summary over finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Train with a constant-sign signed term and snapshot evaluation health.
    Signflip {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        sign: SignArg,
    },
    /// Correlate the evidence gap with entropy over one batch.
    Pressure {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One diagnostic step and the resulting per-prefix TV shift.
    TvShift {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        sign: SignArg,
    },
    /// Train DASD and negate one routing arm from a given step.
    ArmFlip {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        arm: ArmArg,
        #[arg(long)]
        flip_step: u64,
    },
}

#[derive(Subcommand)]
enum InterveneCommand {
    /// Conformity and novelty edits at low/high-entropy and random positions.
    Prefix {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        quantile: f64,
        #[arg(long, default_value_t = 8)]
        per_instance: usize,
    },
    /// Replace one token with the privileged branch's top choice.
    Fork {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, default_value_t = 8)]
        per_instance: usize,
    },
    /// Continue from the first MARKER under a chosen action.
    Revision {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        action: ActionArg,
        #[arg(long, default_value_t = 8)]
        per_instance: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Plus,
    Minus,
}

impl SignArg {
    fn value(self) -> i8 {
        match self {
            SignArg::Plus => 1,
            SignArg::Minus => -1,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Low,
    High,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    High,
    Low,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActionArg {
    Preserve,
    Suppress,
    TeacherForce,
}

#[derive(Clone, Copy, ValueEnum)]
enum PanelArg {
    A,
    B,
    C,
    Rho,
    Beta,
    All,
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    Ok(TrainConfig::load(path)?)
}

/// The run's config and the requested (or latest) checkpoint.
fn open_trained(run: &Path, checkpoint: Option<&Path>) -> Result<(RunDir, TrainConfig, PolicyCheckpoint)> {
    let dir = RunDir::open(run)?;
    let cfg = dir.config()?;
    let ck = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => match dir.latest_checkpoint()? {
            Some(ck) => ck,
            None => bail!(dasd_core::Error::Validation(format!(
                "{} has no checkpoints",
                run.display()
            ))),
        },
    };
    Ok((dir, cfg, ck))
}

fn train(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    let total = cfg.updates;
    let row = execute_run(out, &cfg, |s| {
        if (s.step + 1) % 50 == 0 || s.step + 1 == total {
            eprintln!(
                "step {:>5}/{total}  reward {:.3}  entropy {:.3}",
                s.step + 1,
                s.mean_reward,
                s.mean_entropy
            );
        }
    })?;
    print!("{}", render_text(&[row]));
    Ok(())
}

fn eval(run: &Path, checkpoint: Option<&Path>, name: &str) -> Result<()> {
    let (dir, cfg, ck) = open_trained(run, checkpoint)?;
    let instances = dir.instances()?;
    let samples = evaluate(&ck.params, &instances, cfg.eval_k, cfg.max_len, cfg.eval_seed)?;
    let h = dir.write_eval(name, ck.step, &samples, cfg.vocabulary().size())?;
    println!(
        "step {}  Avg@{} {:.2}%  Pass@1 {:.3}  Pass@{} {:.3}  StepAcc {:.1}%  E(y) {:.2}  RevRate {:.3}  Dist-3 {:.3}  H p80 {:.3}",
        ck.step,
        cfg.eval_k,
        h.avg_at_k,
        h.pass_at(1),
        cfg.eval_k,
        h.pass_at(cfg.eval_k),
        h.steps.step_acc,
        h.exploration.e_density,
        h.exploration.rev_rate,
        h.exploration.distinct3,
        h.entropy_p80
    );
    Ok(())
}

fn probe(cmd: ProbeCommand) -> Result<()> {
    match cmd {
        ProbeCommand::Signflip { config, out, sign } => {
            let cfg = load_config(&config)?;
            let dir = RunDir::create(&out, &cfg)?;
            let trace = signflip_probe(&cfg, sign.value(), &eval_set(&cfg)?)?;
            let name = format!("signflip_{}", if sign.value() > 0 { "plus" } else { "minus" });
            dir.write_probe(&name, &trace.snapshots, &trace.snapshots.last())?;
            dir.write_probe(&format!("{name}_stats"), &trace.stats, &trace.stats.len())?;
            for s in &trace.snapshots {
                println!(
                    "step {:>5}  Avg {:.2}%  StepAcc {:.1}%  H p80 {:.3}",
                    s.step, s.health.avg_at_k, s.health.steps.step_acc, s.health.entropy_p80
                );
            }
        }
        ProbeCommand::Pressure { run, checkpoint } => {
            let (dir, cfg, ck) = open_trained(&run, checkpoint.as_deref())?;
            let mut t = Trainer::new(TrainConfig {
                mode: Mode::Dasd,
                ..cfg
            })?;
            t.replace_params(ck.params)?;
            let rep = group_pressure(&t.collect_batch()?)?;
            dir.write_probe("pressure", &rep.bins, &rep)?;
            println!("tokens {}  spearman {:?}", rep.tokens, rep.spearman);
        }
        ProbeCommand::TvShift { run, checkpoint, sign } => {
            let (dir, cfg, ck) = open_trained(&run, checkpoint.as_deref())?;
            let records = tv_shift(&ck.params, sign.value(), &cfg)?;
            let h: Vec<f64> = records.iter().map(|r| r.entropy).collect();
            let d: Vec<f64> = records.iter().map(|r| r.tv).collect();
            let rho = dasd_core::stats::spearman(&h, &d)?;
            let name = format!("tv_shift_{}", if sign.value() > 0 { "plus" } else { "minus" });
            dir.write_probe(&name, &records, &serde_summary(records.len(), rho))?;
            println!("prefixes {}  spearman(H, D) {rho:?}", records.len());
        }
        ProbeCommand::ArmFlip {
            config,
            out,
            arm,
            flip_step,
        } => {
            let cfg = load_config(&config)?;
            let dir = RunDir::create(&out, &cfg)?;
            let arm = match arm {
                ArmArg::Low => FlipArm::LowH,
                ArmArg::High => FlipArm::HighH,
                ArmArg::Both => FlipArm::Both,
            };
            let trace = arm_flip_run(&cfg, arm, flip_step, &eval_set(&cfg)?)?;
            dir.write_probe("arm_flip", &trace.snapshots, &trace.snapshots.last())?;
            for s in &trace.snapshots {
                println!(
                    "step {:>5}  Avg {:.2}%  H p80 {:.3}",
                    s.step, s.health.avg_at_k, s.health.entropy_p80
                );
            }
        }
    }
    Ok(())
}

fn serde_summary(n: usize, spearman: Option<f64>) -> std::collections::BTreeMap<&'static str, Option<f64>> {
    [("records", Some(n as f64)), ("spearman", spearman)]
        .into_iter()
        .collect()
}

fn intervene(cmd: InterveneCommand) -> Result<()> {
    match cmd {
        InterveneCommand::Prefix {
            run,
            checkpoint,
            alpha,
            quantile,
            per_instance,
        } => {
            let (dir, cfg, ck) = open_trained(&run, checkpoint.as_deref())?;
            let instances = dir.instances()?;
            let rep = intervention_report(
                &ck.params,
                &instances,
                &standard_specs(alpha, quantile),
                per_instance,
                cfg.max_len,
                cfg.eval_seed,
            )?;
            dir.write_probe("intervention_prefix", &rep.cells, &rep)?;
            println!(
                "{:<8} {:<11} {:>6} {:>6} {:>10} {:>10}",
                "bucket", "kind", "n", "skip", "dStepAcc%", "dE%"
            );
            for c in &rep.cells {
                let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:+.1}"));
                println!(
                    "{:<8} {:<11} {:>6} {:>6} {:>10} {:>10}",
                    c.bucket.name(),
                    c.kind.name(),
                    c.rollouts,
                    c.skipped,
                    fmt(c.delta_step_acc_pct),
                    fmt(c.delta_e_pct)
                );
            }
        }
        InterveneCommand::Fork {
            run,
            checkpoint,
            target,
            per_instance,
        } => {
            let (dir, cfg, ck) = open_trained(&run, checkpoint.as_deref())?;
            let target = match target {
                TargetArg::High => ForkTarget::HighH,
                TargetArg::Low => ForkTarget::LowH,
                TargetArg::Random => ForkTarget::Random,
            };
            let rep = causal_fork_intervention(
                &ck.params,
                &dir.instances()?,
                target,
                per_instance,
                cfg.max_len,
                cfg.eval_seed,
            )?;
            for w in &rep.warnings {
                eprintln!("warning: {w}");
            }
            dir.write_probe("intervention_fork", std::slice::from_ref(&rep), &rep)?;
            println!(
                "rollouts {}  unchanged {}  dCorrect {:+.3}  dRevision {:+.3}",
                rep.rollouts, rep.unchanged, rep.delta_correct, rep.delta_revision
            );
        }
        InterveneCommand::Revision {
            run,
            checkpoint,
            action,
            per_instance,
        } => {
            let (dir, cfg, ck) = open_trained(&run, checkpoint.as_deref())?;
            let action = match action {
                ActionArg::Preserve => RevisionAction::Preserve,
                ActionArg::Suppress => RevisionAction::Suppress,
                ActionArg::TeacherForce => RevisionAction::TeacherForce,
            };
            let rep = revision_intervention(
                &ck.params,
                &dir.instances()?,
                action,
                per_instance,
                cfg.max_len,
                cfg.eval_seed,
            )?;
            dir.write_probe("intervention_revision", std::slice::from_ref(&rep), &rep)?;
            println!(
                "prefixes {}{}  dCorrect {}",
                rep.prefixes,
                if rep.low_power { " (low power)" } else { "" },
                rep.delta_correct.map_or("undefined".into(), |d| format!("{d:+.3}"))
            );
        }
    }
    Ok(())
}

fn ablate(config: &Path, out: &Path, panel: PanelArg) -> Result<()> {
    let base = load_config(config)?;
    let panels: Vec<Panel> = match panel {
        PanelArg::A => vec![Panel::A],
        PanelArg::B => vec![Panel::B],
        PanelArg::C => vec![Panel::C],
        PanelArg::Rho => vec![Panel::Rho],
        PanelArg::Beta => vec![Panel::Beta],
        PanelArg::All => Panel::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for p in panels {
        for (name, cfg) in ablation_grid(&base, p) {
            let dir = out.join(p.name()).join(sanitize(&name));
            eprintln!("{} / {name}", p.name());
            let mut row = execute_run(&dir, &cfg, |_| {})?;
            row.run = format!("{}/{name}", p.name());
            rows.push(row);
        }
    }
    write_report(out, &rows)?;
    print!("{}", render_text(&rows));
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let rows = runs
        .iter()
        .map(|r| {
            RunDir::open(r)
                .and_then(|d| d.summary())
                .with_context(|| format!("reading {}", r.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    write_report(out, &rows)?;
    print!("{}", render_text(&rows));
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, seed } => train(&config, &out, seed),
        Command::Eval { run, checkpoint, name } => eval(&run, checkpoint.as_deref(), &name),
        Command::Probe { probe: p } => probe(p),
        Command::Intervene { intervention } => intervene(intervention),
        Command::Ablate { config, out, panel } => ablate(&config, &out, panel),
        Command::Report { runs, out } => report(&runs, &out),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err
        .chain()
        .find_map(|e| e.downcast_ref::<dasd_core::Error>())
        .map(|e| e.class())
    {
        Some(ErrorClass::Config) => EXIT_CONFIG,
        Some(ErrorClass::Validation) => EXIT_VALIDATION,
        Some(ErrorClass::Runtime) | None => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
