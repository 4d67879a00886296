//! Diagnostic instruments: sign-flip training, pressure vs entropy, one-step
//! TV shift, prefix interventions, arm flips, and causal fork and revision
//! interventions.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{GateName, Mode, TrainConfig};
use crate::credit::{tv_distance, CategoricalDist, DirectionMap, RouterSignal};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, has_revision, HealthReport};
use crate::policy::{apply_update, generate, PolicyParams, Rollout, Token, Vocabulary};
use crate::rng::{self, domain};
use crate::stats;
use crate::taskenv::{privileged_context, verify, TaskInstance, VerifierResult};
use crate::trainer::{surrogate_gradient, ArmFlip, RolloutGroup, Trainer, UpdateStats};

/// Minimum number of marker prefixes for a revision comparison to be
/// considered adequately powered.
pub const REVISION_MIN_PREFIXES: usize = 50;
/// Minimum rollouts per intervention cell.
pub const INTERVENTION_MIN_SAMPLES: usize = 200;

/// Evaluation snapshot taken during a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub health: HealthReport,
}

/// Stats stream plus evaluation snapshots of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub stats: Vec<UpdateStats>,
    pub snapshots: Vec<Snapshot>,
}

fn snapshot(trainer: &Trainer, instances: &[TaskInstance]) -> Result<Snapshot> {
    let cfg = trainer.config();
    let samples = evaluate(trainer.params(), instances, cfg.eval_k, cfg.max_len, cfg.eval_seed)?;
    Ok(Snapshot {
        step: trainer.step_index(),
        health: HealthReport::from_samples(&samples)?,
    })
}

/// Runs `trainer` to completion, evaluating at step 0, every `eval_every`
/// updates, and at the end.
pub fn traced_run(trainer: &mut Trainer, instances: &[TaskInstance]) -> Result<TrainingTrace> {
    let every = trainer.config().eval_every;
    let mut snapshots = vec![snapshot(trainer, instances)?];
    let stats = trainer.run(|t, _| {
        if every > 0 && t.step_index() % every == 0 && !t.is_done() {
            snapshots.push(snapshot(t, instances)?);
        }
        Ok(())
    })?;
    if snapshots.last().map(|s| s.step) != Some(trainer.step_index()) {
        snapshots.push(snapshot(trainer, instances)?);
    }
    Ok(TrainingTrace { stats, snapshots })
}

/// Trains with per-token advantage `A_G + β s δ̄`: `sign = +1` is conformity,
/// `sign = −1` novelty.
pub fn signflip_probe(config: &TrainConfig, sign: i8, instances: &[TaskInstance]) -> Result<TrainingTrace> {
    let mode = match sign {
        1 => Mode::OpsdSampled,
        -1 => Mode::Novelty,
        _ => return Err(Error::InvalidArgument(format!("sign must be +1 or -1, got {sign}"))),
    };
    let mut trainer = Trainer::new(TrainConfig { mode, ..config.clone() })?;
    traced_run(&mut trainer, instances)
}

/// Which routing arm an arm-flip run negates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipArm {
    LowH,
    HighH,
    Both,
}

/// Trains DASD normally until `flip_step`, then negates the router on the
/// chosen arm.
pub fn arm_flip_run(
    config: &TrainConfig,
    arm: FlipArm,
    flip_step: u64,
    instances: &[TaskInstance],
) -> Result<TrainingTrace> {
    if flip_step > config.updates {
        return Err(Error::InvalidArgument(format!(
            "flip step {flip_step} beyond {} updates",
            config.updates
        )));
    }
    let mut trainer = Trainer::new(TrainConfig {
        mode: Mode::Dasd,
        ..config.clone()
    })?;
    trainer.set_arm_flip(Some(ArmFlip {
        low: matches!(arm, FlipArm::LowH | FlipArm::Both),
        high: matches!(arm, FlipArm::HighH | FlipArm::Both),
        from_step: flip_step,
    }));
    traced_run(&mut trainer, instances)
}

/// Mean log-evidence gap within one entropy decile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureBin {
    pub entropy_lo: f64,
    pub entropy_hi: f64,
    pub count: usize,
    pub mean_entropy: Option<f64>,
    pub mean_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureReport {
    pub tokens: usize,
    /// `None` when either series is constant.
    pub spearman: Option<f64>,
    pub bins: Vec<PressureBin>,
}

/// Spearman correlation of `δ_t` with `H_t` and their decile-binned means.
pub fn pressure_vs_entropy(entropies: &[f64], deltas: &[f64]) -> Result<PressureReport> {
    if entropies.len() != deltas.len() {
        return Err(Error::SizeMismatch {
            expected: entropies.len(),
            found: deltas.len(),
        });
    }
    if entropies.len() < 100 {
        return Err(Error::InvalidArgument(format!(
            "need at least 100 tokens, got {}",
            entropies.len()
        )));
    }
    let spearman = stats::spearman(entropies, deltas)?;
    let mut sorted = entropies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let edges: Vec<f64> = (0..=10)
        .map(|i| stats::quantile_sorted(&sorted, i as f64 / 10.0))
        .collect();
    let mut sums = vec![(0usize, 0.0, 0.0); 10];
    for (&h, &d) in entropies.iter().zip(deltas) {
        // bins are [lo, hi) except the last, which is closed
        let b = (0..10).rev().find(|&b| h >= edges[b]).unwrap_or(0).min(9);
        let b = if b < 9 && h >= edges[b + 1] { b + 1 } else { b };
        sums[b].0 += 1;
        sums[b].1 += h;
        sums[b].2 += d;
    }
    let bins = sums
        .iter()
        .enumerate()
        .map(|(b, &(n, sh, sd))| PressureBin {
            entropy_lo: edges[b],
            entropy_hi: edges[b + 1],
            count: n,
            mean_entropy: (n > 0).then(|| sh / n as f64),
            mean_delta: (n > 0).then(|| sd / n as f64),
        })
        .collect();
    Ok(PressureReport {
        tokens: entropies.len(),
        spearman,
        bins,
    })
}

/// Pooled `(H_t, δ_t)` pairs of a batch of groups.
pub fn group_pressure(groups: &[RolloutGroup]) -> Result<PressureReport> {
    let (mut h, mut d) = (Vec::new(), Vec::new());
    for ev in groups.iter().flat_map(|g| &g.trajectories).flat_map(|t| &t.evidence) {
        h.push(ev.entropy);
        d.push(ev.delta());
    }
    pressure_vs_entropy(&h, &d)
}

/// Pre-step entropy and one-step total-variation shift at one prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvRecord {
    pub instance: u64,
    pub trajectory: usize,
    pub position: usize,
    pub entropy: f64,
    pub tv: f64,
    pub learning_rate: f64,
}

/// TV distance between the student distributions of `before` and `after` at
/// every recorded prefix of `groups`.
pub fn tv_between(
    before: &PolicyParams,
    after: &PolicyParams,
    groups: &[RolloutGroup],
    learning_rate: f64,
) -> Result<Vec<TvRecord>> {
    let mut out = Vec::new();
    for g in groups {
        for (ti, traj) in g.trajectories.iter().enumerate() {
            let mut prefix = g.instance.prompt();
            for (pos, &tok) in traj.tokens.iter().enumerate() {
                let p = before.next_distribution(&prefix, None)?;
                let q = after.next_distribution(&prefix, None)?;
                out.push(TvRecord {
                    instance: g.instance.id,
                    trajectory: ti,
                    position: pos,
                    entropy: p.entropy(),
                    tv: tv_distance(&p, &q)?,
                    learning_rate,
                });
                prefix.push(tok);
            }
        }
    }
    Ok(out)
}

/// One diagnostic gradient step under a constant sign, applied to a scratch
/// copy; returns `(H_t, D_t)` records at the collected prefixes.
///
/// Uses the first batch of the configured run and its learning rate.
pub fn tv_shift(params: &PolicyParams, sign: i8, config: &TrainConfig) -> Result<Vec<TvRecord>> {
    let mode = match sign {
        1 => Mode::OpsdSampled,
        -1 => Mode::Novelty,
        _ => return Err(Error::InvalidArgument(format!("sign must be +1 or -1, got {sign}"))),
    };
    if config.batch_prompts == 0 {
        return Err(Error::Empty("prompt batch"));
    }
    let cfg = TrainConfig { mode, ..config.clone() };
    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.replace_params(params.clone())?;
    let groups = trainer.collect_batch()?;
    let (grad, _) = surrogate_gradient(params, &groups, trainer.plan())?;
    let lr = cfg.learning_rate_at(0);
    let mut scratch = params.clone();
    apply_update(&mut scratch, &grad, lr)?;
    tv_between(params, &scratch, &groups, lr)
}

/// Entropy bucket of an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    LowH,
    HighH,
    RandomControl,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::LowH, Bucket::HighH, Bucket::RandomControl];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::LowH => "low_H",
            Bucket::HighH => "high_H",
            Bucket::RandomControl => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Conformity,
    Novelty,
}

impl InterventionKind {
    pub fn name(self) -> &'static str {
        match self {
            InterventionKind::Conformity => "conformity",
            InterventionKind::Novelty => "novelty",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub bucket: Bucket,
    pub kind: InterventionKind,
    /// Novelty exponent.
    pub alpha: f64,
    /// Entropy quantile separating the low and high buckets.
    pub threshold_quantile: f64,
}

impl InterventionSpec {
    pub fn new(bucket: Bucket, kind: InterventionKind) -> Self {
        Self {
            bucket,
            kind,
            alpha: 0.5,
            threshold_quantile: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("alpha {} must be positive", self.alpha)));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold quantile {} outside (0, 1)",
                self.threshold_quantile
            )));
        }
        Ok(())
    }
}

/// `p(v) q(v)^(−α)` renormalized. Zero teacher probabilities are floored at
/// the smallest positive teacher probability in the row.
pub fn novelty_distribution(p: &CategoricalDist, q: &CategoricalDist, alpha: f64) -> Result<CategoricalDist> {
    if p.len() != q.len() {
        return Err(Error::SizeMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be non-negative")));
    }
    let floor = q
        .probs()
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    // work in log space so tiny teacher probabilities cannot overflow
    let logw: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pv, &qv)| {
            if pv > 0.0 {
                pv.ln() - alpha * qv.max(floor).ln()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let m = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = w.iter().sum();
    CategoricalDist::new(w.into_iter().map(|x| x / z).collect())
}

/// Distribution with one token removed and the rest renormalized; uniform
/// over the other tokens when the removed token held all the mass.
pub fn mask_token(dist: &CategoricalDist, token: usize) -> Result<CategoricalDist> {
    if dist.len() < 2 || token >= dist.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot mask token {token} of {}",
            dist.len()
        )));
    }
    let rest: f64 = dist
        .probs()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != token)
        .map(|(_, p)| p)
        .sum();
    let probs: Vec<f64> = if rest > 0.0 {
        dist.probs()
            .iter()
            .enumerate()
            .map(|(i, &p)| if i == token { 0.0 } else { p / rest })
            .collect()
    } else {
        let u = 1.0 / (dist.len() - 1) as f64;
        (0..dist.len()).map(|i| if i == token { 0.0 } else { u }).collect()
    };
    CategoricalDist::new(probs)
}

/// A rollout with its verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRollout {
    pub tokens: Vec<Token>,
    pub entropies: Vec<f64>,
    pub verdict: VerifierResult,
}

impl ScoredRollout {
    fn new(instance: &TaskInstance, rollout: &Rollout) -> Self {
        let tokens = rollout.tokens();
        Self {
            verdict: verify(instance, &tokens),
            entropies: rollout.entropies(),
            tokens,
        }
    }

    /// Correct-step fraction, `None` without parsed steps.
    pub fn step_acc(&self) -> Option<f64> {
        let f = &self.verdict.step_flags;
        (!f.is_empty()).then(|| f.iter().filter(|&&x| x).count() as f64 / f.len() as f64)
    }

    pub fn markers(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == Vocabulary::MARKER).count()
    }
}

/// A paired baseline and intervened rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub baseline: ScoredRollout,
    /// Identical to the baseline when no position qualified.
    pub intervened: ScoredRollout,
    /// Position whose sampling distribution was replaced.
    pub position: Option<usize>,
}

fn run_with<F>(
    params: &PolicyParams,
    instance: &TaskInstance,
    max_len: usize,
    seed: u64,
    path: &[u64],
    choose: F,
) -> Result<Rollout>
where
    F: FnMut(usize, &[Token], CategoricalDist) -> Result<CategoricalDist>,
{
    let mut rng = rng::stream(seed, path);
    generate(params, &instance.prompt(), max_len, &mut rng, None, choose)
}

/// Samples a baseline rollout, picks the first position in the requested
/// entropy bucket (relative to the baseline's own quantile), and re-samples
/// from the same stream with that one position drawn from the
/// interventional distribution.
pub fn intervene_rollout(
    params: &PolicyParams,
    instance: &TaskInstance,
    spec: &InterventionSpec,
    max_len: usize,
    seed: u64,
    rollout: u64,
) -> Result<InterventionOutcome> {
    spec.validate()?;
    let path = [domain::INTERVENTION, instance.id, rollout];
    let base = run_with(params, instance, max_len, seed, &path, |_, _, d| Ok(d))?;
    let baseline = ScoredRollout::new(instance, &base);
    let ent = &baseline.entropies;
    let tau = stats::quantile(ent, spec.threshold_quantile)?;
    let position = match spec.bucket {
        Bucket::LowH => ent.iter().position(|&h| h < tau),
        Bucket::HighH => ent.iter().position(|&h| h > tau),
        Bucket::RandomControl => {
            let mut r = rng::stream(seed, &[domain::INTERVENTION, instance.id, rollout, 1]);
            Some(r.random_range(0..ent.len()))
        }
    };
    let Some(target) = position else {
        return Ok(InterventionOutcome {
            intervened: baseline.clone(),
            baseline,
            position: None,
        });
    };
    let answer = privileged_context(instance);
    let out = run_with(params, instance, max_len, seed, &path, |pos, prefix, p| {
        if pos != target {
            return Ok(p);
        }
        let q = params.next_distribution(prefix, Some(answer))?;
        match spec.kind {
            InterventionKind::Conformity => Ok(q),
            InterventionKind::Novelty => novelty_distribution(&p, &q, spec.alpha),
        }
    })?;
    Ok(InterventionOutcome {
        baseline,
        intervened: ScoredRollout::new(instance, &out),
        position: Some(target),
    })
}

/// One cell of the intervention matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCell {
    pub bucket: Bucket,
    pub kind: InterventionKind,
    pub rollouts: usize,
    pub skipped: usize,
    pub baseline_step_acc: f64,
    pub intervened_step_acc: f64,
    pub baseline_e_density: f64,
    pub intervened_e_density: f64,
    /// Percent change of the step accuracy; `None` for a zero baseline.
    pub delta_step_acc_pct: Option<f64>,
    /// Percent change of MARKER density; `None` for a zero baseline.
    pub delta_e_pct: Option<f64>,
    /// Mean over problems of the per-problem step-accuracy change, in points.
    pub problem_delta_step_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub cells: Vec<InterventionCell>,
}

impl InterventionReport {
    pub fn cell(&self, bucket: Bucket, kind: InterventionKind) -> Option<&InterventionCell> {
        self.cells.iter().find(|c| c.bucket == bucket && c.kind == kind)
    }
}

fn pct_change(base: f64, new: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (new - base) / base)
}

#[derive(Default)]
struct Tally {
    acc_sum: f64,
    acc_n: usize,
    markers: usize,
    tokens: usize,
}

impl Tally {
    fn add(&mut self, r: &ScoredRollout) {
        if let Some(a) = r.step_acc() {
            self.acc_sum += a;
            self.acc_n += 1;
        }
        self.markers += r.markers();
        self.tokens += r.tokens.len();
    }

    fn step_acc(&self) -> f64 {
        if self.acc_n == 0 {
            0.0
        } else {
            100.0 * self.acc_sum / self.acc_n as f64
        }
    }

    fn e_density(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            100.0 * self.markers as f64 / self.tokens as f64
        }
    }
}

fn summarize_cell(spec: &InterventionSpec, per_problem: &[Vec<InterventionOutcome>]) -> InterventionCell {
    let (mut base, mut int) = (Tally::default(), Tally::default());
    let mut skipped = 0;
    let mut problem_deltas = Vec::new();
    for outcomes in per_problem {
        let (mut pb, mut pi) = (Tally::default(), Tally::default());
        for o in outcomes {
            skipped += usize::from(o.position.is_none());
            base.add(&o.baseline);
            int.add(&o.intervened);
            pb.add(&o.baseline);
            pi.add(&o.intervened);
        }
        if pb.acc_n > 0 && pi.acc_n > 0 {
            problem_deltas.push(pi.step_acc() - pb.step_acc());
        }
    }
    InterventionCell {
        bucket: spec.bucket,
        kind: spec.kind,
        rollouts: per_problem.iter().map(Vec::len).sum(),
        skipped,
        baseline_step_acc: base.step_acc(),
        intervened_step_acc: int.step_acc(),
        baseline_e_density: base.e_density(),
        intervened_e_density: int.e_density(),
        delta_step_acc_pct: pct_change(base.step_acc(), int.step_acc()),
        delta_e_pct: pct_change(base.e_density(), int.e_density()),
        problem_delta_step_acc: if problem_deltas.is_empty() {
            0.0
        } else {
            problem_deltas.iter().sum::<f64>() / problem_deltas.len() as f64
        },
    }
}

/// Paired intervention matrix: every cell shares the same baseline
/// rollouts, `per_instance` per instance. Skipped rollouts count as
/// unmodified.
pub fn intervention_report(
    params: &PolicyParams,
    instances: &[TaskInstance],
    specs: &[InterventionSpec],
    per_instance: usize,
    max_len: usize,
    seed: u64,
) -> Result<InterventionReport> {
    if instances.len() * per_instance < INTERVENTION_MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "{} rollouts per cell, need at least {INTERVENTION_MIN_SAMPLES}",
            instances.len() * per_instance
        )));
    }
    let cells = specs
        .iter()
        .map(|spec| {
            let per_problem = instances
                .par_iter()
                .map(|inst| {
                    (0..per_instance)
                        .map(|r| intervene_rollout(params, inst, spec, max_len, seed, r as u64))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize_cell(spec, &per_problem))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterventionReport { cells })
}

/// The 3 × 2 matrix over buckets and intervention kinds.
pub fn standard_specs(alpha: f64, threshold_quantile: f64) -> Vec<InterventionSpec> {
    let mut out = Vec::new();
    for bucket in Bucket::ALL {
        for kind in [InterventionKind::Conformity, InterventionKind::Novelty] {
            out.push(InterventionSpec {
                bucket,
                kind,
                alpha,
                threshold_quantile,
            });
        }
    }
    out
}

/// Target of a causal fork intervention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForkTarget {
    HighH,
    LowH,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkReport {
    pub target: ForkTarget,
    pub rollouts: usize,
    /// Rollouts where the teacher's top choice equalled the sampled token.
    pub unchanged: usize,
    pub control_correct: f64,
    pub intervened_correct: f64,
    pub delta_correct: f64,
    pub control_revision: f64,
    pub intervened_revision: f64,
    pub delta_revision: f64,
    pub warnings: Vec<String>,
}

struct ForkPair {
    control: ScoredRollout,
    intervened: ScoredRollout,
    unchanged: bool,
    fallback: bool,
}

fn fork_pair(
    params: &PolicyParams,
    instance: &TaskInstance,
    target: ForkTarget,
    max_len: usize,
    seed: u64,
    rollout: u64,
) -> Result<ForkPair> {
    let path = [domain::INTERVENTION, instance.id, rollout, 2];
    let base = run_with(params, instance, max_len, seed, &path, |_, _, d| Ok(d))?;
    let control = ScoredRollout::new(instance, &base);
    let ent = &control.entropies;
    // ties resolve to the earliest position
    let first_extreme = |better: fn(f64, f64) -> bool| {
        let mut best = 0;
        for (i, &h) in ent.iter().enumerate() {
            if better(h, ent[best]) {
                best = i;
            }
        }
        best
    };
    let (pos, fallback) = match target {
        ForkTarget::HighH => (first_extreme(|a, b| a > b), ent.iter().all(|&h| h == 0.0)),
        ForkTarget::LowH => (first_extreme(|a, b| a < b), false),
        ForkTarget::Random => {
            let mut r = rng::stream(seed, &[domain::INTERVENTION, instance.id, rollout, 3]);
            (r.random_range(0..ent.len()), false)
        }
    };
    let answer = privileged_context(instance);
    let mut unchanged = false;
    let sampled = control.tokens[pos];
    let out = run_with(params, instance, max_len, seed, &path, |i, prefix, p| {
        if i != pos {
            return Ok(p);
        }
        let top = params.next_distribution(prefix, Some(answer))?.argmax();
        unchanged = top == sampled.index();
        Ok(CategoricalDist::one_hot(p.len(), top))
    })?;
    Ok(ForkPair {
        control,
        intervened: ScoredRollout::new(instance, &out),
        unchanged,
        fallback,
    })
}

/// Replaces one token per rollout (highest entropy, lowest entropy, or a
/// random position) with the privileged branch's top choice and resumes
/// student sampling from the same stream.
pub fn causal_fork_intervention(
    params: &PolicyParams,
    instances: &[TaskInstance],
    target: ForkTarget,
    per_instance: usize,
    max_len: usize,
    seed: u64,
) -> Result<ForkReport> {
    if instances.is_empty() || per_instance == 0 {
        return Err(Error::Empty("fork intervention set"));
    }
    let pairs: Vec<ForkPair> = instances
        .par_iter()
        .map(|inst| {
            (0..per_instance)
                .map(|r| fork_pair(params, inst, target, max_len, seed, r as u64))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n = pairs.len() as f64;
    let rate = |f: &dyn Fn(&ForkPair) -> bool| pairs.iter().filter(|p| f(p)).count() as f64 / n;
    let control_correct = rate(&|p| p.control.verdict.reward == 1);
    let intervened_correct = rate(&|p| p.intervened.verdict.reward == 1);
    let control_revision = rate(&|p| has_revision(&p.control.tokens));
    let intervened_revision = rate(&|p| has_revision(&p.intervened.tokens));
    let fallbacks = pairs.iter().filter(|p| p.fallback).count();
    let mut warnings = Vec::new();
    if fallbacks > 0 {
        warnings.push(format!(
            "{fallbacks} rollouts had all-zero entropy; high_H target fell back to position 0"
        ));
    }
    Ok(ForkReport {
        target,
        rollouts: pairs.len(),
        unchanged: pairs.iter().filter(|p| p.unchanged).count(),
        control_correct,
        intervened_correct,
        delta_correct: intervened_correct - control_correct,
        control_revision,
        intervened_revision,
        delta_revision: intervened_revision - control_revision,
        warnings,
    })
}

/// Action applied from the first MARKER onward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevisionAction {
    Preserve,
    Suppress,
    TeacherForce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionReport {
    pub action: RevisionAction,
    /// Rollouts containing a MARKER.
    pub prefixes: usize,
    pub low_power: bool,
    pub control_correct: Option<f64>,
    pub action_correct: Option<f64>,
    pub delta_correct: Option<f64>,
}

/// Continues each marker-bearing rollout from its first MARKER under
/// `action`, sharing the stream with the unmodified continuation.
pub fn revision_intervention(
    params: &PolicyParams,
    instances: &[TaskInstance],
    action: RevisionAction,
    per_instance: usize,
    max_len: usize,
    seed: u64,
) -> Result<RevisionReport> {
    let answer_of = |inst: &TaskInstance| privileged_context(inst);
    let pairs: Vec<(bool, bool)> = instances
        .par_iter()
        .map(|inst| {
            let mut out = Vec::new();
            for r in 0..per_instance as u64 {
                let path = [domain::INTERVENTION, inst.id, r, 4];
                let base = run_with(params, inst, max_len, seed, &path, |_, _, d| Ok(d))?;
                let control = ScoredRollout::new(inst, &base);
                let Some(m) = control.tokens.iter().position(|&t| t == Vocabulary::MARKER) else {
                    continue;
                };
                let answer = answer_of(inst);
                let alt = run_with(params, inst, max_len, seed, &path, |i, prefix, p| {
                    if i < m {
                        return Ok(p);
                    }
                    match action {
                        RevisionAction::Preserve => Ok(p),
                        RevisionAction::Suppress => mask_token(&p, Vocabulary::MARKER.index()),
                        RevisionAction::TeacherForce => params.next_distribution(prefix, Some(answer)),
                    }
                })?;
                let alt = ScoredRollout::new(inst, &alt);
                out.push((control.verdict.reward == 1, alt.verdict.reward == 1));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n = pairs.len();
    let (control_correct, action_correct) = if n == 0 {
        (None, None)
    } else {
        let c = pairs.iter().filter(|p| p.0).count() as f64 / n as f64;
        let a = pairs.iter().filter(|p| p.1).count() as f64 / n as f64;
        (Some(c), Some(a))
    };
    Ok(RevisionReport {
        action,
        prefixes: n,
        low_power: n < REVISION_MIN_PREFIXES,
        control_correct,
        action_correct,
        delta_correct: control_correct.zip(action_correct).map(|(c, a)| a - c),
    })
}

/// Design-space sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    /// Routing variable.
    A,
    /// Direction map.
    B,
    /// Reliability gate.
    C,
    /// Router quantile grid.
    Rho,
    /// Coupling strength.
    Beta,
}

impl Panel {
    pub const ALL: [Panel; 5] = [Panel::A, Panel::B, Panel::C, Panel::Rho, Panel::Beta];

    pub fn name(self) -> &'static str {
        match self {
            Panel::A => "panel_a",
            Panel::B => "panel_b",
            Panel::C => "panel_c",
            Panel::Rho => "rho",
            Panel::Beta => "beta",
        }
    }
}

pub const RHO_GRID: [f64; 5] = [0.05, 0.20, 0.50, 0.75, 0.95];
pub const BETA_GRID: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];

/// Named configurations of one sweep. Each panel varies one routing
/// component and holds the others at the defaults.
pub fn ablation_grid(base: &TrainConfig, panel: Panel) -> Vec<(String, TrainConfig)> {
    let ablate = |direction, gate, signal| TrainConfig {
        mode: Mode::Ablation,
        direction,
        gate,
        signal,
        ..base.clone()
    };
    let d = (DirectionMap::Tanh, GateName::SigmoidGap, RouterSignal::Entropy);
    let named = |cfg: TrainConfig| (cfg.label(), cfg);
    match panel {
        Panel::A => [
            RouterSignal::Entropy,
            RouterSignal::PositionProxy,
            RouterSignal::TokenFrequency,
        ]
        .into_iter()
        .map(|s| named(ablate(d.0, d.1, s)))
        .collect(),
        Panel::B => [
            DirectionMap::Tanh,
            DirectionMap::HardThreshold,
            DirectionMap::LinearRamp,
            DirectionMap::ConstPlus,
            DirectionMap::ConstMinus,
        ]
        .into_iter()
        .map(|m| named(ablate(m, d.1, d.2)))
        .collect(),
        Panel::C => [
            GateName::SigmoidGap,
            GateName::None,
            GateName::FixedThreshold,
            GateName::MagnitudeOnly,
        ]
        .into_iter()
        .map(|g| named(ablate(d.0, g, d.2)))
        .collect(),
        Panel::Rho => RHO_GRID
            .iter()
            .map(|&rho| {
                (
                    format!("dasd_rho_{rho:.2}"),
                    TrainConfig {
                        mode: Mode::Dasd,
                        rho,
                        ..base.clone()
                    },
                )
            })
            .collect(),
        Panel::Beta => BETA_GRID
            .iter()
            .map(|&beta| {
                (
                    format!("dasd_beta_{beta:.2}"),
                    TrainConfig {
                        mode: Mode::Dasd,
                        beta,
                        ..base.clone()
                    },
                )
            })
            .collect(),
    }
}
