//! Training loop: supervised warm start, group rollout collection with
//! two-branch evidence, routed credit, and one clipped policy-gradient step
//! per batch.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{PolicyCheckpoint, RngState};
use crate::config::TrainConfig;
use crate::credit::{
    self, group_relative_advantage, kl_logit_gradient, routing_coefficient, trajectory_scales, CategoricalDist,
    GroupAdvantage, RoutedCredit, RoutingAux, RoutingConfig, TokenEvidence, TrajectoryScales,
};
use crate::error::{Error, Result};
use crate::policy::{apply_update, sample_rollout, ContextKey, Gradient, PolicyParams, Token, Vocabulary};
use crate::rng::{self, domain};
use crate::taskenv::{generate_instance, privileged_context, verify, TaskInstance, VerifierResult};

/// One sampled trajectory with its evidence and credit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub tokens: Vec<Token>,
    pub evidence: Vec<TokenEvidence>,
    pub verdict: VerifierResult,
    pub scales: TrajectoryScales,
    pub credits: Vec<RoutedCredit>,
}

/// `G` trajectories for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub instance: TaskInstance,
    pub trajectories: Vec<TrajectoryRecord>,
    pub advantage: GroupAdvantage,
}

/// Per-update training statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_length: f64,
    pub mean_entropy: f64,
    pub mean_abs_omega: f64,
    pub frac_omega_positive: f64,
    pub surrogate: f64,
    pub max_ratio_deviation: f64,
    pub learning_rate: f64,
}

/// Token statistics of the warm-start corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: Vec<u64>,
    /// Standardized `−ln f(v)` per token, weighted by corpus occurrence.
    pub rarity: Vec<f64>,
}

impl CorpusStats {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let total: u64 = counts.iter().sum();
        let v = counts.len() as f64;
        // add-one smoothing keeps unseen tokens finite
        let neg_log_f: Vec<f64> = counts
            .iter()
            .map(|&c| -((c as f64 + 1.0) / (total as f64 + v)).ln())
            .collect();
        let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
        let mean: f64 = weights.iter().zip(&neg_log_f).map(|(w, x)| w * x).sum();
        let var: f64 = weights
            .iter()
            .zip(&neg_log_f)
            .map(|(w, x)| w * (x - mean).powi(2))
            .sum();
        let sd = var.sqrt();
        let rarity = neg_log_f
            .iter()
            .map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 })
            .collect();
        Self { counts, rarity }
    }
}

/// Everything `collect_group` needs besides the parameters.
#[derive(Debug, Clone)]
pub struct CreditPlan {
    pub routing: RoutingConfig,
    pub rho: f64,
    pub eps: f64,
    pub eps_clip: f64,
    pub sampled_beta: f64,
    pub exact_kl_beta: f64,
    pub group_size: usize,
    pub max_len: usize,
    pub rarity: Vec<f64>,
}

impl CreditPlan {
    pub fn new(config: &TrainConfig, corpus: &CorpusStats) -> Self {
        Self {
            routing: config.routing(),
            rho: config.rho,
            eps: config.eps,
            eps_clip: config.eps_clip,
            sampled_beta: config.sampled_beta(),
            exact_kl_beta: config.exact_kl_beta(),
            group_size: config.group_size,
            max_len: config.max_len,
            rarity: corpus.rarity.clone(),
        }
    }
}

/// Supervised warm start.
///
/// Student rows are smoothed count estimates over sampled solution traces
/// (random valid order, occasional revised slips). Privileged rows are fit on
/// each instance's canonical trace keyed by its answer, stored as offsets
/// over the student row and shrunk toward it.
pub fn warm_start(config: &TrainConfig) -> Result<(PolicyParams, CorpusStats)> {
    let vocab = config.vocabulary();
    let mut params = PolicyParams::for_vocabulary(&vocab, config.window)?;
    let size = vocab.size();
    let mut student: BTreeMap<ContextKey, Vec<u64>> = BTreeMap::new();
    let mut teacher: BTreeMap<ContextKey, Vec<u64>> = BTreeMap::new();
    let mut token_counts = vec![0u64; size];
    for i in 0..config.warmup_traces {
        let mut rng = rng::stream(config.master_seed, &[domain::WARMUP, i as u64]);
        let difficulty = sample_difficulty(&config.difficulty_weights, &mut rng);
        let inst = generate_instance(&mut rng, difficulty, config.modulus, i as u64)?;
        let order = rng.random_range(0..inst.valid_orders.len());
        let answer = privileged_context(&inst);
        let mut prefix = inst.prompt();
        for t in inst.solution_tokens(order, config.warmup_slip_rate, &mut rng) {
            student
                .entry(params.key_unchecked(&prefix, None))
                .or_insert_with(|| vec![0; size])[t.index()] += 1;
            token_counts[t.index()] += 1;
            prefix.push(t);
        }
        let mut prefix = inst.prompt();
        for &t in &inst.trace {
            teacher
                .entry(params.key_unchecked(&prefix, Some(answer)))
                .or_insert_with(|| vec![0; size])[t.index()] += 1;
            prefix.push(t);
        }
    }
    for (key, row) in &student {
        params.set_row(
            *key,
            row.iter().map(|&c| (c as f64 + config.warmup_smoothing).ln()).collect(),
        )?;
    }
    for (key, row) in &teacher {
        let base = params.distribution_for_key(&key.student());
        params.set_row(*key, teacher_offsets(row, base.probs(), config.teacher_shrinkage))?;
    }
    Ok((params, CorpusStats::from_counts(token_counts)))
}

/// Privileged offsets `ln q(v) − ln p(v)` where `q` is the count estimate
/// `(c(v) + kappa p(v)) / (n + kappa)` shrunk toward the student `p`.
pub fn teacher_offsets(counts: &[u64], student: &[f64], kappa: f64) -> Vec<f64> {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(student)
        .map(|(&c, &p)| ((c as f64 + kappa * p) / (n as f64 + kappa)).ln() - p.ln())
        .collect()
}

pub fn sample_difficulty<R: Rng + ?Sized>(weights: &[f64; 3], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i + 2;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0) + 2
}

/// Training prompt `prompt` of update `update`.
pub fn training_instance(config: &TrainConfig, update: u64, prompt: usize) -> Result<TaskInstance> {
    let mut rng = rng::stream(config.master_seed, &[domain::TRAIN_INSTANCE, update, prompt as u64]);
    let difficulty = sample_difficulty(&config.difficulty_weights, &mut rng);
    generate_instance(&mut rng, difficulty, config.modulus, update * 1_000_000 + prompt as u64)
}

/// Held-out evaluation instances pinned by the eval seed.
pub fn eval_set(config: &TrainConfig) -> Result<Vec<TaskInstance>> {
    (0..config.eval_instances)
        .map(|i| {
            let mut rng = rng::stream(config.eval_seed, &[domain::EVAL_INSTANCE, i as u64]);
            let difficulty = sample_difficulty(&config.difficulty_weights, &mut rng);
            generate_instance(&mut rng, difficulty, config.modulus, i as u64)
        })
        .collect()
}

/// Routing aux data for a token of a trajectory.
fn routing_aux(plan: &CreditPlan, position: usize, length: usize, token: Token) -> RoutingAux {
    RoutingAux {
        position: Some(position),
        length: Some(length),
        token_rarity: plan.rarity.get(token.index()).copied(),
    }
}

/// Two-branch evidence for a token sequence generated from `prompt`.
pub fn token_evidence(params: &PolicyParams, prompt: &[Token], tokens: &[Token], answer: Token) -> Vec<TokenEvidence> {
    let mut prefix = prompt.to_vec();
    let mut out = Vec::with_capacity(tokens.len());
    for (pos, &t) in tokens.iter().enumerate() {
        let student = params.distribution_for_key(&params.key_unchecked(&prefix, None));
        let teacher = params.distribution_for_key(&params.key_unchecked(&prefix, Some(answer)));
        out.push(TokenEvidence {
            position: pos,
            token_id: t.0,
            student_logprob: student.log_prob(t.index()),
            teacher_logprob: teacher.log_prob(t.index()),
            entropy: student.entropy(),
        });
        prefix.push(t);
    }
    out
}

/// Scales and per-token credit for one trajectory.
pub fn route_trajectory(
    evidence: &[TokenEvidence],
    a_group: f64,
    plan: &CreditPlan,
    routing: &RoutingConfig,
) -> Result<(TrajectoryScales, Vec<RoutedCredit>)> {
    let entropies: Vec<f64> = evidence.iter().map(|e| e.entropy).collect();
    let deltas = evidence
        .iter()
        .map(|e| credit::log_evidence_gap(e.teacher_logprob, e.student_logprob))
        .collect::<Result<Vec<f64>>>()?;
    let scales = trajectory_scales(&entropies, &deltas, plan.rho)?;
    let len = evidence.len();
    let credits = evidence
        .iter()
        .zip(&deltas)
        .map(|(e, &d)| {
            let aux = routing_aux(plan, e.position, len, Token(e.token_id));
            routing_coefficient(e.entropy, &scales, d, routing, &aux)
                .map(|rc| rc.with_advantage(a_group, plan.sampled_beta))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((scales, credits))
}

/// Samples `G` student rollouts for one prompt and computes their credit.
///
/// Rollout `i` draws from the stream `(seed, i)`.
pub fn collect_group(
    params: &PolicyParams,
    instance: &TaskInstance,
    plan: &CreditPlan,
    routing: &RoutingConfig,
    seed: u64,
) -> Result<RolloutGroup> {
    let prompt = instance.prompt();
    let answer = privileged_context(instance);
    let mut sampled = Vec::with_capacity(plan.group_size);
    for i in 0..plan.group_size {
        let mut rng = rng::stream(seed, &[i as u64]);
        let rollout = sample_rollout(params, &prompt, plan.max_len, &mut rng, None)?;
        let tokens = rollout.tokens();
        let evidence = token_evidence(params, &prompt, &tokens, answer);
        let verdict = verify(instance, &tokens);
        sampled.push((tokens, evidence, verdict));
    }
    let rewards: Vec<f64> = sampled.iter().map(|(_, _, v)| f64::from(v.reward)).collect();
    let advantage = group_relative_advantage(&rewards, plan.eps)?;
    let trajectories = sampled
        .into_iter()
        .zip(&advantage.advantages)
        .map(|((tokens, evidence, verdict), &a)| {
            let (scales, credits) = route_trajectory(&evidence, a, plan, routing)?;
            Ok(TrajectoryRecord {
                tokens,
                evidence,
                verdict,
                scales,
                credits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutGroup {
        instance: instance.clone(),
        trajectories,
        advantage,
    })
}

/// Gradient of the clipped surrogate (plus the exact reverse-KL term in
/// that mode) for a batch of groups, reduced in a fixed order: groups,
/// then trajectories, then positions.
pub fn surrogate_gradient(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    plan: &CreditPlan,
) -> Result<(Gradient, SurrogateSummary)> {
    let mut grad = Gradient::new();
    let mut summary = SurrogateSummary::default();
    let batch = groups.len() as f64;
    for group in groups {
        let prompt = group.instance.prompt();
        let answer = privileged_context(&group.instance);
        let g = group.trajectories.len() as f64;
        for traj in &group.trajectories {
            let weight = 1.0 / (batch * g * traj.tokens.len() as f64);
            let mut prefix = prompt.clone();
            for ((&tok, ev), rc) in traj.tokens.iter().zip(&traj.evidence).zip(&traj.credits) {
                let key = params.key_unchecked(&prefix, None);
                let dist = params.distribution_for_key(&key);
                let logp = dist.log_prob(tok.index());
                let ratio = (logp - ev.student_logprob).exp();
                summary.max_ratio_deviation = summary.max_ratio_deviation.max((ratio - 1.0).abs());
                summary.surrogate += weight * credit::clipped_surrogate(ratio, rc.a_hat, plan.eps_clip)?;
                // d(ratio)/dθ = ratio ∇log p
                let coeff = credit::clipped_surrogate_slope(ratio, rc.a_hat, plan.eps_clip)? * ratio;
                if coeff != 0.0 {
                    grad.add_score(key, weight * coeff, &dist, tok.index());
                }
                if plan.exact_kl_beta != 0.0 {
                    let teacher = params.distribution_for_key(&params.key_unchecked(&prefix, Some(answer)));
                    let kl_grad = kl_logit_gradient(&dist, &teacher)?;
                    grad.add(key, -plan.exact_kl_beta * weight, &kl_grad);
                }
                prefix.push(tok);
            }
        }
    }
    if !summary.surrogate.is_finite() {
        return Err(Error::NonFinite(format!("surrogate value {}", summary.surrogate)));
    }
    Ok((grad, summary))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SurrogateSummary {
    pub surrogate: f64,
    pub max_ratio_deviation: f64,
}

/// One clipped gradient-ascent step over `groups`.
pub fn ppo_update(
    params: &mut PolicyParams,
    groups: &[RolloutGroup],
    plan: &CreditPlan,
    learning_rate: f64,
    step: u64,
) -> Result<UpdateStats> {
    if groups.is_empty() {
        return Err(Error::Empty("update batch"));
    }
    let (grad, summary) = surrogate_gradient(params, groups, plan)?;
    apply_update(params, &grad, learning_rate).map_err(|e| Error::NonFinite(format!("update {step}: {e}")))?;
    Ok(batch_stats(groups, summary, learning_rate, step))
}

fn batch_stats(groups: &[RolloutGroup], summary: SurrogateSummary, learning_rate: f64, step: u64) -> UpdateStats {
    let (mut n_traj, mut reward, mut length) = (0usize, 0.0, 0.0);
    let (mut n_tok, mut entropy, mut abs_omega, mut positive) = (0usize, 0.0, 0.0, 0usize);
    for traj in groups.iter().flat_map(|g| &g.trajectories) {
        n_traj += 1;
        reward += f64::from(traj.verdict.reward);
        length += traj.tokens.len() as f64;
        for (ev, rc) in traj.evidence.iter().zip(&traj.credits) {
            n_tok += 1;
            entropy += ev.entropy;
            abs_omega += rc.omega.abs();
            positive += usize::from(rc.omega > 0.0);
        }
    }
    let per_traj = n_traj.max(1) as f64;
    let per_tok = n_tok.max(1) as f64;
    UpdateStats {
        step,
        mean_reward: reward / per_traj,
        mean_length: length / per_traj,
        mean_entropy: entropy / per_tok,
        mean_abs_omega: abs_omega / per_tok,
        frac_omega_positive: positive as f64 / per_tok,
        surrogate: summary.surrogate,
        max_ratio_deviation: summary.max_ratio_deviation,
        learning_rate,
    }
}

/// Which routing arms are negated, and from which update on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmFlip {
    pub low: bool,
    pub high: bool,
    pub from_step: u64,
}

/// Stateful training run.
pub struct Trainer {
    config: TrainConfig,
    plan: CreditPlan,
    params: PolicyParams,
    step: u64,
    arm_flip: Option<ArmFlip>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    /// Fresh run from the warm-started base policy.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (params, corpus) = warm_start(&config)?;
        Self::assemble(config, params, corpus, 0)
    }

    /// Resumes from a checkpoint written by the same configuration.
    pub fn from_checkpoint(config: TrainConfig, checkpoint: PolicyCheckpoint) -> Result<Self> {
        config.validate()?;
        if checkpoint.rng.master_seed != config.master_seed {
            return Err(Error::Validation(format!(
                "checkpoint seed {} differs from config seed {}",
                checkpoint.rng.master_seed, config.master_seed
            )));
        }
        let vocab = config.vocabulary();
        if checkpoint.params.vocab_size() != vocab.size() || checkpoint.params.window() != config.window {
            return Err(Error::Validation(
                "checkpoint vocabulary or window differs from config".into(),
            ));
        }
        // corpus statistics are a pure function of the config
        let (_, corpus) = warm_start(&config)?;
        Self::assemble(config, checkpoint.params, corpus, checkpoint.rng.next_update)
    }

    fn assemble(config: TrainConfig, params: PolicyParams, corpus: CorpusStats, step: u64) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        Ok(Self {
            plan: CreditPlan::new(&config, &corpus),
            config,
            params,
            step,
            arm_flip: None,
            pool,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn plan(&self) -> &CreditPlan {
        &self.plan
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.updates
    }

    /// Swaps in externally produced parameters of the same shape.
    pub fn replace_params(&mut self, params: PolicyParams) -> Result<()> {
        if params.vocab_size() != self.params.vocab_size() || params.window() != self.params.window() {
            return Err(Error::Validation("parameters differ in vocabulary or window".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn set_arm_flip(&mut self, flip: Option<ArmFlip>) {
        self.arm_flip = flip;
    }

    /// Routing in force at the current step.
    pub fn routing_now(&self) -> RoutingConfig {
        let mut r = self.plan.routing;
        if let Some(f) = self.arm_flip.filter(|f| self.step >= f.from_step) {
            r.flip_low = f.low;
            r.flip_high = f.high;
        }
        r
    }

    /// Collects the batch of the current step without updating.
    pub fn collect_batch(&self) -> Result<Vec<RolloutGroup>> {
        let routing = self.routing_now();
        let step = self.step;
        let cfg = &self.config;
        let params = &self.params;
        let plan = &self.plan;
        self.pool.install(|| {
            (0..cfg.batch_prompts)
                .into_par_iter()
                .map(|j| {
                    let inst = training_instance(cfg, step, j)?;
                    let seed = rng::derive_seed(cfg.master_seed, &[domain::TRAIN_ROLLOUT, step, j as u64]);
                    collect_group(params, &inst, plan, &routing, seed)
                })
                .collect()
        })
    }

    /// Runs one collect/update cycle.
    pub fn step(&mut self) -> Result<UpdateStats> {
        let groups = self.collect_batch()?;
        let lr = self.config.learning_rate_at(self.step);
        let stats = ppo_update(&mut self.params, &groups, &self.plan, lr, self.step)?;
        self.step += 1;
        Ok(stats)
    }

    pub fn checkpoint(&self) -> PolicyCheckpoint {
        PolicyCheckpoint::new(
            self.params.clone(),
            self.config.vocabulary().names(),
            RngState {
                master_seed: self.config.master_seed,
                next_update: self.step,
            },
            self.step,
        )
    }

    /// Runs to completion, calling `on_step` after every update.
    pub fn run<F>(&mut self, mut on_step: F) -> Result<Vec<UpdateStats>>
    where
        F: FnMut(&Trainer, &UpdateStats) -> Result<()>,
    {
        let mut out = Vec::new();
        while !self.is_done() {
            let stats = self.step()?;
            on_step(self, &stats)?;
            out.push(stats);
        }
        Ok(out)
    }
}

/// Trains from scratch and returns the stats stream and final checkpoint.
pub fn train_run(config: &TrainConfig) -> Result<(Vec<UpdateStats>, PolicyCheckpoint)> {
    let mut trainer = Trainer::new(config.clone())?;
    let stats = trainer.run(|_, _| Ok(()))?;
    Ok((stats, trainer.checkpoint()))
}

/// Vocabulary of a config, re-exported for convenience.
pub fn vocabulary(config: &TrainConfig) -> Vocabulary {
    config.vocabulary()
}

/// Exact student and teacher distributions at one prefix.
pub fn branch_distributions(
    params: &PolicyParams,
    prefix: &[Token],
    answer: Token,
) -> (CategoricalDist, CategoricalDist) {
    (
        params.distribution_for_key(&params.key_unchecked(prefix, None)),
        params.distribution_for_key(&params.key_unchecked(prefix, Some(answer))),
    )
}
