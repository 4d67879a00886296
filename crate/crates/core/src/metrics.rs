//! Evaluation: Avg@k, unbiased Pass@k, step-level accuracy, exploration
//! metrics and entropy histograms over pinned rollouts.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_rollout, PolicyParams, Token, Vocabulary};
use crate::rng::{self, domain};
use crate::stats;
use crate::taskenv::{verify, TaskInstance};

/// Window on each side of a MARKER used by the revision test.
pub const REVISION_WINDOW: usize = 12;
/// Trigram overlap at or below which a MARKER counts as a revision.
pub const REVISION_OVERLAP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRollout {
    pub tokens: Vec<Token>,
    pub reward: u8,
    pub step_flags: Vec<bool>,
    pub entropies: Vec<f64>,
    pub terminated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub instance_id: u64,
    pub rollouts: Vec<EvalRollout>,
}

impl EvalSample {
    pub fn correct(&self) -> usize {
        self.rollouts.iter().filter(|r| r.reward == 1).count()
    }
}

/// Samples `k` rollouts per instance; rollout `r` of instance `id` uses the
/// stream `(seed, id, r)`.
pub fn evaluate(
    params: &PolicyParams,
    instances: &[TaskInstance],
    k: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<EvalSample>> {
    instances
        .par_iter()
        .map(|inst| {
            let prompt = inst.prompt();
            let rollouts = (0..k)
                .map(|r| {
                    let mut rng = rng::stream(seed, &[domain::EVAL_ROLLOUT, inst.id, r as u64]);
                    let ro = sample_rollout(params, &prompt, max_len, &mut rng, None)?;
                    let tokens = ro.tokens();
                    let v = verify(inst, &tokens);
                    Ok(EvalRollout {
                        entropies: ro.entropies(),
                        terminated: ro.terminated,
                        tokens,
                        reward: v.reward,
                        step_flags: v.step_flags,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EvalSample {
                instance_id: inst.id,
                rollouts,
            })
        })
        .collect()
}

/// Mean over instances of the correct fraction among the first `k` rollouts, in percent.
pub fn avg_at_k(samples: &[EvalSample], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if samples.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    let mut total = 0.0;
    for s in samples {
        if s.rollouts.len() < k {
            return Err(Error::InvalidArgument(format!(
                "instance {} has {} rollouts, fewer than k = {k}",
                s.instance_id,
                s.rollouts.len()
            )));
        }
        let c = s.rollouts[..k].iter().filter(|r| r.reward == 1).count();
        total += c as f64 / k as f64;
    }
    Ok(100.0 * total / samples.len() as f64)
}

/// Unbiased estimator `1 − C(n−c, k) / C(n, k)`, computed in log space.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::InvalidArgument(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} outside [1, n = {n}]")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let log_ratio: f64 = (0..k).map(|i| ((n - c - i) as f64).ln() - ((n - i) as f64).ln()).sum();
    Ok(1.0 - log_ratio.exp())
}

/// Mean Pass@k over instances for k = 1..=n (as fractions).
pub fn pass_curve(samples: &[EvalSample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    let n = samples.iter().map(|s| s.rollouts.len()).min().unwrap_or(0);
    (1..=n)
        .map(|k| {
            let mut total = 0.0;
            for s in samples {
                total += pass_at_k(s.rollouts.len(), s.correct(), k)?;
            }
            Ok(total / samples.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Mean per-rollout correct-step fraction, in percent.
    pub step_acc: f64,
    /// Mean 1-based index of the first incorrect step (length + 1 when none).
    pub first_error_step: f64,
    /// Pooled correct steps over pooled steps, in percent.
    pub correct_step_ratio: f64,
    /// Rollouts with at least one parsed step.
    pub rollouts_with_steps: usize,
    /// Rollouts excluded for having no parsed step.
    pub rollouts_excluded: usize,
}

pub fn step_metrics(samples: &[EvalSample]) -> Result<StepMetrics> {
    let rollouts: Vec<&EvalRollout> = samples.iter().flat_map(|s| &s.rollouts).collect();
    if rollouts.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    let (mut acc, mut fes, mut n) = (0.0, 0.0, 0usize);
    let (mut pooled_ok, mut pooled) = (0usize, 0usize);
    for r in &rollouts {
        if r.step_flags.is_empty() {
            continue;
        }
        let ok = r.step_flags.iter().filter(|&&f| f).count();
        n += 1;
        acc += ok as f64 / r.step_flags.len() as f64;
        fes += match r.step_flags.iter().position(|f| !f) {
            Some(i) => (i + 1) as f64,
            None => (r.step_flags.len() + 1) as f64,
        };
        pooled_ok += ok;
        pooled += r.step_flags.len();
    }
    let denom = n.max(1) as f64;
    Ok(StepMetrics {
        step_acc: 100.0 * acc / denom,
        first_error_step: fes / denom,
        correct_step_ratio: if pooled == 0 {
            0.0
        } else {
            100.0 * pooled_ok as f64 / pooled as f64
        },
        rollouts_with_steps: n,
        rollouts_excluded: rollouts.len() - n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExplorationMetrics {
    /// MARKER tokens per 100 generated tokens.
    pub e_density: f64,
    /// Fraction of rollouts containing at least one revising MARKER.
    pub rev_rate: f64,
    /// Unique over total trigrams pooled per instance, averaged over instances.
    pub distinct3: f64,
}

fn trigrams(tokens: &[Token]) -> impl Iterator<Item = [Token; 3]> + '_ {
    tokens.windows(3).map(|w| [w[0], w[1], w[2]])
}

/// Jaccard overlap of the trigram sets of two windows (1 when both are empty).
pub fn trigram_overlap(a: &[Token], b: &[Token]) -> f64 {
    let sa: HashSet<[Token; 3]> = trigrams(a).collect();
    let sb: HashSet<[Token; 3]> = trigrams(b).collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Whether some MARKER in `tokens` is followed by a continuation that
/// departs from what preceded it.
pub fn has_revision(tokens: &[Token]) -> bool {
    tokens
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == Vocabulary::MARKER)
        .any(|(m, _)| {
            let pre = &tokens[m.saturating_sub(REVISION_WINDOW)..m];
            let post = &tokens[m + 1..(m + 1 + REVISION_WINDOW).min(tokens.len())];
            trigram_overlap(pre, post) <= REVISION_OVERLAP
        })
}

/// Unique over total trigrams pooled across a set of rollouts; `None` when
/// no rollout has three tokens.
pub fn distinct3<'a>(rollouts: impl IntoIterator<Item = &'a [Token]>) -> Option<f64> {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for toks in rollouts {
        for g in trigrams(toks) {
            seen.insert(g);
            total += 1;
        }
    }
    (total > 0).then(|| seen.len() as f64 / total as f64)
}

pub fn exploration_metrics(samples: &[EvalSample]) -> Result<ExplorationMetrics> {
    let rollouts: Vec<&EvalRollout> = samples.iter().flat_map(|s| &s.rollouts).collect();
    if rollouts.is_empty() {
        return Err(Error::Empty("eval set"));
    }
    let tokens: usize = rollouts.iter().map(|r| r.tokens.len()).sum();
    let markers = rollouts
        .iter()
        .flat_map(|r| &r.tokens)
        .filter(|&&t| t == Vocabulary::MARKER)
        .count();
    let revisions = rollouts.iter().filter(|r| has_revision(&r.tokens)).count();
    let d3: Vec<f64> = samples
        .iter()
        .filter_map(|s| distinct3(s.rollouts.iter().map(|r| r.tokens.as_slice())))
        .collect();
    Ok(ExplorationMetrics {
        e_density: if tokens == 0 {
            0.0
        } else {
            100.0 * markers as f64 / tokens as f64
        },
        rev_rate: revisions as f64 / rollouts.len() as f64,
        distinct3: if d3.is_empty() {
            0.0
        } else {
            d3.iter().sum::<f64>() / d3.len() as f64
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub log10_counts: Vec<f64>,
    pub p50: f64,
    pub p80: f64,
    pub p95: f64,
}

/// Pooled token entropies binned on `[0, ln |V|]`.
pub fn entropy_histogram(entropies: &[f64], bins: usize, vocab_size: usize) -> Result<EntropyHistogram> {
    if bins < 10 {
        return Err(Error::InvalidArgument(format!("bins = {bins} below 10")));
    }
    if entropies.is_empty() {
        return Err(Error::Empty("entropy sample"));
    }
    let top = (vocab_size as f64).ln();
    let edges: Vec<f64> = (0..=bins).map(|i| top * i as f64 / bins as f64).collect();
    let mut counts = vec![0u64; bins];
    for &h in entropies {
        let idx = if top > 0.0 {
            ((h / top) * bins as f64).floor() as usize
        } else {
            0
        };
        counts[idx.min(bins - 1)] += 1;
    }
    Ok(EntropyHistogram {
        log10_counts: counts.iter().map(|&c| ((c + 1) as f64).log10()).collect(),
        edges,
        counts,
        p50: stats::quantile(entropies, 0.5)?,
        p80: stats::quantile(entropies, 0.8)?,
        p95: stats::quantile(entropies, 0.95)?,
    })
}

pub fn pooled_entropies(samples: &[EvalSample]) -> Vec<f64> {
    samples
        .iter()
        .flat_map(|s| &s.rollouts)
        .flat_map(|r| r.entropies.iter().copied())
        .collect()
}

/// Summary of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub instances: usize,
    pub rollouts_per_instance: usize,
    pub avg_at_k: f64,
    /// Mean Pass@k for k = 1..=K, as fractions.
    pub pass_at_k: Vec<f64>,
    pub steps: StepMetrics,
    pub exploration: ExplorationMetrics,
    pub mean_length: f64,
    pub entropy_p50: f64,
    pub entropy_p80: f64,
    pub entropy_p95: f64,
}

impl HealthReport {
    pub fn from_samples(samples: &[EvalSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("eval set"));
        }
        let k = samples.iter().map(|s| s.rollouts.len()).min().unwrap_or(0);
        if k == 0 {
            return Err(Error::Empty("rollouts"));
        }
        let entropies = pooled_entropies(samples);
        let n_roll: usize = samples.iter().map(|s| s.rollouts.len()).sum();
        let len: usize = samples.iter().flat_map(|s| &s.rollouts).map(|r| r.tokens.len()).sum();
        Ok(Self {
            instances: samples.len(),
            rollouts_per_instance: k,
            avg_at_k: avg_at_k(samples, k)?,
            pass_at_k: pass_curve(samples)?,
            steps: step_metrics(samples)?,
            exploration: exploration_metrics(samples)?,
            mean_length: len as f64 / n_roll as f64,
            entropy_p50: stats::quantile(&entropies, 0.5)?,
            entropy_p80: stats::quantile(&entropies, 0.8)?,
            entropy_p95: stats::quantile(&entropies, 0.95)?,
        })
    }

    pub fn pass_at(&self, k: usize) -> f64 {
        self.pass_at_k[k - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rollout(tokens: &[u8], reward: u8, flags: &[bool]) -> EvalRollout {
        EvalRollout {
            tokens: tokens.iter().map(|&t| Token(t)).collect(),
            reward,
            step_flags: flags.to_vec(),
            entropies: vec![0.0; tokens.len()],
            terminated: true,
        }
    }

    fn sample(rewards: &[u8]) -> EvalSample {
        EvalSample {
            instance_id: 0,
            rollouts: rewards.iter().map(|&r| rollout(&[9, 1], r, &[true])).collect(),
        }
    }

    #[test]
    fn avg_examples() {
        assert_eq!(avg_at_k(&[sample(&[1; 16])], 16).unwrap(), 100.0);
        assert_eq!(avg_at_k(&[sample(&[0; 16])], 16).unwrap(), 0.0);
        let mut half = vec![1u8; 8];
        half.extend([0u8; 8]);
        assert_eq!(avg_at_k(&[sample(&half)], 16).unwrap(), 50.0);
        assert!(avg_at_k(&[sample(&half)], 0).is_err());
        assert!(avg_at_k(&[sample(&half)], 17).is_err());
    }

    #[test]
    fn pass_examples() {
        assert_eq!(pass_at_k(4, 4, 2).unwrap(), 1.0);
        assert_eq!(pass_at_k(4, 0, 3).unwrap(), 0.0);
        assert_abs_diff_eq!(pass_at_k(4, 1, 2).unwrap(), 0.5, epsilon = 1e-15);
        assert!(pass_at_k(4, 1, 5).is_err());
        assert!(pass_at_k(4, 5, 1).is_err());
        assert_abs_diff_eq!(pass_at_k(16, 3, 1).unwrap(), 3.0 / 16.0, epsilon = 1e-15);
    }

    #[test]
    fn step_examples() {
        let all = EvalSample {
            instance_id: 0,
            rollouts: vec![rollout(&[9], 1, &[true; 5])],
        };
        let m = step_metrics(&[all]).unwrap();
        assert_eq!(
            (m.step_acc, m.first_error_step, m.correct_step_ratio),
            (100.0, 6.0, 100.0)
        );
        let mixed = EvalSample {
            instance_id: 0,
            rollouts: vec![rollout(&[9], 0, &[true, false, true])],
        };
        let m = step_metrics(&[mixed]).unwrap();
        assert_abs_diff_eq!(m.step_acc, 200.0 / 3.0, epsilon = 1e-12);
        assert_eq!(m.first_error_step, 2.0);
        assert!(step_metrics(&[]).is_err());
        let none = EvalSample {
            instance_id: 0,
            rollouts: vec![rollout(&[9], 0, &[])],
        };
        assert_eq!(step_metrics(&[none]).unwrap().rollouts_excluded, 1);
    }

    #[test]
    fn exploration_examples() {
        let plain = EvalSample {
            instance_id: 0,
            rollouts: vec![rollout(&[9, 10, 11, 1], 1, &[])],
        };
        let m = exploration_metrics(&[plain]).unwrap();
        assert_eq!((m.e_density, m.rev_rate), (0.0, 0.0));

        // K identical rollouts of one repeated token, length L
        let (k, l) = (4usize, 10usize);
        let rep = EvalSample {
            instance_id: 0,
            rollouts: vec![rollout(&vec![9; l], 0, &[]); k],
        };
        assert_abs_diff_eq!(
            exploration_metrics(&[rep]).unwrap().distinct3,
            1.0 / (k * (l - 2)) as f64,
            epsilon = 1e-15
        );
        let single = EvalSample {
            instance_id: 0,
            rollouts: vec![rollout(&vec![9; l], 0, &[])],
        };
        assert_abs_diff_eq!(
            exploration_metrics(&[single]).unwrap().distinct3,
            1.0 / (l - 2) as f64,
            epsilon = 1e-15
        );
    }

    #[test]
    fn revision_boundary() {
        let m = Vocabulary::MARKER.0;
        let repeat = [9, 10, 11, 12, 13, m, 9, 10, 11, 12, 13];
        let toks: Vec<Token> = repeat.iter().map(|&t| Token(t)).collect();
        assert_eq!(trigram_overlap(&toks[..5], &toks[6..]), 1.0);
        assert!(!has_revision(&toks));
        let fresh = [9, 10, 11, 12, 13, m, 14, 15, 9, 4, 1];
        let toks: Vec<Token> = fresh.iter().map(|&t| Token(t)).collect();
        assert!(has_revision(&toks));
    }

    #[test]
    fn histogram_examples() {
        let h = entropy_histogram(&[0.0; 20], 10, 16).unwrap();
        assert_eq!(h.counts[0], 20);
        assert_eq!(h.counts.iter().sum::<u64>(), 20);
        let ln4 = 4f64.ln();
        let u = entropy_histogram(&[ln4; 7], 12, 4).unwrap();
        assert_eq!(u.counts[11], 7);
        assert_abs_diff_eq!(u.p80, 1.3862944, epsilon = 1e-7);
        assert!(entropy_histogram(&[0.1], 9, 4).is_err());
    }
}
