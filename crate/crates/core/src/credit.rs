//! Pure numerical kernels for token-level credit: entropies, log-evidence
//! gaps, entropy routing, gap gating, group-relative advantages, the
//! clipped surrogate and distribution distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats;

/// Numerical floor used in every normalizing denominator.
pub const DEFAULT_EPS: f64 = 1e-6;
/// Bound applied to the normalized gap when clipping is enabled.
pub const DELTA_BAR_LIMIT: f64 = 10.0;
/// Default constant for [`GateVariant::FixedThreshold`], in nats.
pub const DEFAULT_FIXED_THRESHOLD: f64 = 0.5;
/// Tolerance on the total mass of a [`CategoricalDist`].
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// A probability vector over the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates and wraps a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty probability vector".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {i} = {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!("mass sums to {total}")));
        }
        Ok(Self { probs })
    }

    /// Numerically stable softmax of a logit row.
    pub fn from_logits(logits: &[f64]) -> Self {
        assert!(!logits.is_empty(), "softmax of an empty row");
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
        Self { probs }
    }

    pub fn uniform(size: usize) -> Self {
        assert!(size > 0, "uniform distribution over an empty vocabulary");
        Self {
            probs: vec![1.0 / size as f64; size],
        }
    }

    pub fn one_hot(size: usize, index: usize) -> Self {
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    /// Natural log-probability of `index` (`-inf` on zero mass).
    pub fn log_prob(&self, index: usize) -> f64 {
        self.probs[index].ln()
    }

    pub fn entropy(&self) -> f64 {
        entropy_of(&self.probs)
    }

    /// Index with the largest mass, earliest on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF lookup for a uniform draw `u` in `[0, 1)`.
    pub fn sample_index(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}

fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>();
    h.clamp(0.0, (probs.len() as f64).ln())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn token_entropy(dist: &CategoricalDist) -> Result<f64> {
    let total: f64 = dist.probs.iter().sum();
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::InvalidDistribution(format!("mass sums to {total}")));
    }
    Ok(dist.entropy())
}

/// Teacher minus student log-probability of the emitted token.
pub fn log_evidence_gap(teacher_logprob: f64, student_logprob: f64) -> Result<f64> {
    if !teacher_logprob.is_finite() || !student_logprob.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-evidence gap inputs ({teacher_logprob}, {student_logprob})"
        )));
    }
    Ok(teacher_logprob - student_logprob)
}

/// Per-token raw material for the credit math.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenEvidence {
    pub position: usize,
    pub token_id: u8,
    pub student_logprob: f64,
    pub teacher_logprob: f64,
    pub entropy: f64,
}

impl TokenEvidence {
    pub fn delta(&self) -> f64 {
        self.teacher_logprob - self.student_logprob
    }
}

/// Per-trajectory normalizers for routing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryScales {
    pub tau_rho: f64,
    pub sigma_hat_h: f64,
    pub delta_tilde: f64,
}

/// Entropy quantile, mean absolute deviation of entropies and median |δ|.
pub fn trajectory_scales(entropies: &[f64], deltas: &[f64], rho: f64) -> Result<TrajectoryScales> {
    if entropies.is_empty() || deltas.is_empty() {
        return Err(Error::Empty("trajectory"));
    }
    if entropies.len() != deltas.len() {
        return Err(Error::SizeMismatch {
            expected: entropies.len(),
            found: deltas.len(),
        });
    }
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidArgument(format!("rho = {rho} outside (0, 1)")));
    }
    let abs: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
    Ok(TrajectoryScales {
        tau_rho: stats::quantile(entropies, rho)?,
        sigma_hat_h: stats::mean_abs_dev(entropies)?,
        delta_tilde: stats::median(&abs)?,
    })
}

/// Quotient that reads `0/0` as 0.
fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Standardized entropy gap `(τ_ρ − H) / (σ̂_H + ε)`.
pub fn entropy_router_argument(entropy: f64, scales: &TrajectoryScales, eps: f64) -> f64 {
    ratio_or_zero(scales.tau_rho - entropy, scales.sigma_hat_h + eps)
}

/// `tanh((τ_ρ − H) / (σ̂_H + ε))`: positive below the trajectory quantile.
pub fn entropy_router(entropy: f64, scales: &TrajectoryScales, eps: f64) -> f64 {
    entropy_router_argument(entropy, scales, eps).tanh()
}

/// Logistic gate `σ(|δ̄| − 1)`, blind to the sign of the gap.
pub fn gap_gate(delta_bar: f64) -> f64 {
    1.0 / (1.0 + (-(delta_bar.abs() - 1.0)).exp())
}

/// Map from the router argument to the router value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMap {
    #[default]
    Tanh,
    HardThreshold,
    LinearRamp,
    ConstPlus,
    ConstMinus,
}

/// Reliability gate applied to the router.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    #[default]
    SigmoidGap,
    None,
    FixedThreshold(f64),
    MagnitudeOnly,
}

/// Signal feeding the router argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterSignal {
    #[default]
    Entropy,
    PositionProxy,
    TokenFrequency,
}

/// Entropy arm of a token relative to the trajectory quantile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    LowH,
    HighH,
}

impl DirectionMap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            DirectionMap::Tanh => x.tanh(),
            DirectionMap::HardThreshold => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            DirectionMap::LinearRamp => x.clamp(-1.0, 1.0),
            DirectionMap::ConstPlus => 1.0,
            DirectionMap::ConstMinus => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DirectionMap::Tanh => "tanh",
            DirectionMap::HardThreshold => "hard_threshold",
            DirectionMap::LinearRamp => "linear_ramp",
            DirectionMap::ConstPlus => "const_plus",
            DirectionMap::ConstMinus => "const_minus",
        }
    }
}

impl GateVariant {
    pub fn apply(self, delta: f64, delta_bar: f64) -> f64 {
        match self {
            GateVariant::SigmoidGap => gap_gate(delta_bar),
            GateVariant::None => 1.0,
            GateVariant::FixedThreshold(c) => {
                if delta.abs() > c {
                    1.0
                } else {
                    0.0
                }
            }
            GateVariant::MagnitudeOnly => delta_bar.abs().min(1.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GateVariant::SigmoidGap => "sigmoid_gap",
            GateVariant::None => "none",
            GateVariant::FixedThreshold(_) => "fixed_threshold",
            GateVariant::MagnitudeOnly => "magnitude_only",
        }
    }
}

impl RouterSignal {
    pub fn name(self) -> &'static str {
        match self {
            RouterSignal::Entropy => "entropy",
            RouterSignal::PositionProxy => "position_proxy",
            RouterSignal::TokenFrequency => "token_frequency",
        }
    }
}

/// Routing configuration for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub direction: DirectionMap,
    pub gate: GateVariant,
    pub signal: RouterSignal,
    pub eps: f64,
    /// Clamp δ̄ to `[-DELTA_BAR_LIMIT, DELTA_BAR_LIMIT]`.
    pub clip_delta_bar: bool,
    /// Negate the router on low-entropy tokens.
    pub flip_low: bool,
    /// Negate the router on high-entropy tokens.
    pub flip_high: bool,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            direction: DirectionMap::Tanh,
            gate: GateVariant::SigmoidGap,
            signal: RouterSignal::Entropy,
            eps: DEFAULT_EPS,
            clip_delta_bar: true,
            flip_low: false,
            flip_high: false,
        }
    }
}

/// Side information needed by the non-entropy router signals.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RoutingAux {
    pub position: Option<usize>,
    pub length: Option<usize>,
    /// Standardized negative log corpus frequency of the emitted token.
    pub token_rarity: Option<f64>,
}

/// Per-token routing output and final advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutedCredit {
    pub delta: f64,
    pub delta_bar: f64,
    pub router: f64,
    pub gate: f64,
    pub omega: f64,
    pub phi: f64,
    pub a_hat: f64,
}

impl RoutedCredit {
    /// Fills `phi` and `a_hat` for a trajectory advantage and coupling `beta`.
    pub fn with_advantage(mut self, a_group: f64, beta: f64) -> Self {
        self.phi = self.omega * self.delta_bar;
        self.a_hat = token_advantage(a_group, beta, self.omega, self.delta_bar);
        self
    }
}

/// Computes δ̄, router, gate and ω for one token. `phi` and `a_hat` are left
/// at zero; see [`RoutedCredit::with_advantage`].
pub fn routing_coefficient(
    entropy: f64,
    scales: &TrajectoryScales,
    delta: f64,
    config: &RoutingConfig,
    aux: &RoutingAux,
) -> Result<RoutedCredit> {
    let mut delta_bar = delta / (scales.delta_tilde + config.eps);
    if config.clip_delta_bar {
        delta_bar = delta_bar.clamp(-DELTA_BAR_LIMIT, DELTA_BAR_LIMIT);
    }
    let argument = match config.signal {
        RouterSignal::Entropy => entropy_router_argument(entropy, scales, config.eps),
        RouterSignal::PositionProxy => {
            let (pos, len) = match (aux.position, aux.length) {
                (Some(p), Some(l)) if l > 0 => (p, l),
                _ => {
                    return Err(Error::InvalidArgument(
                        "position_proxy routing needs position and length".into(),
                    ))
                }
            };
            (std::f64::consts::PI * (0.5 - pos as f64 / len as f64)).sin()
        }
        RouterSignal::TokenFrequency => {
            let rarity = aux
                .token_rarity
                .ok_or_else(|| Error::InvalidArgument("token_frequency routing needs token rarity".into()))?;
            // rare tokens sit in the repulsive arm, like high-entropy ones
            -rarity
        }
    };
    let mut router = config.direction.apply(argument);
    if (config.flip_low && entropy < scales.tau_rho) || (config.flip_high && entropy > scales.tau_rho) {
        router = -router;
    }
    let gate = config.gate.apply(delta, delta_bar);
    Ok(RoutedCredit {
        delta,
        delta_bar,
        router,
        gate,
        omega: router * gate,
        phi: 0.0,
        a_hat: 0.0,
    })
}

/// Verifier rewards of one group and their normalized advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub rewards: Vec<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub advantages: Vec<f64>,
}

/// `(R − μ) / (σ + ε)` with the population standard deviation.
pub fn group_relative_advantage(rewards: &[f64], eps: f64) -> Result<GroupAdvantage> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group of size {} (need at least 2)",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("rewards".into()));
    }
    let n = rewards.len() as f64;
    let mu = rewards.iter().sum::<f64>() / n;
    let sigma = (rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n).sqrt();
    let all_equal = rewards.iter().all(|&r| r == rewards[0]);
    let advantages = if all_equal {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mu) / (sigma + eps)).collect()
    };
    Ok(GroupAdvantage {
        rewards: rewards.to_vec(),
        mu,
        sigma,
        advantages,
    })
}

/// `A_G + β ω δ̄`.
pub fn token_advantage(a_group: f64, beta: f64, omega: f64, delta_bar: f64) -> f64 {
    a_group + beta * omega * delta_bar
}

fn check_clip(ratio: f64, eps_clip: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "importance ratio {ratio} must be positive and finite"
        )));
    }
    if !(eps_clip > 0.0 && eps_clip < 1.0) {
        return Err(Error::InvalidArgument(format!("eps_clip {eps_clip} outside (0, 1)")));
    }
    Ok(())
}

/// `min(ρÂ, clip(ρ, 1 − ε, 1 + ε) Â)`.
pub fn clipped_surrogate(ratio: f64, a_hat: f64, eps_clip: f64) -> Result<f64> {
    check_clip(ratio, eps_clip)?;
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    Ok((ratio * a_hat).min(clipped * a_hat))
}

/// Derivative of [`clipped_surrogate`] with respect to the ratio.
///
/// Equals `a_hat` on the unclipped branch and 0 where the clip is active.
pub fn clipped_surrogate_slope(ratio: f64, a_hat: f64, eps_clip: f64) -> Result<f64> {
    check_clip(ratio, eps_clip)?;
    let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
    if ratio * a_hat <= clipped * a_hat || clipped == ratio {
        Ok(a_hat)
    } else {
        Ok(0.0)
    }
}

fn check_sizes(p: &CategoricalDist, q: &CategoricalDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::SizeMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    Ok(())
}

/// Reverse KL `Σ p ln(p/q)`.
pub fn kl_divergence(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    check_sizes(p, q)?;
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs.iter().zip(&q.probs).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation { index: i, p: pi });
        }
        kl += pi * (pi / qi).ln();
    }
    Ok(kl.max(0.0))
}

/// Total variation `½ Σ |p − q|`.
pub fn tv_distance(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    check_sizes(p, q)?;
    let l1: f64 = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).clamp(0.0, 1.0))
}

/// Gradient of `KL(softmax(z) ‖ q)` with respect to the logits `z`:
/// `p_j (ln p_j − ln q_j − KL)`.
pub fn kl_logit_gradient(p: &CategoricalDist, q: &CategoricalDist) -> Result<Vec<f64>> {
    let kl = kl_divergence(p, q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&pj, &qj)| if pj == 0.0 { 0.0 } else { pj * (pj.ln() - qj.ln() - kl) })
        .collect())
}

/// Score `∇_z ln softmax(z)[token] = e_token − p`.
pub fn score_gradient(p: &CategoricalDist, token: usize) -> Vec<f64> {
    let mut g: Vec<f64> = p.probs.iter().map(|&x| -x).collect();
    g[token] += 1.0;
    g
}
