//! Run configuration: a flat TOML document in which every key is required
//! and unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::credit::{DirectionMap, GateVariant, RouterSignal, RoutingConfig, DEFAULT_EPS, DEFAULT_FIXED_THRESHOLD};
use crate::error::{Error, Result};
use crate::policy::{Vocabulary, MAX_WINDOW};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Verifier advantage only (routing is still computed and logged).
    Grpo,
    /// Sampled self-distillation with ω ≡ +1.
    OpsdSampled,
    /// Exact full-vocabulary reverse-KL distillation.
    OpsdExactKl,
    /// Sampled anti-distillation with ω ≡ −1.
    Novelty,
    /// Entropy-routed signed distillation with the default variants.
    Dasd,
    /// Signed distillation with the `direction`, `gate` and `signal` keys.
    Ablation,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Grpo => "grpo",
            Mode::OpsdSampled => "opsd_sampled",
            Mode::OpsdExactKl => "opsd_exact_kl",
            Mode::Novelty => "novelty",
            Mode::Dasd => "dasd",
            Mode::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateName {
    SigmoidGap,
    None,
    FixedThreshold,
    MagnitudeOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Router direction map for `ablation` mode.
    pub direction: DirectionMap,
    /// Gate for `ablation` mode.
    pub gate: GateName,
    /// Constant of the `fixed_threshold` gate, in nats.
    pub gate_threshold: f64,
    /// Router signal for `ablation` mode.
    pub signal: RouterSignal,
    /// Clamp the normalized gap to [-10, 10].
    pub clip_delta_bar: bool,
    pub group_size: usize,
    pub rho: f64,
    pub beta: f64,
    pub eps: f64,
    pub eps_clip: f64,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub batch_prompts: usize,
    pub updates: u64,
    pub max_len: usize,
    pub window: usize,
    pub master_seed: u64,
    pub eval_seed: u64,
    pub modulus: u8,
    /// Sampling weights of chain lengths 2, 3 and 4.
    pub difficulty_weights: [f64; 3],
    /// Number of solution traces in the supervised warm start.
    pub warmup_traces: usize,
    /// Additive smoothing of the warm-start counts.
    pub warmup_smoothing: f64,
    /// Pseudo-counts shrinking the privileged offsets toward zero.
    pub teacher_shrinkage: f64,
    /// Probability that a warm-start step is first written wrong and revised.
    pub warmup_slip_rate: f64,
    pub eval_instances: usize,
    pub eval_k: usize,
    /// Evaluation cadence in updates (0 disables intermediate snapshots).
    pub eval_every: u64,
    /// Checkpoint cadence in updates (0 disables intermediate checkpoints).
    pub checkpoint_every: u64,
    /// Rayon worker threads; results never depend on this.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dasd,
            direction: DirectionMap::Tanh,
            gate: GateName::SigmoidGap,
            gate_threshold: DEFAULT_FIXED_THRESHOLD,
            signal: RouterSignal::Entropy,
            clip_delta_bar: true,
            group_size: 8,
            rho: 0.2,
            beta: 1.0,
            eps: DEFAULT_EPS,
            eps_clip: 0.2,
            learning_rate: 20.0,
            lr_schedule: LrSchedule::Constant,
            batch_prompts: 32,
            updates: 300,
            max_len: 48,
            window: 4,
            master_seed: 1,
            eval_seed: 1_000_003,
            modulus: 7,
            difficulty_weights: [0.5, 0.5, 0.0],
            warmup_traces: 20_000,
            warmup_smoothing: 0.01,
            teacher_shrinkage: 4.0,
            warmup_slip_rate: 0.1,
            eval_instances: 64,
            eval_k: 16,
            eval_every: 50,
            checkpoint_every: 100,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Checks value ranges; failures are validation errors.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail(format!("rho = {} must lie in (0, 1)", self.rho));
        }
        if self.group_size < 2 {
            return fail(format!("group_size = {} must be at least 2", self.group_size));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta = {} must be finite and non-negative", self.beta));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return fail(format!("eps = {} must be positive", self.eps));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return fail(format!("eps_clip = {} must lie in (0, 1)", self.eps_clip));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(self.gate_threshold > 0.0 && self.gate_threshold.is_finite()) {
            return fail(format!("gate_threshold = {} must be positive", self.gate_threshold));
        }
        if self.batch_prompts == 0 {
            return fail("batch_prompts must be positive".into());
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(1..=MAX_WINDOW).contains(&self.window) {
            return fail(format!("window = {} outside [1, {MAX_WINDOW}]", self.window));
        }
        Vocabulary::new(self.modulus).map_err(|e| Error::Validation(e.to_string()))?;
        if self.difficulty_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.difficulty_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("difficulty_weights must be non-negative with a positive sum".into());
        }
        if !(self.warmup_smoothing > 0.0 && self.warmup_smoothing.is_finite()) {
            return fail("warmup_smoothing must be positive".into());
        }
        if !(self.teacher_shrinkage > 0.0 && self.teacher_shrinkage.is_finite()) {
            return fail("teacher_shrinkage must be positive".into());
        }
        if !(0.0..1.0).contains(&self.warmup_slip_rate) {
            return fail("warmup_slip_rate must lie in [0, 1)".into());
        }
        if self.eval_instances == 0 || self.eval_k == 0 {
            return fail("eval_instances and eval_k must be positive".into());
        }
        if self.workers == 0 {
            return fail("workers must be positive".into());
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.modulus).expect("validated modulus")
    }

    /// The configured gate variant (used by `ablation` mode).
    pub fn gate_variant(&self) -> GateVariant {
        match self.gate {
            GateName::SigmoidGap => GateVariant::SigmoidGap,
            GateName::None => GateVariant::None,
            GateName::FixedThreshold => GateVariant::FixedThreshold(self.gate_threshold),
            GateName::MagnitudeOnly => GateVariant::MagnitudeOnly,
        }
    }

    /// Routing used to compute ω for this mode.
    pub fn routing(&self) -> RoutingConfig {
        let base = RoutingConfig {
            eps: self.eps,
            clip_delta_bar: self.clip_delta_bar,
            ..RoutingConfig::default()
        };
        match self.mode {
            Mode::Grpo | Mode::Dasd => base,
            Mode::OpsdSampled | Mode::OpsdExactKl => RoutingConfig {
                direction: DirectionMap::ConstPlus,
                gate: GateVariant::None,
                ..base
            },
            Mode::Novelty => RoutingConfig {
                direction: DirectionMap::ConstMinus,
                gate: GateVariant::None,
                ..base
            },
            Mode::Ablation => RoutingConfig {
                direction: self.direction,
                gate: self.gate_variant(),
                signal: self.signal,
                ..base
            },
        }
    }

    /// Coupling applied to the sampled signed term.
    pub fn sampled_beta(&self) -> f64 {
        match self.mode {
            Mode::Grpo | Mode::OpsdExactKl => 0.0,
            _ => self.beta,
        }
    }

    /// Weight of the exact reverse-KL gradient.
    pub fn exact_kl_beta(&self) -> f64 {
        match self.mode {
            Mode::OpsdExactKl => self.beta,
            _ => 0.0,
        }
    }

    /// Learning rate at update `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.updates.max(1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    /// Short label such as `dasd` or `ablation(linear_ramp,none,entropy)`.
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Ablation => format!(
                "ablation({},{},{})",
                self.direction.name(),
                self.gate_variant().name(),
                self.signal.name()
            ),
            m => m.name().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_and_unknown_keys_are_config_errors() {
        let text = TrainConfig::default().to_toml();
        let missing: String = text
            .lines()
            .filter(|l| !l.starts_with("rho"))
            .collect::<Vec<_>>()
            .join("\n");
        assert!(matches!(TrainConfig::from_toml(&missing), Err(Error::Config(_))));
        let extra = format!("{text}\nbogus = 1\n");
        assert!(matches!(TrainConfig::from_toml(&extra), Err(Error::Config(_))));
    }

    #[test]
    fn bad_values_are_validation_errors() {
        let text = TrainConfig::default().to_toml().replace("rho = 0.2", "rho = 1.5");
        assert!(matches!(TrainConfig::from_toml(&text), Err(Error::Validation(_))));
        let cfg = TrainConfig {
            group_size: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mode_couplings() {
        let grpo = TrainConfig {
            mode: Mode::Grpo,
            ..Default::default()
        };
        assert_eq!(grpo.sampled_beta(), 0.0);
        let kl = TrainConfig {
            mode: Mode::OpsdExactKl,
            ..Default::default()
        };
        assert_eq!((kl.sampled_beta(), kl.exact_kl_beta()), (0.0, 1.0));
        let nov = TrainConfig {
            mode: Mode::Novelty,
            ..Default::default()
        };
        assert_eq!(nov.routing().direction, DirectionMap::ConstMinus);
        assert_eq!(nov.routing().gate, GateVariant::None);
    }

    #[test]
    fn cosine_schedule_decays() {
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::Cosine,
            updates: 10,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate_at(0), cfg.learning_rate);
        assert!(cfg.learning_rate_at(10) < 1e-12);
    }
}
