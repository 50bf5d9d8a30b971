use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::DiscreteSchedule;
use crate::nn::AdamConfig;
use crate::reward::Decoder;

/// Which training step a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Distillation alone: the GDMD step with `gamma = 0`.
    DmdOnly,
    /// Preference optimization scored on stochastic rollouts of `x0`.
    SampleBased,
    /// Preference optimization scored on implicit distillation targets.
    Gdmd,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DmdOnly => "dmd_only",
            Method::SampleBased => "sample_based",
            Method::Gdmd => "gdmd",
        }
    }
}

/// How the group of distillation directions is diversified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CollectionStrategy {
    /// Fresh noise level (and noise) per entry.
    pub t_based: bool,
    /// One fake-score update between consecutive entries.
    pub fake_based: bool,
}

impl CollectionStrategy {
    pub const BOTH: Self = Self {
        t_based: true,
        fake_based: true,
    };
    pub const T_ONLY: Self = Self {
        t_based: true,
        fake_based: false,
    };
    pub const FAKE_ONLY: Self = Self {
        t_based: false,
        fake_based: true,
    };

    pub fn name(self) -> &'static str {
        match (self.t_based, self.fake_based) {
            (true, true) => "both",
            (true, false) => "t_based",
            (false, true) => "fake_based",
            (false, false) => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// One generator step per group entry.
    PerEntry,
    /// One generator step on the entry-averaged gradient.
    Averaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdmdConfig {
    /// Distillation loss weight.
    pub lambda: f64,
    /// Preference loss weight.
    pub gamma: f64,
    /// Mixing coefficient of the implicit positive/negative policies.
    pub beta: f64,
    /// Group size.
    pub eta: usize,
    pub collection: CollectionStrategy,
    pub v_old_refresh_every: u64,
    pub schedule: DiscreteSchedule,
    pub use_data_branch: bool,
    pub update_mode: UpdateMode,
    pub batch_size: usize,
    pub generator_adam: AdamConfig,
    pub fake_adam: AdamConfig,
    pub normalizer_decay: f64,
    pub normalizer_floor: f64,
    /// Diffusion coefficient of the baseline's stochastic rollouts.
    pub sde_noise_scale: f64,
    pub decoder: Decoder,
}

impl Default for GdmdConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            gamma: 0.25,
            beta: 0.1,
            eta: 4,
            collection: CollectionStrategy::BOTH,
            v_old_refresh_every: 50,
            schedule: DiscreteSchedule::four_step(),
            use_data_branch: false,
            update_mode: UpdateMode::PerEntry,
            batch_size: 64,
            generator_adam: AdamConfig::with_lr(1e-4),
            fake_adam: AdamConfig::with_lr(2e-4),
            normalizer_decay: 0.99,
            normalizer_floor: 0.05,
            sde_noise_scale: 0.5,
            decoder: Decoder::Identity,
        }
    }
}

impl GdmdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be >= 0");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be >= 0");
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return bad("beta must lie in (0, 1]");
        }
        if self.eta < 2 {
            return bad("eta must be at least 2");
        }
        if !self.collection.t_based && !self.collection.fake_based {
            return bad("at least one collection strategy must be enabled");
        }
        if self.v_old_refresh_every == 0 {
            return bad("v_old_refresh_every must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.normalizer_floor > 0.0) || !(0.0..1.0).contains(&self.normalizer_decay) {
            return bad("normalizer needs floor > 0 and decay in [0, 1)");
        }
        if !(self.sde_noise_scale >= 0.0) {
            return bad("sde_noise_scale must be >= 0");
        }
        for adam in [&self.generator_adam, &self.fake_adam] {
            if !(adam.learning_rate >= 0.0) || !(0.0..1.0).contains(&adam.beta1) || !(0.0..1.0).contains(&adam.beta2) {
                return bad("invalid Adam settings");
            }
        }
        Ok(())
    }
}
