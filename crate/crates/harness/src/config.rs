use std::fs;
use std::path::{Path, PathBuf};

use gdmd_core::eval::EvalConfig;
use gdmd_core::gdmd::{CollectionStrategy, GdmdConfig, Method};
use gdmd_core::nn::{Activation, AdamConfig, MlpConfig};
use gdmd_core::reward::{RewardModel, RewardSuite};
use gdmd_core::teacher::{GaussianMixture, TeacherTrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

/// Which network provides the real score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Exact posterior mean of the world mixture.
    Analytic,
    /// The flow-matching network that also initializes the generator.
    Learned,
}

/// Flow-matching pretraining of the network every run starts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub steps: usize,
    pub batch: usize,
    pub time_slices: usize,
    pub learning_rate: f64,
    /// Size of the fixed training set drawn from the world.
    pub n_data: usize,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128; 3],
            activation: Activation::Silu,
            time_embed_dim: 8,
            steps: 3000,
            batch: 32,
            time_slices: 8,
            learning_rate: 1e-3,
            n_data: 20_000,
            seed: 0,
        }
    }
}

impl InitConfig {
    pub fn train_config(&self, world: &GaussianMixture) -> TeacherTrainConfig {
        TeacherTrainConfig {
            mlp: MlpConfig {
                input_dim: world.dim(),
                cond_dim: world.n_labels(),
                time_embed_dim: self.time_embed_dim,
                hidden: self.hidden.clone(),
                output_dim: world.dim(),
                activation: self.activation,
            },
            steps: self.steps,
            batch: self.batch,
            time_slices: self.time_slices,
            adam: AdamConfig::with_lr(self.learning_rate),
            seed: self.seed,
        }
    }
}

/// Axes of an ablation grid. An empty axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixAxes {
    #[serde(default)]
    pub methods: Vec<Method>,
    /// Collection strategy names: `t_based`, `fake_based` or `both`.
    #[serde(default)]
    pub collections: Vec<String>,
}

pub fn parse_collection(name: &str) -> Result<CollectionStrategy> {
    match name {
        "both" => Ok(CollectionStrategy::BOTH),
        "t_based" => Ok(CollectionStrategy::T_ONLY),
        "fake_based" => Ok(CollectionStrategy::FAKE_ONLY),
        other => Err(HarnessError::Config(format!(
            "unknown collection strategy `{other}` (expected t_based, fake_based or both)"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: GaussianMixture,
    pub teacher: TeacherMode,
    pub init: InitConfig,
    pub method: Method,
    pub gdmd: GdmdConfig,
    pub rewards: RewardSuite,
    pub steps: u64,
    pub eval_every: u64,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<MatrixAxes>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(HarnessError::Config(msg()))
    }
}

fn reward_dims(r: &RewardModel, dim: usize, n_labels: usize) -> Result<()> {
    match r {
        RewardModel::RegionPreference { centers, .. } => {
            check(centers.iter().all(|c| c.len() == dim), || {
                format!("region centers must have dimension {dim}")
            })?;
            check(centers.len() == 1 || centers.len() >= n_labels, || {
                format!("region preference needs one center or one per label ({n_labels})")
            })
        }
        RewardModel::AxisPreference { direction } => {
            check(direction.len() == dim, || format!("axis direction must have dimension {dim}"))
        }
        RewardModel::ModeCorrectness { reference } => check(
            reference.dim() == dim && reference.n_labels() >= n_labels,
            || "mode-correctness reference does not match the world".to_string(),
        ),
        RewardModel::Composite { parts } => parts.iter().try_for_each(|p| reward_dims(&p.reward, dim, n_labels)),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        check(!self.seeds.is_empty(), || "seeds must not be empty".into())?;
        check(self.steps > 0, || "steps must be positive".into())?;
        check(self.eval_every > 0, || "eval_every must be positive".into())?;
        check(self.init.n_data > 0 && self.init.batch > 0, || {
            "init.n_data and init.batch must be positive".into()
        })?;
        check(!self.init.hidden.is_empty(), || "init.hidden needs at least one layer".into())?;
        check(self.eval.n_per_condition >= 2 && self.eval.n_projections > 0, || {
            "eval needs n_per_condition >= 2 and n_projections > 0".into()
        })?;
        check(self.eval.n_per_task >= 100, || "eval.n_per_task must be at least 100".into())?;
        check(self.eval.outlier_sigma > 0.0, || "eval.outlier_sigma must be positive".into())?;
        self.gdmd.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.rewards.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let (dim, n_labels) = (self.world.dim(), self.world.n_labels());
        for r in self.rewards.trained.iter().chain(&self.rewards.unseen) {
            reward_dims(&r.reward, dim, n_labels)?;
        }
        if let Some(m) = &self.matrix {
            for c in &m.collections {
                parse_collection(c)?;
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; every failure is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// SHA-256 of the configuration with keys sorted, ignoring the name,
    /// seeds, output location and matrix axes.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            for key in ["name", "seeds", "output_dir", "matrix"] {
                map.remove(key);
            }
        }
        // serde_json maps are ordered by key, so this is canonical.
        let canonical = serde_json::to_string(&value).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Short prefix of [`Self::config_hash`] used for directory names.
    pub fn short_hash(&self) -> String {
        self.config_hash()[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(self.short_hash())
    }
}
