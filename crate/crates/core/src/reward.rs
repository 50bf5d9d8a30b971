//! Analytic reward models, the identity decoder, and optimality-probability
//! normalization of reward differences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::teacher::GaussianMixture;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModel {
    /// `exp(-sharpness ||x - center(label)||^2)`. A single center is shared
    /// by all labels; otherwise one center per label.
    RegionPreference { centers: Vec<Vec<f64>>, sharpness: f64 },
    /// 1 when the most responsible component of `reference` carries the
    /// sample's label, else 0.
    ModeCorrectness { reference: GaussianMixture },
    /// `direction . x` for a unit `direction`.
    AxisPreference { direction: Vec<f64> },
    Composite { parts: Vec<WeightedReward> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedReward {
    pub weight: f64,
    pub reward: RewardModel,
}

impl RewardModel {
    /// Checks weights, norms and sharpness.
    pub fn validate(&self) -> Result<()> {
        match self {
            RewardModel::RegionPreference { centers, sharpness } => {
                if centers.is_empty() {
                    return Err(Error::InvalidArgument("region preference needs a center".into()));
                }
                if !(*sharpness > 0.0 && sharpness.is_finite()) {
                    return Err(Error::InvalidArgument("sharpness must be positive".into()));
                }
                let d = centers[0].len();
                if centers.iter().any(|c| c.len() != d || c.iter().any(|v| !v.is_finite())) {
                    return Err(Error::InvalidArgument("region centers must share a finite dimension".into()));
                }
            }
            RewardModel::ModeCorrectness { .. } => {}
            RewardModel::AxisPreference { direction } => {
                let n: f64 = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("axis direction has norm {n}, expected 1")));
                }
            }
            RewardModel::Composite { parts } => {
                if parts.is_empty() {
                    return Err(Error::InvalidArgument("empty composite reward".into()));
                }
                for p in parts {
                    if !(p.weight > 0.0 && p.weight.is_finite()) {
                        return Err(Error::InvalidArgument("composite weights must be positive".into()));
                    }
                    p.reward.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Unit-normalizes `direction`.
    pub fn axis(direction: &[f64]) -> Self {
        let n: f64 = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        RewardModel::AxisPreference {
            direction: direction.iter().map(|v| v / n).collect(),
        }
    }

    /// Per-sample raw reward.
    pub fn score_raw<T: Scalar>(&self, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<T>> {
        x.ensure_shape("reward input", &[labels.len(), x.cols()])?;
        x.ensure_finite("reward input")?;
        let out = match self {
            RewardModel::RegionPreference { centers, sharpness } => {
                let s = T::lit(*sharpness);
                labels
                    .iter()
                    .zip(x.iter_rows())
                    .map(|(&l, row)| {
                        let c = if centers.len() == 1 {
                            &centers[0]
                        } else {
                            centers.get(l).ok_or(Error::UnknownCondition(l))?
                        };
                        let d2 = row
                            .iter()
                            .zip(c)
                            .fold(T::zero(), |acc, (&v, &m)| acc + (v - T::lit(m)) * (v - T::lit(m)));
                        Ok((-s * d2).exp())
                    })
                    .collect::<Result<Vec<T>>>()?
            }
            RewardModel::ModeCorrectness { reference } => labels
                .iter()
                .zip(x.iter_rows())
                .map(|(&l, row)| {
                    if l >= reference.n_labels() {
                        return Err(Error::UnknownCondition(l));
                    }
                    let k = reference.argmax_component(row);
                    Ok(if reference.components()[k].label == l {
                        T::one()
                    } else {
                        T::zero()
                    })
                })
                .collect::<Result<Vec<T>>>()?,
            RewardModel::AxisPreference { direction } => x
                .iter_rows()
                .map(|row| row.iter().zip(direction).fold(T::zero(), |acc, (&v, &d)| acc + v * T::lit(d)))
                .collect(),
            RewardModel::Composite { parts } => {
                let mut total = vec![T::zero(); labels.len()];
                for p in parts {
                    let w = T::lit(p.weight);
                    for (acc, v) in total.iter_mut().zip(p.reward.score_raw(x, labels)?) {
                        *acc = *acc + w * v;
                    }
                }
                total
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("reward output".into()));
        }
        Ok(out)
    }
}

/// Maps generated coordinates to the space rewards are evaluated in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoder {
    #[default]
    Identity,
}

impl Decoder {
    pub fn decode<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Decoder::Identity => x.clone(),
        }
    }
}

/// `0.5 + 0.5 clip((r_tar - r_x0) / z, -1, 1)`.
pub fn normalize_reward<T: Scalar>(r_raw_tar: T, r_raw_x0: T, z: T) -> T {
    let half = T::lit(0.5);
    let scaled = ((r_raw_tar - r_raw_x0) / z).max(-T::one()).min(T::one());
    half + half * scaled
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct EmaStats {
    mean: f64,
    var: f64,
    count: u64,
}

/// Per-label exponential moving statistics of reward differences.
///
/// `z(label) = max(sqrt(ema_var), floor)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    decay: f64,
    floor: f64,
    stats: BTreeMap<usize, EmaStats>,
}

impl Default for RewardNormalizer {
    fn default() -> Self {
        Self::new(0.99, 0.05)
    }
}

impl RewardNormalizer {
    pub fn new(decay: f64, floor: f64) -> Self {
        assert!(floor > 0.0, "normalizer floor must be positive");
        assert!((0.0..1.0).contains(&decay), "decay must lie in [0, 1)");
        Self {
            decay,
            floor,
            stats: BTreeMap::new(),
        }
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn z(&self, label: usize) -> f64 {
        self.stats
            .get(&label)
            .map_or(self.floor, |s| s.var.sqrt().max(self.floor))
    }

    /// Exponentially weighted mean/variance update (West's recurrence).
    pub fn update(&mut self, label: usize, diff: f64) {
        if !diff.is_finite() {
            return;
        }
        let alpha = 1.0 - self.decay;
        let s = self.stats.entry(label).or_default();
        if s.count == 0 {
            s.mean = diff;
            s.var = 0.0;
        } else {
            let delta = diff - s.mean;
            s.mean += alpha * delta;
            s.var = (1.0 - alpha) * (s.var + alpha * delta * delta);
        }
        s.count += 1;
    }

    /// `z` for every label seen so far (and `floor` for none).
    pub fn snapshot(&self) -> BTreeMap<usize, f64> {
        self.stats.keys().map(|&k| (k, self.z(k))).collect()
    }
}

/// A reward with a reporting name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReward {
    pub name: String,
    /// Contribution to the training objective; ignored for unseen rewards.
    #[serde(default = "unit_weight")]
    pub weight: f64,
    pub reward: RewardModel,
}

fn unit_weight() -> f64 {
    1.0
}

/// Rewards optimized during training and rewards held out for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSuite {
    pub trained: Vec<NamedReward>,
    #[serde(default)]
    pub unseen: Vec<NamedReward>,
}

impl RewardSuite {
    pub fn validate(&self) -> Result<()> {
        if self.trained.is_empty() {
            return Err(Error::InvalidArgument("at least one trained reward required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for r in self.trained.iter().chain(&self.unseen) {
            if !names.insert(r.name.as_str()) || r.name == "total" {
                return Err(Error::InvalidArgument(format!("duplicate or reserved reward name `{}`", r.name)));
            }
            r.reward.validate()?;
        }
        if self.trained.iter().any(|r| !(r.weight > 0.0 && r.weight.is_finite())) {
            return Err(Error::InvalidArgument("trained reward weights must be positive".into()));
        }
        Ok(())
    }

    /// The weighted sum of the trained rewards.
    pub fn training_reward(&self) -> RewardModel {
        match self.trained.as_slice() {
            [single] if single.weight == 1.0 => single.reward.clone(),
            parts => RewardModel::Composite {
                parts: parts
                    .iter()
                    .map(|r| WeightedReward {
                        weight: r.weight,
                        reward: r.reward.clone(),
                    })
                    .collect(),
            },
        }
    }
}
