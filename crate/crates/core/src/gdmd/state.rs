use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dmd::FakeScore;
use crate::error::Result;
use crate::gdmd::config::GdmdConfig;
use crate::nn::{Mlp, OptimizerState};
use crate::reward::{Decoder, RewardModel, RewardNormalizer};
use crate::scalar::Scalar;
use crate::teacher::{GaussianMixture, TeacherModel};
use crate::tensor::Tensor;

/// Read-only inputs shared by every step of a run.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a, T> {
    pub teacher: &'a TeacherModel<T>,
    /// Source of the paired reference data and the label distribution.
    pub world: &'a GaussianMixture,
    /// The reward optimized during training.
    pub reward: &'a RewardModel,
    pub decoder: Decoder,
}

/// Latents, paired reference samples and labels for one step.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub z: Tensor<T>,
    pub z_ref: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Everything that changes during a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub generator: Mlp<T>,
    pub generator_opt: OptimizerState<T>,
    /// Frozen snapshot providing the old-policy velocity.
    pub v_old: Mlp<T>,
    pub fake: FakeScore<T>,
    pub normalizer: RewardNormalizer,
    pub step: u64,
    /// Drives batches, timesteps and distillation noise.
    pub rng: ChaCha8Rng,
    /// Drives the baseline's stochastic rollouts only, so that the
    /// distillation stream is identical across methods.
    pub rollout_rng: ChaCha8Rng,
}

impl<T: Scalar> TrainState<T> {
    /// Generator, snapshot and fake score all start as copies of `init`.
    pub fn new(init: &Mlp<T>, config: &GdmdConfig, seed: u64) -> Self {
        Self {
            generator: init.clone(),
            generator_opt: OptimizerState::new(init, config.generator_adam),
            v_old: init.clone(),
            fake: FakeScore::from_copy(init, config.fake_adam),
            normalizer: RewardNormalizer::new(config.normalizer_decay, config.normalizer_floor),
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            rollout_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5DE5_5A3D_0F1E_A7C1),
        }
    }

    /// Uniform labels, standard-normal latents and matching real samples.
    pub fn sample_batch(&mut self, world: &GaussianMixture, batch_size: usize) -> Result<Batch<T>> {
        let labels: Vec<usize> = (0..batch_size).map(|_| self.rng.gen_range(0..world.n_labels())).collect();
        let z = Tensor::randn(&[batch_size, world.dim()], &mut self.rng);
        let z_ref = world.sample_real(&labels, &mut self.rng)?;
        Ok(Batch { z, z_ref, labels })
    }

    /// Copies the generator into the old-policy snapshot when due.
    pub(crate) fn maybe_refresh_v_old(&mut self, every: u64) {
        if self.step % every == 0 {
            self.v_old = self.generator.clone();
        }
    }
}
