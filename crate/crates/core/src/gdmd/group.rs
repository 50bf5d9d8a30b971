use rand::Rng;

use crate::dmd::{build_x_tar, dmd_gradient, fake_denoise_update, sample_dmd_time, DmdGradient, FakeScore, ImplicitTarget};
use crate::error::{Error, Result};
use crate::gdmd::config::GdmdConfig;
use crate::gdmd::state::TrainContext;
use crate::reward::{normalize_reward, RewardNormalizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One candidate direction together with its scores.
#[derive(Debug, Clone)]
pub struct GroupEntry<T> {
    pub grad: DmdGradient<T>,
    pub x_tar: ImplicitTarget<T>,
    /// Per-sample reward of the decoded target.
    pub r_raw_tar: Vec<T>,
    /// Per-sample reward of the decoded sample itself.
    pub r_raw_x0: Vec<T>,
    /// Per-sample optimality probability, filled by [`group_computation`].
    pub r: Vec<T>,
}

/// `eta` directions for one shared batch `(x0, labels)`.
#[derive(Debug, Clone)]
pub struct GradientGroup<T> {
    pub x0: Tensor<T>,
    pub labels: Vec<usize>,
    pub entries: Vec<GroupEntry<T>>,
    /// Losses of the fake-score updates performed while collecting.
    pub fake_losses: Vec<T>,
}

impl<T: Scalar> GradientGroup<T> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rewards_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.r_raw_tar.iter().chain(&e.r_raw_x0).all(|r| r.is_finite()))
    }
}

fn draw_noise<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> (T, Tensor<T>) {
    let t = T::lit(sample_dmd_time(rng));
    (t, Tensor::randn(shape, rng))
}

/// Collects `config.eta` distillation directions for the detached sample
/// `x0` and scores each implicit target.
///
/// With `fake_based` the fake score takes one update before every entry;
/// otherwise it takes all `eta` updates up front so that every strategy
/// performs the same amount of fake-score training. With `t_based` every
/// entry draws its own `(t, eps)`; otherwise one draw is shared.
pub fn collect_group<T: Scalar, R: Rng + ?Sized>(
    ctx: &TrainContext<'_, T>,
    fake: &mut FakeScore<T>,
    x0: &Tensor<T>,
    labels: &[usize],
    config: &GdmdConfig,
    rng: &mut R,
) -> Result<GradientGroup<T>> {
    if config.eta < 2 {
        return Err(Error::InvalidArgument(format!("group size {} < 2", config.eta)));
    }
    let strategy = config.collection;
    if !strategy.t_based && !strategy.fake_based {
        return Err(Error::InvalidArgument("no collection strategy enabled".into()));
    }
    let mut fake_losses = Vec::with_capacity(config.eta);
    if !strategy.fake_based {
        for _ in 0..config.eta {
            let (t, eps) = draw_noise(x0.shape(), rng);
            fake_losses.push(fake_denoise_update(fake, x0, t, &eps, labels)?);
        }
    }
    let shared = (!strategy.t_based).then(|| draw_noise::<T, R>(x0.shape(), rng));

    let r_raw_x0 = ctx.reward.score_raw(&ctx.decoder.decode(x0), labels)?;
    let mut entries = Vec::with_capacity(config.eta);
    for _ in 0..config.eta {
        if strategy.fake_based {
            let (t, eps) = draw_noise(x0.shape(), rng);
            fake_losses.push(fake_denoise_update(fake, x0, t, &eps, labels)?);
        }
        let fresh;
        let (t, eps) = match &shared {
            Some((t, eps)) => (*t, eps),
            None => {
                fresh = draw_noise::<T, R>(x0.shape(), rng);
                (fresh.0, &fresh.1)
            }
        };
        let grad = dmd_gradient(ctx.teacher, fake, x0, t, eps, labels)?;
        let x_tar = build_x_tar(x0, &grad)?;
        let r_raw_tar = ctx.reward.score_raw(&ctx.decoder.decode(&x_tar.x_tar), labels)?;
        entries.push(GroupEntry {
            grad,
            x_tar,
            r_raw_tar,
            r_raw_x0: r_raw_x0.clone(),
            r: Vec::new(),
        });
    }
    Ok(GradientGroup {
        x0: x0.clone(),
        labels: labels.to_vec(),
        entries,
        fake_losses,
    })
}

/// Fills every entry's `r` from the reward differences, using the
/// normalizer's current scale, then feeds all differences to the normalizer
/// in entry order.
pub fn group_computation<T: Scalar>(group: &mut GradientGroup<T>, normalizer: &mut RewardNormalizer) {
    let labels = &group.labels;
    for entry in &mut group.entries {
        entry.r = entry
            .r_raw_tar
            .iter()
            .zip(&entry.r_raw_x0)
            .zip(labels)
            .map(|((&tar, &x0), &label)| normalize_reward(tar, x0, T::lit(normalizer.z(label))))
            .collect();
    }
    for entry in &group.entries {
        for ((&tar, &x0), &label) in entry.r_raw_tar.iter().zip(&entry.r_raw_x0).zip(labels) {
            normalizer.update(label, (tar - x0).as_f64());
        }
    }
}
