//! Distribution matching distillation.
//!
//! The generator update direction is the difference between the fake and
//! real `x0` predictions at a re-noised generator sample. Subtracting it from
//! the sample gives the implicit regression target `x_tar`, and half the
//! squared distance to `x_tar` is a surrogate loss with exactly that gradient.

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{forward_diffuse, solve_to_x0, NoisyState};
use crate::nn::{AdamConfig, Mlp, MlpGrads, OptimizerState};
use crate::scalar::Scalar;
use crate::teacher::TeacherModel;
use crate::tensor::Tensor;

/// Lower clamp of the per-sample gradient normalizer.
pub const NORMALIZER_FLOOR: f64 = 1e-3;

/// Distillation timesteps are drawn from `U(DMD_T_MIN, DMD_T_MAX)`.
pub const DMD_T_MIN: f64 = 0.02;
pub const DMD_T_MAX: f64 = 0.98;

pub fn sample_dmd_time<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.gen_range(DMD_T_MIN..DMD_T_MAX)
}

/// The online estimate of the generator's score, with its own optimizer.
#[derive(Debug, Clone)]
pub struct FakeScore<T> {
    model: Mlp<T>,
    optimizer: OptimizerState<T>,
    version: u64,
}

impl<T: Scalar> FakeScore<T> {
    /// Starts as a copy of `init` (the teacher network) at version 0.
    pub fn from_copy(init: &Mlp<T>, adam: AdamConfig) -> Self {
        Self {
            model: init.clone(),
            optimizer: OptimizerState::new(init, adam),
            version: 0,
        }
    }

    pub fn model(&self) -> &Mlp<T> {
        &self.model
    }

    /// Number of successful updates so far.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn optimizer(&self) -> &OptimizerState<T> {
        &self.optimizer
    }

    pub fn denoise(&self, x_t: &Tensor<T>, t: T, labels: &[usize]) -> Result<Tensor<T>> {
        let v = self.model.predict(x_t, t, labels)?;
        solve_to_x0(&v, x_t, t)
    }
}

/// A distribution-matching direction in `x0` space.
#[derive(Debug, Clone, PartialEq)]
pub struct DmdGradient<T> {
    pub grad: Tensor<T>,
    pub t_used: T,
    pub fake_version: u64,
    /// Per-sample `max(mean_d |x0 - x0_real|, NORMALIZER_FLOOR)`.
    pub normalizer: Vec<T>,
}

/// `x_tar = x0 - grad`, tagged with the gradient it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitTarget<T> {
    pub x_tar: Tensor<T>,
    pub t_used: T,
    pub fake_version: u64,
}

/// `(x0_fake - x0_real) / normalizer` at `x_t = forward_diffuse(x0, eps, t)`.
pub fn dmd_gradient<T: Scalar>(
    teacher: &TeacherModel<T>,
    fake: &FakeScore<T>,
    x0: &Tensor<T>,
    t: T,
    eps: &Tensor<T>,
    labels: &[usize],
) -> Result<DmdGradient<T>> {
    let x_t = forward_diffuse(x0, eps, t)?;
    let real = teacher.denoise(&x_t, t, labels)?;
    let fake_x0 = fake.denoise(&x_t, t, labels)?;
    real.ensure_finite("real denoiser output")?;
    fake_x0.ensure_finite("fake denoiser output")?;

    let dim = x0.cols();
    let floor = T::lit(NORMALIZER_FLOOR);
    let dim_t = T::lit(dim as f64);
    let normalizer: Vec<T> = x0
        .iter_rows()
        .zip(real.iter_rows())
        .map(|(a, b)| {
            let m = a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs()) / dim_t;
            m.max(floor)
        })
        .collect();
    let mut grad = fake_x0.sub(&real)?;
    for (row, &w) in grad.data_mut().chunks_mut(dim.max(1)).zip(&normalizer) {
        for v in row {
            *v = *v / w;
        }
    }
    grad.ensure_finite("dmd gradient")?;
    Ok(DmdGradient {
        grad,
        t_used: t,
        fake_version: fake.version,
        normalizer,
    })
}

pub fn build_x_tar<T: Scalar>(x0: &Tensor<T>, grad: &DmdGradient<T>) -> Result<ImplicitTarget<T>> {
    Ok(ImplicitTarget {
        x_tar: x0.sub(&grad.grad)?,
        t_used: grad.t_used,
        fake_version: grad.fake_version,
    })
}

/// Loss `0.5 mean_b ||x0_hat_b - x_tar_b||^2` and its gradient with respect
/// to the velocity output that produced `x0_hat = x_t - t v`.
pub fn dmd_output_grad<T: Scalar>(x0_hat: &Tensor<T>, x_tar: &Tensor<T>, t: T) -> Result<(T, Tensor<T>)> {
    let resid = x0_hat.sub(x_tar)?;
    let batch = T::lit(x0_hat.rows().max(1) as f64);
    let loss = T::lit(0.5) * resid.sum_squares() / batch;
    Ok((loss, resid.scale(-t / batch)))
}

/// Surrogate loss and parameter gradients for one generator batch.
pub fn dmd_loss_and_grads<T: Scalar>(
    gen: &Mlp<T>,
    noisy: &NoisyState<T>,
    target: &ImplicitTarget<T>,
) -> Result<(T, MlpGrads<T>)> {
    let cond = gen.condition(&noisy.labels)?;
    let (v, cache) = gen.forward_cached(&noisy.x_t, noisy.t, &cond)?;
    let x0_hat = solve_to_x0(&v, &noisy.x_t, noisy.t)?;
    let (loss, up) = dmd_output_grad(&x0_hat, &target.x_tar, noisy.t)?;
    let (grads, _) = gen.backward_cached(&cache, &up)?;
    Ok((loss, grads))
}

/// One denoising update of the fake score on detached generator samples.
///
/// Loss: `mean_b || x0_hat_fake(forward_diffuse(x0, eps, t)) - x0 ||^2`.
pub fn fake_denoise_update<T: Scalar>(
    fake: &mut FakeScore<T>,
    x0: &Tensor<T>,
    t: T,
    eps: &Tensor<T>,
    labels: &[usize],
) -> Result<T> {
    let x_t = forward_diffuse(x0, eps, t)?;
    let cond = fake.model.condition(labels)?;
    let (v, cache) = fake.model.forward_cached(&x_t, t, &cond)?;
    let x0_hat = solve_to_x0(&v, &x_t, t)?;
    let resid = x0_hat.sub(x0)?;
    let batch = T::lit(x0.rows().max(1) as f64);
    let loss = resid.sum_squares() / batch;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!(
            "fake denoising loss {loss} at version {} (t={t})",
            fake.version
        )));
    }
    let up = resid.scale(T::lit(-2.0) * t / batch);
    let (grads, _) = fake.model.backward_cached(&cache, &up)?;
    fake.optimizer
        .step(&mut fake.model, &grads)
        .map_err(|e| Error::Diverged(format!("fake score update: {e}")))?;
    fake.version += 1;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpConfig;
    use crate::teacher::{FrozenTeacher, GaussianMixture, MixtureComponent};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(rng: &mut ChaCha8Rng) -> Mlp<f64> {
        let mut cfg = MlpConfig::standard(2, 2);
        cfg.hidden = vec![8];
        Mlp::new(cfg, rng).unwrap()
    }

    #[test]
    fn identical_scores_give_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = small_net(&mut rng);
        let teacher = TeacherModel::Learned(FrozenTeacher::freeze(net.clone()));
        let fake = FakeScore::from_copy(&net, AdamConfig::with_lr(1e-3));
        let x0 = Tensor::randn(&[6, 2], &mut rng);
        let eps = Tensor::randn(&[6, 2], &mut rng);
        let labels = [0, 1, 0, 1, 0, 1];
        let g = dmd_gradient(&teacher, &fake, &x0, 0.4, &eps, &labels).unwrap();
        assert!(g.grad.data().iter().all(|&v| v == 0.0));
        let tar = build_x_tar(&x0, &g).unwrap();
        assert_eq!(tar.x_tar, x0);
    }

    #[test]
    fn gradient_against_point_mass_teacher() {
        // Teacher: point mass at c (tiny variance). Fake: a zero network, so
        // x0_fake = x_t. Oracle: E_teacher[x0 | x_t] = c, hence
        // grad = (x_t - c) / max(mean|x0 - c|, floor).
        let c = [1.0, -2.0];
        let g = GaussianMixture::new(vec![MixtureComponent {
            weight: 1.0,
            mean: c.to_vec(),
            variance: vec![1e-14, 1e-14],
            label: 0,
        }])
        .unwrap();
        let teacher = TeacherModel::Analytic(g);
        let mut cfg = MlpConfig::standard(2, 1);
        cfg.hidden = vec![4];
        let fake = FakeScore::from_copy(&Mlp::zeros(cfg).unwrap(), AdamConfig::with_lr(1e-3));
        let pts = [[0.5, 0.5], [3.0, -1.0], [-2.0, 4.0]];
        for p in pts {
            let x0 = Tensor::from_f64(&[1, 2], &p).unwrap();
            let eps = Tensor::from_f64(&[1, 2], &[0.3, -0.7]).unwrap();
            let t = 0.6;
            let out = dmd_gradient(&teacher, &fake, &x0, t, &eps, &[0]).unwrap();
            let xt = [(1.0 - t) * p[0] + t * 0.3, (1.0 - t) * p[1] - t * 0.7];
            let w = (((p[0] - c[0]).abs() + (p[1] - c[1]).abs()) / 2.0).max(NORMALIZER_FLOOR);
            for k in 0..2 {
                let expected = (xt[k] - c[k]) / w;
                assert!((out.grad.data()[k] - expected).abs() < 1e-9, "{} vs {expected}", out.grad.data()[k]);
            }
        }
    }

    #[test]
    fn normalizer_clamps_at_floor() {
        let c = [0.5, 0.5];
        let g = GaussianMixture::new(vec![MixtureComponent {
            weight: 1.0,
            mean: c.to_vec(),
            variance: vec![1e-14, 1e-14],
            label: 0,
        }])
        .unwrap();
        let teacher = TeacherModel::Analytic(g);
        let mut cfg = MlpConfig::standard(2, 1);
        cfg.hidden = vec![4];
        let fake = FakeScore::from_copy(&Mlp::zeros(cfg).unwrap(), AdamConfig::with_lr(1e-3));
        let x0 = Tensor::from_f64(&[1, 2], &c).unwrap();
        let eps = Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        let out = dmd_gradient(&teacher, &fake, &x0, 0.5, &eps, &[0]).unwrap();
        assert_eq!(out.normalizer[0], NORMALIZER_FLOOR);
        assert!(out.grad.is_finite());
    }

    #[test]
    fn x_tar_arithmetic() {
        let x0 = Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        let g = DmdGradient {
            grad: Tensor::from_f64(&[1, 2], &[0.5, -0.5]).unwrap(),
            t_used: 0.3,
            fake_version: 2,
            normalizer: vec![1.0],
        };
        let tar = build_x_tar(&x0, &g).unwrap();
        assert_eq!(tar.x_tar.data(), &[0.5, 1.5]);
        assert_eq!(tar.fake_version, 2);
        // exact arithmetic: x0 - x_tar recovers the gradient bitwise here
        assert_eq!(x0.sub(&tar.x_tar).unwrap(), g.grad);
        let zero = DmdGradient {
            grad: Tensor::zeros(&[1, 2]),
            ..g
        };
        assert_eq!(build_x_tar(&x0, &zero).unwrap().x_tar, x0);
    }

    #[test]
    fn surrogate_vanishes_at_its_own_output_and_scales_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = small_net(&mut rng);
        let labels = vec![0, 1, 1, 0];
        let x_t = Tensor::randn(&[4, 2], &mut rng);
        let t = 0.5;
        let noisy = NoisyState {
            x_t: x_t.clone(),
            t,
            labels: labels.clone(),
        };
        let v = gen.predict(&x_t, t, &labels).unwrap();
        let x0_hat = solve_to_x0(&v, &x_t, t).unwrap();
        let same = ImplicitTarget {
            x_tar: x0_hat.clone(),
            t_used: t,
            fake_version: 0,
        };
        let (loss, g) = dmd_loss_and_grads(&gen, &noisy, &same).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);

        let d = Tensor::randn(&[4, 2], &mut rng);
        let one = ImplicitTarget {
            x_tar: x0_hat.sub(&d).unwrap(),
            ..same.clone()
        };
        let two = ImplicitTarget {
            x_tar: x0_hat.sub(&d.scale(2.0)).unwrap(),
            ..same
        };
        let (_, g1) = dmd_loss_and_grads(&gen, &noisy, &one).unwrap();
        let (_, g2) = dmd_loss_and_grads(&gen, &noisy, &two).unwrap();
        let diff = MlpGrads::combine(2.0, &g1, -1.0, &g2).unwrap();
        assert!(diff.max_abs() <= 1e-10 * g2.max_abs().max(1.0));
    }

    #[test]
    fn fake_update_bumps_version_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = small_net(&mut rng);
        let mut fake = FakeScore::from_copy(&net, AdamConfig::with_lr(1e-3));
        let x0 = Tensor::randn(&[5, 2], &mut rng);
        let eps = Tensor::randn(&[5, 2], &mut rng);
        for k in 1..=3 {
            fake_denoise_update(&mut fake, &x0, 0.3, &eps, &[0, 1, 0, 1, 0]).unwrap();
            assert_eq!(fake.version(), k);
        }
        assert_eq!(fake.optimizer().step_count(), 3);
    }

    #[test]
    fn zero_time_denoising_loss_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = small_net(&mut rng);
        let mut fake = FakeScore::from_copy(&net, AdamConfig::with_lr(1e-3));
        let x0 = Tensor::randn(&[5, 2], &mut rng);
        let eps = Tensor::randn(&[5, 2], &mut rng);
        let loss = fake_denoise_update(&mut fake, &x0, 0.0, &eps, &[0; 5]).unwrap();
        assert_eq!(loss, 0.0);
    }
}
