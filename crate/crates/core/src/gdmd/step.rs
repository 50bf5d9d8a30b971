use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dmd::dmd_output_grad;
use crate::error::{Error, Result};
use crate::flow::{back_sim, forward_diffuse, sde_sample, solve_to_x0, target_velocity, NoisyState};
use crate::gdmd::config::{GdmdConfig, Method, UpdateMode};
use crate::gdmd::group::{collect_group, group_computation, GradientGroup};
use crate::gdmd::napo::napo_output_grad;
use crate::gdmd::state::{Batch, TrainContext, TrainState};
use crate::nn::{Mlp, MlpGrads};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub method: Method,
    /// Generator time used for this step.
    pub t: f64,
    pub dmd_loss: f64,
    pub rl_loss: f64,
    pub fake_loss: f64,
    pub mean_r: f64,
    /// Fraction of scored samples with `r > 0.5`.
    pub frac_r_above_half: f64,
    pub mean_r_raw_x0: f64,
    pub mean_r_raw_tar: f64,
    pub z_c: BTreeMap<usize, f64>,
    pub grad_norm_dmd: f64,
    pub grad_norm_rl: f64,
    pub grad_norm_total: f64,
    /// Cosine between the step-summed preference and distillation gradients.
    pub rl_dmd_cosine: f64,
    pub fake_version: u64,
    /// The generator was left untouched because a reward was non-finite.
    pub skipped: bool,
}

/// Separate and combined generator gradients for one group entry.
#[derive(Debug, Clone)]
pub struct EntryGrads<T> {
    pub dmd_loss: T,
    pub rl_loss: T,
    pub dmd: MlpGrads<T>,
    /// `None` when `gamma == 0`.
    pub rl: Option<MlpGrads<T>>,
    /// `lambda * dmd + gamma * rl`.
    pub total: MlpGrads<T>,
}

/// Weighted distillation and preference gradients sharing one forward pass.
///
/// The preference target is `x_tar_rl`, the distillation target `x_tar_dmd`;
/// the two coincide in the GDMD step.
#[allow(clippy::too_many_arguments)]
pub fn joint_entry_grads<T: Scalar>(
    gen: &Mlp<T>,
    v_old: &Mlp<T>,
    noisy: &NoisyState<T>,
    x_tar_dmd: &Tensor<T>,
    rl: Option<(&NoisyState<T>, &Tensor<T>, &[T])>,
    lambda: T,
    gamma: T,
    beta: T,
) -> Result<EntryGrads<T>> {
    let cond = gen.condition(&noisy.labels)?;
    let (v_theta, cache) = gen.forward_cached(&noisy.x_t, noisy.t, &cond)?;
    let x0_hat = solve_to_x0(&v_theta, &noisy.x_t, noisy.t)?;
    let (dmd_loss, up) = dmd_output_grad(&x0_hat, x_tar_dmd, noisy.t)?;
    let (dmd, _) = gen.backward_cached(&cache, &up)?;

    let (rl_loss, rl) = match rl {
        Some((rl_noisy, x_tar, r)) if gamma != T::zero() => {
            let v = target_velocity(x_tar, &rl_noisy.x_t, rl_noisy.t)?;
            let shared_input = std::ptr::eq(rl_noisy, noisy) || rl_noisy == noisy;
            let (rl_v_theta, rl_cache);
            let (v_theta_ref, cache_ref) = if shared_input {
                (&v_theta, &cache)
            } else {
                let rl_cond = gen.condition(&rl_noisy.labels)?;
                (rl_v_theta, rl_cache) = gen.forward_cached(&rl_noisy.x_t, rl_noisy.t, &rl_cond)?;
                (&rl_v_theta, &rl_cache)
            };
            let v_old_out = v_old.predict(&rl_noisy.x_t, rl_noisy.t, &rl_noisy.labels)?;
            let (loss, g) = napo_output_grad(v_theta_ref, &v_old_out, &v, r, beta)?;
            let up = g.scale(T::one() / T::lit(r.len().max(1) as f64));
            let (grads, _) = gen.backward_cached(cache_ref, &up)?;
            (loss, Some(grads))
        }
        _ => (T::zero(), None),
    };
    let total = match &rl {
        Some(g) => MlpGrads::combine(lambda, &dmd, gamma, g)?,
        None if lambda == T::one() => dmd.clone(),
        None => dmd.scale(lambda),
    };
    for (name, g) in [("distillation", Some(&dmd)), ("preference", rl.as_ref())] {
        if let Some(path) = g.and_then(MlpGrads::first_non_finite) {
            return Err(Error::Diverged(format!(
                "non-finite {name} gradient at {path} (t={}, dmd_loss={dmd_loss}, rl_loss={rl_loss})",
                noisy.t
            )));
        }
    }
    Ok(EntryGrads {
        dmd_loss,
        rl_loss,
        dmd,
        rl,
        total,
    })
}

/// Cosine of two flattened gradient sets, `0` when either vanishes.
pub fn divergence_diagnostic<T: Scalar>(grad_rl: &MlpGrads<T>, grad_dmd: &MlpGrads<T>) -> Result<T> {
    let denom = grad_rl.norm() * grad_dmd.norm();
    if denom == T::zero() {
        return Ok(T::zero());
    }
    let c = grad_rl.dot(grad_dmd)? / denom;
    Ok(c.max(-T::one()).min(T::one()))
}

/// Schedule time, generator input and detached one-step sample.
fn generator_input<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &Batch<T>,
    config: &GdmdConfig,
) -> Result<(NoisyState<T>, usize, Tensor<T>)> {
    if batch.labels.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let idx = state.rng.gen_range(0..config.schedule.len());
    let t = config.schedule.timesteps()[idx];
    let x_t = if config.use_data_branch {
        forward_diffuse(&batch.z_ref, &batch.z, T::lit(t))?
    } else {
        back_sim(&state.generator, &batch.z, t, &config.schedule, &batch.labels)?
    };
    let noisy = NoisyState {
        x_t,
        t: T::lit(t),
        labels: batch.labels.clone(),
    };
    let v = state.generator.predict(&noisy.x_t, noisy.t, &noisy.labels)?;
    let x0 = solve_to_x0(&v, &noisy.x_t, noisy.t)?;
    Ok((noisy, idx, x0))
}

fn mean<T: Scalar>(values: impl IntoIterator<Item = T>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v.as_f64(), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

struct Accum<T> {
    dmd_loss: f64,
    rl_loss: f64,
    dmd: MlpGrads<T>,
    rl: MlpGrads<T>,
    total: MlpGrads<T>,
}

impl<T: Scalar> Accum<T> {
    fn new(model: &Mlp<T>) -> Self {
        Self {
            dmd_loss: 0.0,
            rl_loss: 0.0,
            dmd: MlpGrads::zeros_like(model),
            rl: MlpGrads::zeros_like(model),
            total: MlpGrads::zeros_like(model),
        }
    }

    fn add(&mut self, g: &EntryGrads<T>) -> Result<()> {
        self.dmd_loss += g.dmd_loss.as_f64();
        self.rl_loss += g.rl_loss.as_f64();
        self.dmd.axpy(T::one(), &g.dmd)?;
        if let Some(rl) = &g.rl {
            self.rl.axpy(T::one(), rl)?;
        }
        self.total.axpy(T::one(), &g.total)
    }
}

/// Applies the per-entry updates and returns the accumulated gradients.
fn apply_updates<T: Scalar>(
    state: &mut TrainState<T>,
    config: &GdmdConfig,
    mut entry_grads: impl FnMut(&Mlp<T>, &Mlp<T>, usize) -> Result<EntryGrads<T>>,
) -> Result<Accum<T>> {
    let mut acc = Accum::new(&state.generator);
    for i in 0..config.eta {
        let g = entry_grads(&state.generator, &state.v_old, i)?;
        acc.add(&g)?;
        if config.update_mode == UpdateMode::PerEntry {
            state
                .generator_opt
                .step(&mut state.generator, &g.total)
                .map_err(|e| Error::Diverged(format!("generator update at step {}: {e}", state.step)))?;
        }
    }
    if config.update_mode == UpdateMode::Averaged {
        let avg = acc.total.scale(T::one() / T::lit(config.eta as f64));
        state
            .generator_opt
            .step(&mut state.generator, &avg)
            .map_err(|e| Error::Diverged(format!("generator update at step {}: {e}", state.step)))?;
    }
    Ok(acc)
}

fn finish_step<T: Scalar>(state: &mut TrainState<T>, config: &GdmdConfig) {
    state.step += 1;
    state.maybe_refresh_v_old(config.v_old_refresh_every);
}

#[allow(clippy::too_many_arguments)]
fn metrics<T: Scalar>(
    state: &TrainState<T>,
    method: Method,
    t: T,
    group: &GradientGroup<T>,
    acc: Option<&Accum<T>>,
    r_values: &[T],
    eta: usize,
) -> Result<StepMetrics> {
    let n = eta as f64;
    let (dmd_loss, rl_loss, gn_dmd, gn_rl, gn_total, cosine) = match acc {
        Some(a) => (
            a.dmd_loss / n,
            a.rl_loss / n,
            a.dmd.norm().as_f64(),
            a.rl.norm().as_f64(),
            a.total.norm().as_f64(),
            divergence_diagnostic(&a.rl, &a.dmd)?.as_f64(),
        ),
        None => (0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    };
    let above = r_values.iter().filter(|&&r| r > T::lit(0.5)).count();
    Ok(StepMetrics {
        step: state.step,
        method,
        t: t.as_f64(),
        dmd_loss,
        rl_loss,
        fake_loss: mean(group.fake_losses.iter().copied()),
        mean_r: mean(r_values.iter().copied()),
        frac_r_above_half: if r_values.is_empty() {
            0.0
        } else {
            above as f64 / r_values.len() as f64
        },
        mean_r_raw_x0: mean(group.entries.first().into_iter().flat_map(|e| e.r_raw_x0.iter().copied())),
        mean_r_raw_tar: mean(group.entries.iter().flat_map(|e| e.r_raw_tar.iter().copied())),
        z_c: state.normalizer.snapshot(),
        grad_norm_dmd: gn_dmd,
        grad_norm_rl: gn_rl,
        grad_norm_total: gn_total,
        rl_dmd_cosine: cosine,
        fake_version: state.fake.version(),
        skipped: acc.is_none(),
    })
}

/// One step of joint distillation and gradient-scored preference
/// optimization. Never draws stochastic rollouts.
pub fn gdmd_train_step<T: Scalar>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_, T>,
    batch: &Batch<T>,
    config: &GdmdConfig,
) -> Result<StepMetrics> {
    gdmd_step_as(state, ctx, batch, config, Method::Gdmd)
}

fn gdmd_step_as<T: Scalar>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_, T>,
    batch: &Batch<T>,
    config: &GdmdConfig,
    method: Method,
) -> Result<StepMetrics> {
    let (noisy, _, x0) = generator_input(state, batch, config)?;
    let mut group = collect_group(ctx, &mut state.fake, &x0, &batch.labels, config, &mut state.rng)?;
    if !group.rewards_finite() {
        log::warn!("step {}: non-finite reward in group, generator update skipped", state.step);
        let m = metrics(state, method, noisy.t, &group, None, &[], config.eta)?;
        finish_step(state, config);
        return Ok(m);
    }
    group_computation(&mut group, &mut state.normalizer);

    let (lambda, gamma, beta) = (T::lit(config.lambda), T::lit(config.gamma), T::lit(config.beta));
    let acc = apply_updates(state, config, |gen, v_old, i| {
        let e = &group.entries[i];
        joint_entry_grads(
            gen,
            v_old,
            &noisy,
            &e.x_tar.x_tar,
            Some((&noisy, &e.x_tar.x_tar, &e.r)),
            lambda,
            gamma,
            beta,
        )
    })?;
    let r_values: Vec<T> = group.entries.iter().flat_map(|e| e.r.iter().copied()).collect();
    let m = metrics(state, method, noisy.t, &group, Some(&acc), &r_values, config.eta)?;
    finish_step(state, config);
    Ok(m)
}

/// Group-relative optimality probabilities for `eta` rollouts per sample:
/// `0.5 + 0.5 clip((R - mean) / std, -1, 1)` within each sample's group.
fn rollout_preferences<T: Scalar>(scores: &[Vec<T>]) -> Vec<Vec<T>> {
    let eta = scores.len();
    let batch = scores.first().map_or(0, Vec::len);
    let mut out = vec![vec![T::lit(0.5); batch]; eta];
    for b in 0..batch {
        let vals: Vec<f64> = scores.iter().map(|s| s[b].as_f64()).collect();
        let m = vals.iter().sum::<f64>() / eta as f64;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / eta as f64).sqrt();
        if sd <= 1e-12 {
            continue;
        }
        for (j, v) in vals.iter().enumerate() {
            let a = ((v - m) / sd).clamp(-1.0, 1.0);
            out[j][b] = T::lit(0.5 + 0.5 * a);
        }
    }
    out
}

/// The sample-scored baseline: distillation as in the GDMD step, with the
/// preference term scored on `eta` stochastic rollouts of the generator and
/// regressed towards each rollout's own endpoint.
pub fn baseline_sample_scoring_step<T: Scalar>(
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_, T>,
    batch: &Batch<T>,
    config: &GdmdConfig,
) -> Result<StepMetrics> {
    let (noisy, idx, x0) = generator_input(state, batch, config)?;
    let group = collect_group(ctx, &mut state.fake, &x0, &batch.labels, config, &mut state.rng)?;

    let mut rollouts = Vec::new();
    if config.gamma != 0.0 {
        for _ in 0..config.eta {
            let ro = sde_sample(
                &state.generator,
                &batch.z,
                &config.schedule,
                &batch.labels,
                config.sde_noise_scale,
                &mut state.rollout_rng,
            )?;
            let score = ctx.reward.score_raw(&ctx.decoder.decode(&ro.x0), &batch.labels)?;
            rollouts.push((ro.trajectory[idx].clone(), ro.x0, score));
        }
    }
    let scores_finite = rollouts.iter().all(|(_, _, s)| s.iter().all(|v| v.is_finite()));
    if !group.rewards_finite() || !scores_finite {
        log::warn!("step {}: non-finite reward in group, generator update skipped", state.step);
        let m = metrics(state, Method::SampleBased, noisy.t, &group, None, &[], config.eta)?;
        finish_step(state, config);
        return Ok(m);
    }
    let prefs = rollout_preferences(&rollouts.iter().map(|(_, _, s)| s.clone()).collect::<Vec<_>>());

    let (lambda, gamma, beta) = (T::lit(config.lambda), T::lit(config.gamma), T::lit(config.beta));
    let acc = apply_updates(state, config, |gen, v_old, i| {
        let rl = rollouts.get(i).map(|(st, end, _)| (st, end, prefs[i].as_slice()));
        joint_entry_grads(gen, v_old, &noisy, &group.entries[i].x_tar.x_tar, rl, lambda, gamma, beta)
    })?;
    let r_values: Vec<T> = prefs.iter().flatten().copied().collect();
    let m = metrics(state, Method::SampleBased, noisy.t, &group, Some(&acc), &r_values, config.eta)?;
    finish_step(state, config);
    Ok(m)
}

/// Dispatches on `method`; distillation alone is the GDMD step with
/// `gamma = 0`.
pub fn train_step<T: Scalar>(
    method: Method,
    state: &mut TrainState<T>,
    ctx: &TrainContext<'_, T>,
    batch: &Batch<T>,
    config: &GdmdConfig,
) -> Result<StepMetrics> {
    match method {
        Method::Gdmd => gdmd_train_step(state, ctx, batch, config),
        Method::SampleBased => baseline_sample_scoring_step(state, ctx, batch, config),
        Method::DmdOnly => {
            let cfg = GdmdConfig {
                gamma: 0.0,
                ..config.clone()
            };
            gdmd_step_as(state, ctx, batch, &cfg, Method::DmdOnly)
        }
    }
}
