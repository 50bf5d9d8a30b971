use gdmd_core::dmd::{dmd_gradient, dmd_output_grad, FakeScore};
use gdmd_core::flow::{forward_diffuse, solve_to_x0};
use gdmd_core::nn::{Activation, AdamConfig, Mlp, MlpConfig};
use gdmd_core::teacher::{GaussianMixture, MixtureComponent, TeacherModel};
use gdmd_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn objective(net: &Mlp<f64>, x: &Tensor<f64>, t: f64, cond: &Tensor<f64>, up: &Tensor<f64>) -> f64 {
    net.forward(x, t, cond).unwrap().dot(up).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng, activation: Activation, depth: usize) -> MlpConfig {
    MlpConfig {
        input_dim: rng.gen_range(1..4),
        cond_dim: rng.gen_range(0..4),
        time_embed_dim: rng.gen_range(0..6),
        hidden: (0..depth).map(|_| rng.gen_range(2..10)).collect(),
        output_dim: rng.gen_range(1..4),
        activation,
    }
}

fn random_net(cfg: MlpConfig, rng: &mut ChaCha8Rng) -> Mlp<f64> {
    let mut net = Mlp::new(cfg, rng).unwrap();
    // Nonzero biases and a full-scale output layer exercise every path.
    let flat: Vec<f64> = net.flat_params().iter().map(|_| rng.gen_range(-0.8..0.8)).collect();
    net.set_flat_params(&flat).unwrap();
    net
}

fn check_network(net: &Mlp<f64>, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let c = net.config().clone();
    let batch = rng.gen_range(1..5);
    let x = Tensor::randn(&[batch, c.input_dim], rng);
    let cond = Tensor::randn(&[batch, c.cond_dim], rng);
    let up = Tensor::randn(&[batch, c.output_dim], rng);
    let t = rng.gen_range(0.05..0.95);
    let (grads, dx) = net.backward(&x, t, &cond, &up).unwrap();

    let h = 1e-5;
    let base = net.flat_params();
    let mut probe = net.clone();
    let mut fd = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_flat_params(&p).unwrap();
        let plus = objective(&probe, &x, t, &cond, &up);
        p[i] = base[i] - h;
        probe.set_flat_params(&p).unwrap();
        let minus = objective(&probe, &x, t, &cond, &up);
        fd.push((plus - minus) / (2.0 * h));
    }
    let param_err = rel_err(&grads.flatten(), &fd);

    let mut fd_x = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let plus = objective(net, &xp, t, &cond, &up);
        xp.data_mut()[i] -= 2.0 * h;
        let minus = objective(net, &xp, t, &cond, &up);
        fd_x.push((plus - minus) / (2.0 * h));
    }
    (param_err, rel_err(dx.data(), &fd_x))
}

#[test]
fn parameter_and_input_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (activation, depth) in [(Activation::Tanh, 1), (Activation::Silu, 1), (Activation::Tanh, 3), (Activation::Silu, 3)] {
        for _ in 0..20 {
            let cfg = random_config(&mut rng, activation, depth);
            let net = random_net(cfg.clone(), &mut rng);
            let (pe, xe) = check_network(&net, &mut rng);
            assert!(pe <= 1e-4, "{cfg:?}: parameter gradient relative error {pe:e}");
            assert!(xe <= 1e-4, "{cfg:?}: input gradient relative error {xe:e}");
        }
    }
}

#[test]
fn single_precision_backward_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = random_net(random_config(&mut rng, Activation::Silu, 2), &mut rng);
    let c = net.config().clone();
    let x = Tensor::randn(&[3, c.input_dim], &mut rng);
    let cond = Tensor::randn(&[3, c.cond_dim], &mut rng);
    let up = Tensor::randn(&[3, c.output_dim], &mut rng);
    let (g64, _) = net.backward(&x, 0.4, &cond, &up).unwrap();
    let net32 = net.cast::<f32>();
    let (g32, _) = net32.backward(&x.cast(), 0.4, &cond.cast(), &up.cast()).unwrap();
    let g32: Vec<f64> = g32.flatten().iter().map(|&v| v as f64).collect();
    assert!(rel_err(&g64.flatten(), &g32) < 1e-4);
}

/// Hand-written Jacobian of `x0_hat = x_t - t (W2 act(W1 x + b1) + b2)` with
/// respect to every parameter, for a single hidden layer and no extra inputs.
fn solver_jacobian(net: &Mlp<f64>, x: &[f64], t: f64) -> Vec<Vec<f64>> {
    let [l1, l2] = net.layers() else { panic!("one hidden layer expected") };
    let (din, h) = (l1.weight.shape()[0], l1.weight.shape()[1]);
    let dout = l2.weight.shape()[1];
    let w1 = l1.weight.data();
    let w2 = l2.weight.data();
    let pre: Vec<f64> = (0..h)
        .map(|j| l1.bias.data()[j] + (0..din).map(|i| x[i] * w1[i * h + j]).sum::<f64>())
        .collect();
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let act: Vec<f64> = pre.iter().map(|&z| z * sig(z)).collect();
    let dact: Vec<f64> = pre.iter().map(|&z| sig(z) * (1.0 + z * (1.0 - sig(z)))).collect();
    let mut rows = vec![Vec::new(); dout];
    for (k, row) in rows.iter_mut().enumerate() {
        for i in 0..din {
            for j in 0..h {
                row.push(-t * w2[j * dout + k] * dact[j] * x[i]);
            }
        }
        for j in 0..h {
            row.push(-t * w2[j * dout + k] * dact[j]);
        }
        for j in 0..h {
            for kk in 0..dout {
                row.push(if kk == k { -t * act[j] } else { 0.0 });
            }
        }
        for kk in 0..dout {
            row.push(if kk == k { -t } else { 0.0 });
        }
    }
    rows
}

#[test]
fn surrogate_gradient_equals_explicit_contraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = MlpConfig {
        input_dim: 2,
        cond_dim: 0,
        time_embed_dim: 0,
        hidden: vec![8],
        output_dim: 2,
        activation: Activation::Silu,
    };
    let world = GaussianMixture::new(vec![
        MixtureComponent {
            weight: 0.5,
            mean: vec![1.5, 0.0],
            variance: vec![0.2, 0.3],
            label: 0,
        },
        MixtureComponent {
            weight: 0.5,
            mean: vec![-1.0, 1.0],
            variance: vec![0.4, 0.2],
            label: 0,
        },
    ])
    .unwrap();
    let teacher = TeacherModel::Analytic(world);
    let mut fake_cfg = MlpConfig::standard(2, 1);
    fake_cfg.hidden = vec![16, 16];
    for _ in 0..10 {
        let gen = random_net(cfg.clone(), &mut rng);
        let fake = FakeScore::from_copy(&Mlp::new(fake_cfg.clone(), &mut rng).unwrap(), AdamConfig::with_lr(0.0));
        let batch = rng.gen_range(1..6);
        let labels = vec![0; batch];
        let x_t = Tensor::randn(&[batch, 2], &mut rng);
        let t = rng.gen_range(0.1..0.95);
        let empty = Tensor::zeros(&[batch, 0]);
        let (v, cache) = gen.forward_cached(&x_t, t, &empty).unwrap();
        let x0 = solve_to_x0(&v, &x_t, t).unwrap();
        let eps = Tensor::randn(&[batch, 2], &mut rng);
        let t_dmd = rng.gen_range(0.05..0.95);
        let g = dmd_gradient(&teacher, &fake, &x0, t_dmd, &eps, &labels).unwrap();
        let x_tar = x0.sub(&g.grad).unwrap();
        let (_, up) = dmd_output_grad(&x0, &x_tar, t).unwrap();
        let (surrogate, _) = gen.backward_cached(&cache, &up).unwrap();

        let mut direct = vec![0.0; gen.param_count()];
        for b in 0..batch {
            let jac = solver_jacobian(&gen, x_t.row(b), t);
            for (k, row) in jac.iter().enumerate() {
                for (d, j) in direct.iter_mut().zip(row) {
                    *d += g.grad.row(b)[k] * j / batch as f64;
                }
            }
        }
        let err = rel_err(&surrogate.flatten(), &direct);
        assert!(err <= 1e-6, "relative error {err:e}");
    }
}

#[test]
fn hand_jacobian_agrees_with_forward_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = MlpConfig {
        input_dim: 2,
        cond_dim: 0,
        time_embed_dim: 0,
        hidden: vec![8],
        output_dim: 2,
        activation: Activation::Silu,
    };
    let net = random_net(cfg, &mut rng);
    let x = Tensor::randn(&[1, 2], &mut rng);
    let empty = Tensor::zeros(&[1, 0]);
    let t = 0.6;
    let jac = solver_jacobian(&net, x.row(0), t);
    let base = net.flat_params();
    let mut probe = net.clone();
    let h = 1e-6;
    for i in 0..base.len() {
        let eval = |p: &mut Mlp<f64>, delta: f64| {
            let mut q = base.clone();
            q[i] += delta;
            p.set_flat_params(&q).unwrap();
            solve_to_x0(&p.forward(&x, t, &empty).unwrap(), &x, t).unwrap()
        };
        let plus = eval(&mut probe, h);
        let minus = eval(&mut probe, -h);
        for k in 0..2 {
            let fd = (plus.data()[k] - minus.data()[k]) / (2.0 * h);
            assert!((fd - jac[k][i]).abs() < 1e-7, "param {i} output {k}: {fd} vs {}", jac[k][i]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear_in_upstream(seed in any::<u64>(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = random_net(random_config(&mut rng, Activation::Tanh, 2), &mut rng);
        let c = net.config().clone();
        let x = Tensor::randn(&[2, c.input_dim], &mut rng);
        let cond = Tensor::randn(&[2, c.cond_dim], &mut rng);
        let u1 = Tensor::randn(&[2, c.output_dim], &mut rng);
        let u2 = Tensor::randn(&[2, c.output_dim], &mut rng);
        let mut mix = u1.scale(a);
        mix.axpy(b, &u2).unwrap();
        let (g1, _) = net.backward(&x, 0.3, &cond, &u1).unwrap();
        let (g2, _) = net.backward(&x, 0.3, &cond, &u2).unwrap();
        let (gm, _) = net.backward(&x, 0.3, &cond, &mix).unwrap();
        let expect: Vec<f64> = g1.flatten().iter().zip(g2.flatten()).map(|(p, q)| a * p + b * q).collect();
        prop_assert!(rel_err(&gm.flatten(), &expect) < 1e-10);
    }
}

#[test]
fn diffusion_then_solver_recovers_clean_sample_with_true_velocity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = Tensor::randn(&[5, 3], &mut rng);
    let eps = Tensor::randn(&[5, 3], &mut rng);
    let x_t = forward_diffuse(&x0, &eps, 0.7).unwrap();
    let v = eps.sub(&x0).unwrap();
    let back = solve_to_x0(&v, &x_t, 0.7).unwrap();
    assert!(back.sub(&x0).unwrap().max_abs() < 1e-12);
}
