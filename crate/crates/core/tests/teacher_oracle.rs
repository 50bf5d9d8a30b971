use gdmd_core::flow::forward_diffuse;
use gdmd_core::teacher::{train_learned_teacher, GaussianMixture, LabeledData, MixtureComponent, TeacherTrainConfig};
use gdmd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mixture(rng: &mut ChaCha8Rng) -> GaussianMixture {
    let n = rng.gen_range(2..5);
    let comps = (0..n)
        .map(|i| MixtureComponent {
            weight: rng.gen_range(0.2..1.0),
            mean: vec![rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)],
            variance: vec![rng.gen_range(0.3f64..1.0).powi(2), rng.gen_range(0.3f64..1.0).powi(2)],
            label: i % 2,
        })
        .collect();
    GaussianMixture::normalized(comps).unwrap()
}

/// Posterior mean of `x0` given `x_t` by midpoint quadrature on a grid that
/// covers every component's posterior.
fn quadrature_mean(g: &GaussianMixture, x_t: &[f64], t: f64, label: usize) -> Vec<f64> {
    let a = 1.0 - t;
    let comps: Vec<&MixtureComponent> = g.components().iter().filter(|c| c.label == label).collect();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut step = f64::INFINITY;
    for c in &comps {
        for d in 0..2 {
            let prec = 1.0 / c.variance[d] + a * a / (t * t);
            let m = (c.mean[d] / c.variance[d] + a * x_t[d] / (t * t)) / prec;
            let s = prec.sqrt().recip();
            lo[d] = lo[d].min(m - 12.0 * s);
            hi[d] = hi[d].max(m + 12.0 * s);
            step = step.min(s / 6.0);
        }
    }
    let n: Vec<usize> = (0..2).map(|d| ((hi[d] - lo[d]) / step).ceil() as usize).collect();
    let mut logw = Vec::with_capacity(n[0] * n[1]);
    let mut pts = Vec::with_capacity(n[0] * n[1]);
    for i in 0..n[0] {
        let u = lo[0] + (i as f64 + 0.5) * step;
        for j in 0..n[1] {
            let w = lo[1] + (j as f64 + 0.5) * step;
            let x0 = [u, w];
            let prior = comps
                .iter()
                .map(|c| {
                    let q: f64 = (0..2).map(|d| (x0[d] - c.mean[d]).powi(2) / c.variance[d]).sum();
                    let det: f64 = c.variance.iter().product();
                    c.weight * (-0.5 * q).exp() / det.sqrt()
                })
                .sum::<f64>();
            let lik: f64 = (0..2).map(|d| (x_t[d] - a * x0[d]).powi(2)).sum::<f64>() / (t * t);
            logw.push(prior.ln() - 0.5 * lik);
            pts.push(x0);
        }
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut acc) = (0.0, [0.0; 2]);
    for (lw, p) in logw.iter().zip(&pts) {
        let w = (lw - m).exp();
        z += w;
        acc[0] += w * p[0];
        acc[1] += w * p[1];
    }
    vec![acc[0] / z, acc[1] / z]
}

#[test]
fn analytic_denoiser_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..5 {
        let g = random_mixture(&mut rng);
        for &t in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            let labels = vec![0, 1];
            let x0: Tensor<f64> = g.sample_real(&labels, &mut rng).unwrap();
            let eps = Tensor::randn(&[2, 2], &mut rng);
            let x_t = forward_diffuse(&x0, &eps, t).unwrap();
            let got = g.analytic_denoise(&x_t, t, &labels).unwrap();
            for (b, &l) in labels.iter().enumerate() {
                let want = quadrature_mean(&g, x_t.row(b), t, l);
                for d in 0..2 {
                    let err = (got.row(b)[d] - want[d]).abs();
                    assert!(err <= 1e-3, "t={t} label {l}: {} vs {}", got.row(b)[d], want[d]);
                }
            }
        }
    }
}

#[test]
fn single_gaussian_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let mean = vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
        let variance = vec![rng.gen_range(0.05..2.0), rng.gen_range(0.05..2.0)];
        let g = GaussianMixture::new(vec![MixtureComponent {
            weight: 1.0,
            mean: mean.clone(),
            variance: variance.clone(),
            label: 0,
        }])
        .unwrap();
        let t: f64 = rng.gen_range(0.01..0.99);
        let x_t = Tensor::randn(&[3, 2], &mut rng).scale(2.0);
        let got = g.analytic_denoise(&x_t, t, &[0, 0, 0]).unwrap();
        let a = 1.0 - t;
        for b in 0..3 {
            for d in 0..2 {
                let prec = 1.0 / variance[d] + a * a / (t * t);
                let want = (mean[d] / variance[d] + a * x_t.row(b)[d] / (t * t)) / prec;
                assert!((got.row(b)[d] - want).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn flow_matching_pretraining_reduces_loss() {
    let world = GaussianMixture::ring_world();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = LabeledData::<f64>::sample(&world, 2000, &mut rng).unwrap();
    let mut cfg = TeacherTrainConfig::standard(2, 4);
    cfg.mlp.hidden = vec![64, 64];
    cfg.steps = 300;
    let out = train_learned_teacher(&data, &cfg, &mut rng).unwrap();
    let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = out.losses[280..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.6 * head, "loss {head} -> {tail}");
    assert!(out.teacher.learned().unwrap().is_intact());
}
