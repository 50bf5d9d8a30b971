//! The real distribution and its frozen denoiser.
//!
//! [`GaussianMixture`] is a labelled mixture of diagonal Gaussians. Diffusing
//! it with `x_t = (1 - t) x0 + t eps` keeps it a mixture, so the posterior
//! mean `E[x0 | x_t, label]` is available in closed form and serves as the
//! exact teacher.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{forward_diffuse, solve_to_x0};
use crate::nn::{checkpoint, AdamConfig, Mlp, MlpConfig, MlpGrads, OptimizerState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal of the covariance.
    pub variance: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<MixtureComponent>", into = "Vec<MixtureComponent>")]
pub struct GaussianMixture {
    components: Vec<MixtureComponent>,
    dim: usize,
    n_labels: usize,
}

impl TryFrom<Vec<MixtureComponent>> for GaussianMixture {
    type Error = Error;

    fn try_from(components: Vec<MixtureComponent>) -> Result<Self> {
        Self::new(components)
    }
}

impl From<GaussianMixture> for Vec<MixtureComponent> {
    fn from(g: GaussianMixture) -> Self {
        g.components
    }
}

impl GaussianMixture {
    /// Validates weights (positive, summing to 1 within 1e-9), variances
    /// (positive), dimensions, and that labels `0..n` are all populated.
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(Error::InvalidArgument("mixture has no components".into()));
        };
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::InvalidArgument("zero-dimensional mixture".into()));
        }
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.variance.len() != dim {
                return Err(Error::InvalidArgument(format!("component {i} has wrong dimension")));
            }
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::InvalidArgument(format!("component {i} weight must be positive")));
            }
            if c.variance.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument(format!("component {i} variance must be positive")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidArgument(format!("component {i} mean is not finite")));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        let n_labels = components.iter().map(|c| c.label).max().unwrap_or(0) + 1;
        for l in 0..n_labels {
            if !components.iter().any(|c| c.label == l) {
                return Err(Error::UnknownCondition(l));
            }
        }
        Ok(Self {
            components,
            dim,
            n_labels,
        })
    }

    /// Like [`GaussianMixture::new`] but rescales weights to sum to one.
    pub fn normalized(mut components: Vec<MixtureComponent>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if total > 0.0 {
            for c in &mut components {
                c.weight /= total;
            }
        }
        Self::new(components)
    }

    /// Four labelled clusters on a ring of radius 4 with per-axis std 0.35.
    ///
    /// Labels 0 and 2 are single Gaussians at 45 and 225 degrees. Labels 1
    /// and 3 add a lighter satellite 35 degrees further around the ring.
    pub fn ring_world() -> Self {
        let radius = 4.0;
        let var = 0.35f64 * 0.35;
        let at = |deg: f64| {
            let r = deg.to_radians();
            vec![radius * r.cos(), radius * r.sin()]
        };
        let mut comps = Vec::new();
        for label in 0..4 {
            let base = 45.0 + 90.0 * label as f64;
            if label % 2 == 0 {
                comps.push(MixtureComponent {
                    weight: 0.25,
                    mean: at(base),
                    variance: vec![var; 2],
                    label,
                });
            } else {
                comps.push(MixtureComponent {
                    weight: 0.25 * 0.7,
                    mean: at(base),
                    variance: vec![var; 2],
                    label,
                });
                comps.push(MixtureComponent {
                    weight: 0.25 * 0.3,
                    mean: at(base + 35.0),
                    variance: vec![var; 2],
                    label,
                });
            }
        }
        Self::new(comps).expect("valid world")
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// Indices of the components carrying `label`.
    pub fn components_for(&self, label: usize) -> Result<Vec<usize>> {
        let idx: Vec<usize> = (0..self.components.len())
            .filter(|&k| self.components[k].label == label)
            .collect();
        if idx.is_empty() {
            Err(Error::UnknownCondition(label))
        } else {
            Ok(idx)
        }
    }

    /// Weighted mean of the components carrying `label`.
    pub fn conditional_mean(&self, label: usize) -> Result<Vec<f64>> {
        let idx = self.components_for(label)?;
        let total: f64 = idx.iter().map(|&k| self.components[k].weight).sum();
        let mut m = vec![0.0; self.dim];
        for &k in &idx {
            let c = &self.components[k];
            for (acc, &v) in m.iter_mut().zip(&c.mean) {
                *acc += c.weight / total * v;
            }
        }
        Ok(m)
    }

    /// Draws one sample per label.
    pub fn sample_real<T: Scalar, R: Rng + ?Sized>(&self, labels: &[usize], rng: &mut R) -> Result<Tensor<T>> {
        if labels.is_empty() {
            return Err(Error::InvalidArgument("n must be positive".into()));
        }
        let mut data = Vec::with_capacity(labels.len() * self.dim);
        let mut cache: Vec<Option<(Vec<usize>, f64)>> = vec![None; self.n_labels];
        for &label in labels {
            if label >= self.n_labels {
                return Err(Error::UnknownCondition(label));
            }
            let (idx, total) = match &cache[label] {
                Some(e) => e.clone(),
                None => {
                    let idx = self.components_for(label)?;
                    let total = idx.iter().map(|&k| self.components[k].weight).sum();
                    cache[label] = Some((idx.clone(), total));
                    (idx, total)
                }
            };
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = idx[idx.len() - 1];
            for &k in &idx {
                acc += self.components[k].weight;
                if u < acc {
                    chosen = k;
                    break;
                }
            }
            let c = &self.components[chosen];
            for (m, v) in c.mean.iter().zip(&c.variance) {
                let xi: f64 = rng.sample(StandardNormal);
                data.push(T::lit(m + v.sqrt() * xi));
            }
        }
        Tensor::new(vec![labels.len(), self.dim], data)
    }

    /// Draws `n` samples of a single label.
    pub fn sample_label<T: Scalar, R: Rng + ?Sized>(&self, label: usize, n: usize, rng: &mut R) -> Result<Tensor<T>> {
        self.sample_real(&vec![label; n], rng)
    }

    /// Posterior responsibilities over this label's components given `x_t`.
    ///
    /// Returned in the order of [`GaussianMixture::components_for`].
    pub fn responsibilities<T: Scalar>(&self, x_t: &[T], t: T, label: usize) -> Result<Vec<T>> {
        let idx = self.components_for(label)?;
        let s = T::one() - t;
        let half = T::lit(0.5);
        let logits: Vec<T> = idx
            .iter()
            .map(|&k| {
                let c = &self.components[k];
                let mut lp = T::lit(c.weight).ln();
                for ((&x, &m), &v) in x_t.iter().zip(&c.mean).zip(&c.variance) {
                    let var = s * s * T::lit(v) + t * t;
                    let d = x - s * T::lit(m);
                    lp = lp - half * (var.ln() + d * d / var);
                }
                lp
            })
            .collect();
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// `E[x0 | x_t, label]` under `x_t = (1 - t) x0 + t eps`.
    ///
    /// Component `k` diffuses to mean `(1-t) mu_k` and covariance
    /// `(1-t)^2 Sigma_k + t^2 I`; its Gaussian posterior mean is
    /// `mu_k + (1-t) Sigma_k [(1-t)^2 Sigma_k + t^2 I]^{-1} (x_t - (1-t) mu_k)`.
    /// At `t = 0` the input is returned unchanged.
    pub fn analytic_denoise<T: Scalar>(&self, x_t: &Tensor<T>, t: T, labels: &[usize]) -> Result<Tensor<T>> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        x_t.ensure_shape("analytic_denoise", &[labels.len(), self.dim])?;
        if t == T::zero() {
            return Ok(x_t.clone());
        }
        let s = T::one() - t;
        let mut out = Tensor::zeros(x_t.shape());
        for (i, &label) in labels.iter().enumerate() {
            let x = x_t.row(i);
            let resp = self.responsibilities(x, t, label)?;
            let idx = self.components_for(label)?;
            let row = out.row_mut(i);
            for (&k, &r) in idx.iter().zip(&resp) {
                let c = &self.components[k];
                for (d, o) in row.iter_mut().enumerate() {
                    let m = T::lit(c.mean[d]);
                    let v = T::lit(c.variance[d]);
                    let var = s * s * v + t * t;
                    let post = m + s * v / var * (x[d] - s * m);
                    *o = *o + r * post;
                }
            }
        }
        out.ensure_finite("analytic denoiser output")?;
        Ok(out)
    }

    /// Index of the component (over all labels) with the largest
    /// responsibility for the clean point `x`.
    pub fn argmax_component<T: Scalar>(&self, x: &[T]) -> usize {
        let half = T::lit(0.5);
        let mut best = (0, T::neg_infinity());
        for (k, c) in self.components.iter().enumerate() {
            let mut lp = T::lit(c.weight).ln();
            for ((&xv, &m), &v) in x.iter().zip(&c.mean).zip(&c.variance) {
                let var = T::lit(v);
                let d = xv - T::lit(m);
                lp = lp - half * (var.ln() + d * d / var);
            }
            if lp > best.1 {
                best = (k, lp);
            }
        }
        best.0
    }
}

/// A frozen network teacher; remembers the hash of its parameters.
#[derive(Debug, Clone)]
pub struct FrozenTeacher<T> {
    model: Mlp<T>,
    hash: String,
}

impl<T: Scalar> FrozenTeacher<T> {
    pub fn freeze(model: Mlp<T>) -> Self {
        let hash = checkpoint::param_hash(&model);
        Self { model, hash }
    }

    pub fn model(&self) -> &Mlp<T> {
        &self.model
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// True when the parameters still hash to the value recorded at freeze time.
    pub fn is_intact(&self) -> bool {
        checkpoint::param_hash(&self.model) == self.hash
    }
}

/// The real score used by distillation.
#[derive(Debug, Clone)]
pub enum TeacherModel<T> {
    Analytic(GaussianMixture),
    Learned(FrozenTeacher<T>),
}

impl<T: Scalar> TeacherModel<T> {
    /// `x0` prediction at `(x_t, t)`.
    pub fn denoise(&self, x_t: &Tensor<T>, t: T, labels: &[usize]) -> Result<Tensor<T>> {
        match self {
            TeacherModel::Analytic(g) => g.analytic_denoise(x_t, t, labels),
            TeacherModel::Learned(f) => {
                let v = f.model.predict(x_t, t, labels)?;
                solve_to_x0(&v, x_t, t)
            }
        }
    }

    pub fn learned(&self) -> Option<&FrozenTeacher<T>> {
        match self {
            TeacherModel::Learned(f) => Some(f),
            TeacherModel::Analytic(_) => None,
        }
    }
}

/// Flow-matching pretraining settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub mlp: MlpConfig,
    pub steps: usize,
    /// Samples per time slice.
    pub batch: usize,
    /// Independent time draws per optimizer step.
    pub time_slices: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TeacherTrainConfig {
    pub fn standard(data_dim: usize, n_labels: usize) -> Self {
        Self {
            mlp: MlpConfig::standard(data_dim, n_labels),
            steps: 3000,
            batch: 32,
            time_slices: 8,
            adam: AdamConfig::with_lr(1e-3),
            seed: 0,
        }
    }
}

/// A labelled training set.
#[derive(Debug, Clone)]
pub struct LabeledData<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledData<T> {
    /// `n` samples with labels drawn uniformly from the mixture's labels.
    pub fn sample<R: Rng + ?Sized>(gmm: &GaussianMixture, n: usize, rng: &mut R) -> Result<Self> {
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..gmm.n_labels())).collect();
        let x = gmm.sample_real(&labels, rng)?;
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Output of [`train_learned_teacher`].
#[derive(Debug, Clone)]
pub struct TrainedTeacher<T> {
    pub teacher: TeacherModel<T>,
    /// Mean flow-matching loss per optimizer step.
    pub losses: Vec<f64>,
}

/// Minimizes `E || v(x_t, t, c) - (eps - x0) ||^2` over the data and freezes
/// the result.
pub fn train_learned_teacher<T: Scalar, R: Rng + ?Sized>(
    data: &LabeledData<T>,
    config: &TeacherTrainConfig,
    rng: &mut R,
) -> Result<TrainedTeacher<T>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty teacher dataset".into()));
    }
    let dim = data.x.cols();
    let mut model = Mlp::new(config.mlp.clone(), rng)?;
    let mut opt = OptimizerState::new(&model, config.adam);
    let mut losses = Vec::with_capacity(config.steps);
    let slices = config.time_slices.max(1);
    let denom = T::lit((config.batch * slices) as f64);
    for step in 0..config.steps {
        let mut grads = MlpGrads::zeros_like(&model);
        let mut loss = 0.0;
        for _ in 0..slices {
            let idx: Vec<usize> = (0..config.batch).map(|_| rng.gen_range(0..data.len())).collect();
            let x0 = data.x.select_rows(&idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let eps = Tensor::randn(&[config.batch, dim], rng);
            let t = T::lit(rng.gen::<f64>());
            let xt = forward_diffuse(&x0, &eps, t)?;
            let target = eps.sub(&x0)?;
            let cond = model.condition(&labels)?;
            let (pred, cache) = model.forward_cached(&xt, t, &cond)?;
            let resid = pred.sub(&target)?;
            loss += resid.sum_squares().as_f64();
            let up = resid.scale(T::lit(2.0) / denom);
            let (g, _) = model.backward_cached(&cache, &up)?;
            grads.axpy(T::one(), &g)?;
        }
        let loss = loss / (config.batch * slices) as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("teacher loss {loss} at step {step}")));
        }
        losses.push(loss);
        opt.step(&mut model, &grads)
            .map_err(|e| Error::Diverged(format!("teacher step {step}: {e}")))?;
    }
    Ok(TrainedTeacher {
        teacher: TeacherModel::Learned(FrozenTeacher::freeze(model)),
        losses,
    })
}
