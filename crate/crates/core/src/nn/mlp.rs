//! Conditional multilayer perceptron with a hand-written backward pass.
//!
//! The network input is the concatenation `[x, one_hot(cond), embed(t)]`.
//! Hidden layers use the configured activation; the output layer is linear
//! and predicts a velocity in data space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_shape, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_into, one_hot, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    pub(crate) fn tag(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    pub(crate) fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Silu),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (T::one() + (-z).exp()),
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => {
                let y = z.tanh();
                T::one() - y * y
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-z).exp());
                s * (T::one() + z * (T::one() - s))
            }
        }
    }
}

/// Architecture of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub cond_dim: usize,
    pub time_embed_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    /// Three hidden layers of width 128 with SiLU and an 8-wide time embedding.
    pub fn standard(data_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim: data_dim,
            cond_dim: n_classes,
            time_embed_dim: 8,
            hidden: vec![128, 128, 128],
            output_dim: data_dim,
            activation: Activation::Silu,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.input_dim + self.cond_dim + self.time_embed_dim
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.feature_dim()];
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

/// One affine layer. `weight` is `[fan_in, fan_out]`, `bias` is `[fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    config: MlpConfig,
    layers: Vec<Dense<T>>,
}

/// Activations saved by [`Mlp::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// `inputs[l]` is the input to layer `l`; `inputs[0]` is the assembled
    /// feature matrix.
    inputs: Vec<Tensor<T>>,
    /// Pre-activations of every hidden layer.
    pre_activations: Vec<Tensor<T>>,
}

/// Parameter-shaped gradient (or moment) storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads<T> {
    pub layers: Vec<Dense<T>>,
}

/// Sinusoidal embedding of `t` with `dim` components.
///
/// Pairs `(sin(pi 2^k t), cos(pi 2^k t))`; an odd trailing slot carries `t`.
pub fn time_embedding<T: Scalar>(t: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let mut freq = T::PI();
    let mut freqs = Vec::with_capacity(half);
    for _ in 0..half {
        freqs.push(freq);
        freq = freq + freq;
    }
    out.extend(freqs.iter().map(|&f| (f * t).sin()));
    out.extend(freqs.iter().map(|&f| (f * t).cos()));
    if dim % 2 == 1 {
        out.push(t);
    }
    out
}

impl<T: Scalar> Mlp<T> {
    /// Uniform He-style initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for hidden layers, a tenth of that for the output layer; zero biases.
    pub fn new<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        Self::validate_config(&config)?;
        let widths = config.widths();
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut bound = (6.0 / fan_in as f64).sqrt();
                if l + 1 == n_layers {
                    bound *= 0.1;
                }
                let data = (0..fan_in * fan_out)
                    .map(|_| T::lit(rng.gen_range(-bound..=bound)))
                    .collect();
                Dense {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// All weights and biases zero.
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        Self::validate_config(&config)?;
        let layers = config
            .widths()
            .windows(2)
            .map(|w| Dense {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Assembles a network from explicit layers; `config.hidden` must agree.
    pub fn from_layers(config: MlpConfig, layers: Vec<Dense<T>>) -> Result<Self> {
        Self::validate_config(&config)?;
        let widths = config.widths();
        if layers.len() + 1 != widths.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers given, architecture needs {}",
                layers.len(),
                widths.len() - 1
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            ensure_shape("layer weight", &[widths[l], widths[l + 1]], layer.weight.shape())?;
            ensure_shape("layer bias", &[widths[l + 1]], layer.bias.shape())?;
        }
        Ok(Self { config, layers })
    }

    fn validate_config(config: &MlpConfig) -> Result<()> {
        if config.input_dim == 0 || config.output_dim == 0 {
            return Err(Error::InvalidArgument("input and output dims must be positive".into()));
        }
        if config.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<T>] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.config.activation
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Flat view of every parameter in layer order (weights then bias).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArgument("flat parameter length".into()));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.len();
            l.weight.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    fn assemble_features(&self, x: &Tensor<T>, t: T, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        if x.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "mlp input",
                expected: vec![x.rows(), c.input_dim],
                actual: x.shape().to_vec(),
            });
        }
        let batch = x.rows();
        ensure_shape("mlp input", &[batch, c.input_dim], x.shape())?;
        ensure_shape("mlp condition", &[batch, c.cond_dim], cond.shape())?;
        if !t.is_finite() || t < T::zero() || t > T::one() {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        x.ensure_finite("mlp input")?;
        cond.ensure_finite("mlp condition")?;

        let embed = time_embedding(t, c.time_embed_dim);
        let width = c.feature_dim();
        let mut data = Vec::with_capacity(batch * width);
        for i in 0..batch {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(cond.row(i));
            data.extend_from_slice(&embed);
        }
        Tensor::new(vec![batch, width], data)
    }

    /// Evaluates the network on a batch at a single time `t`.
    pub fn forward(&self, x: &Tensor<T>, t: T, cond: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward_cached(x, t, cond).map(|(y, _)| y)
    }

    pub fn forward_cached(&self, x: &Tensor<T>, t: T, cond: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let features = self.assemble_features(x, t, cond)?;
        let batch = features.rows();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = features;
        for (l, layer) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
            let mut z = vec![T::zero(); batch * fan_out];
            for row in z.chunks_mut(fan_out) {
                row.copy_from_slice(layer.bias.data());
            }
            matmul_into(h.data(), (batch, fan_in), false, layer.weight.data(), (fan_in, fan_out), false, &mut z, true);
            let z = Tensor::new(vec![batch, fan_out], z)?;
            inputs.push(h);
            if l == last {
                h = z;
            } else {
                let act = self.config.activation;
                h = z.map(|v| act.apply(v));
                pre_activations.push(z);
            }
        }
        h.ensure_finite("mlp output")?;
        Ok((h, ForwardCache { inputs, pre_activations }))
    }

    /// Gradients of `sum(upstream * forward(x, t, cond))` with respect to all
    /// parameters and to `x`.
    pub fn backward(&self, x: &Tensor<T>, t: T, cond: &Tensor<T>, upstream: &Tensor<T>) -> Result<(MlpGrads<T>, Tensor<T>)> {
        let (_, cache) = self.forward_cached(x, t, cond)?;
        self.backward_cached(&cache, upstream)
    }

    pub fn backward_cached(&self, cache: &ForwardCache<T>, upstream: &Tensor<T>) -> Result<(MlpGrads<T>, Tensor<T>)> {
        let batch = cache.inputs[0].rows();
        ensure_shape("mlp upstream", &[batch, self.config.output_dim], upstream.shape())?;
        let mut grads: Vec<Dense<T>> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
            let input = &cache.inputs[l];

            let mut dw = vec![T::zero(); fan_in * fan_out];
            matmul_into(input.data(), (batch, fan_in), true, delta.data(), (batch, fan_out), false, &mut dw, false);
            let mut db = vec![T::zero(); fan_out];
            for row in delta.iter_rows() {
                for (acc, &v) in db.iter_mut().zip(row) {
                    *acc = *acc + v;
                }
            }
            grads.push(Dense {
                weight: Tensor::new(vec![fan_in, fan_out], dw)?,
                bias: Tensor::new(vec![fan_out], db)?,
            });

            let mut din = vec![T::zero(); batch * fan_in];
            matmul_into(delta.data(), (batch, fan_out), false, layer.weight.data(), (fan_in, fan_out), true, &mut din, false);
            let mut din = Tensor::new(vec![batch, fan_in], din)?;
            if l > 0 {
                let act = self.config.activation;
                let z = &cache.pre_activations[l - 1];
                for (d, &zv) in din.data_mut().iter_mut().zip(z.data()) {
                    *d = *d * act.derivative(zv);
                }
            }
            delta = din;
        }
        grads.reverse();

        let d = self.config.input_dim;
        let width = self.config.feature_dim();
        let mut input_grad = Vec::with_capacity(batch * d);
        for row in delta.data().chunks(width) {
            input_grad.extend_from_slice(&row[..d]);
        }
        Ok((MlpGrads { layers: grads }, Tensor::new(vec![batch, d], input_grad)?))
    }

    /// Velocity prediction for integer class labels.
    pub fn predict(&self, x: &Tensor<T>, t: T, labels: &[usize]) -> Result<Tensor<T>> {
        let cond = self.condition(labels)?;
        self.forward(x, t, &cond)
    }

    /// One-hot condition matrix sized for this network.
    pub fn condition(&self, labels: &[usize]) -> Result<Tensor<T>> {
        one_hot(labels, self.config.cond_dim)
    }

    /// Parameter-space gradients of `sum(upstream * f(x))`, labels form.
    pub fn param_grads(&self, x: &Tensor<T>, t: T, labels: &[usize], upstream: &Tensor<T>) -> Result<MlpGrads<T>> {
        let cond = self.condition(labels)?;
        self.backward(x, t, &cond, upstream).map(|(g, _)| g)
    }

    /// Converts all parameters to another scalar width.
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> MlpGrads<T> {
    pub fn zeros_like(model: &Mlp<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.scale(s),
                    bias: l.bias.scale(s),
                })
                .collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::InvalidArgument("gradient layer count".into()));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(alpha, &b.weight)?;
            a.bias.axpy(alpha, &b.bias)?;
        }
        Ok(())
    }

    /// `alpha * a + beta * b`.
    pub fn combine(alpha: T, a: &Self, beta: T, b: &Self) -> Result<Self> {
        let mut out = a.scale(alpha);
        out.axpy(beta, b)?;
        Ok(out)
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        let mut acc = T::zero();
        for (a, b) in self.layers.iter().zip(&other.layers) {
            acc = acc + a.weight.dot(&b.weight)? + a.bias.dot(&b.bias)?;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> T {
        self.layers
            .iter()
            .fold(T::zero(), |acc, l| acc + l.weight.sum_squares() + l.bias.sum_squares())
            .sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.layers
            .iter()
            .fold(T::zero(), |acc, l| acc.max(l.weight.max_abs()).max(l.bias.max_abs()))
    }

    /// Path (`layers.{i}.weight` / `layers.{i}.bias`) of the first
    /// non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, l) in self.layers.iter().enumerate() {
            if !l.weight.is_finite() {
                return Some(format!("layers.{i}.weight"));
            }
            if !l.bias.is_finite() {
                return Some(format!("layers.{i}.bias"));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_config(act: Activation) -> MlpConfig {
        MlpConfig {
            input_dim: 2,
            cond_dim: 1,
            time_embed_dim: 2,
            hidden: vec![],
            output_dim: 2,
            activation: act,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut cfg = MlpConfig::standard(2, 4);
        cfg.hidden = vec![16, 16];
        let net = Mlp::<f64>::zeros(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5, 2], &mut rng);
        let y = net.predict(&x, 0.3, &[0, 1, 2, 3, 0]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let cfg = linear_config(Activation::Tanh);
        let mut w = Tensor::<f64>::zeros(&[cfg.feature_dim(), 2]);
        w.data_mut()[0] = 1.0; // x0 -> y0
        w.data_mut()[3] = 1.0; // x1 -> y1
        let net = Mlp::from_layers(
            cfg,
            vec![Dense {
                weight: w,
                bias: Tensor::zeros(&[2]),
            }],
        )
        .unwrap();
        let x = Tensor::from_f64(&[1, 2], &[1.0, -2.0]).unwrap();
        let y = net.predict(&x, 0.7, &[0]).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = MlpConfig::standard(2, 3);
        cfg.hidden = vec![8];
        let net = Mlp::<f64>::new(cfg, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 2], &mut rng);
        let cond = net.condition(&[0, 1, 2, 0]).unwrap();
        let (g, dx) = net.backward(&x, 0.5, &cond, &Tensor::zeros(&[4, 2])).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        assert_eq!(dx.max_abs(), 0.0);
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = linear_config(Activation::Silu);
        let net = Mlp::<f64>::new(cfg.clone(), &mut rng).unwrap();
        let x = Tensor::randn(&[3, 2], &mut rng);
        let up = Tensor::randn(&[3, 2], &mut rng);
        let cond = net.condition(&[0, 0, 0]).unwrap();
        let t = 0.25;
        let (g, _) = net.backward(&x, t, &cond, &up).unwrap();
        let embed = time_embedding(t, 2);
        for i in 0..cfg.feature_dim() {
            for j in 0..2 {
                let expected: f64 = (0..3)
                    .map(|b| {
                        let feat = match i {
                            0 | 1 => x.row(b)[i],
                            2 => 1.0,
                            k => embed[k - 3],
                        };
                        up.row(b)[j] * feat
                    })
                    .sum();
                let got = g.layers[0].weight.data()[i * 2 + j];
                assert!((got - expected).abs() < 1e-12, "{i},{j}: {got} vs {expected}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::<f64>::new(linear_config(Activation::Tanh), &mut rng).unwrap();
        let cond = net.condition(&[0]).unwrap();
        let bad = Tensor::zeros(&[1, 3]);
        assert!(matches!(net.forward(&bad, 0.5, &cond), Err(Error::ShapeMismatch { .. })));
        let nan = Tensor::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(net.forward(&nan, 0.5, &cond), Err(Error::NonFinite(_))));
        let ok = Tensor::zeros(&[1, 2]);
        assert!(net.forward(&ok, 1.5, &cond).is_err());
        assert!(net.backward(&ok, 0.5, &cond, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(0.5f64, 5);
        assert_eq!(e.len(), 5);
        assert!((e[0] - (std::f64::consts::PI * 0.5).sin()).abs() < 1e-15);
        assert!((e[2] - (std::f64::consts::PI * 0.5).cos()).abs() < 1e-15);
        assert_eq!(e[4], 0.5);
    }
}
