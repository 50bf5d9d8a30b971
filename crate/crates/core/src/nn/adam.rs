use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::mlp::{Mlp, MlpGrads};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

/// Adam moments for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    first_moment: MlpGrads<T>,
    second_moment: MlpGrads<T>,
    step_count: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(model: &Mlp<T>, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: MlpGrads::zeros_like(model),
            second_moment: MlpGrads::zeros_like(model),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &MlpGrads<T> {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &MlpGrads<T> {
        &self.second_moment
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// Non-finite gradients reject the whole step before anything is touched.
    pub fn step(&mut self, model: &mut Mlp<T>, grads: &MlpGrads<T>) -> Result<()> {
        if let Some(path) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient {path}")));
        }
        if grads.layers.len() != model.layers().len() {
            return Err(Error::InvalidArgument("gradient layer count".into()));
        }
        for (g, p) in grads.layers.iter().zip(model.layers()) {
            p.weight.ensure_shape("adam weight", g.weight.shape())?;
            p.bias.ensure_shape("adam bias", g.bias.shape())?;
        }

        self.step_count += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        let bc1 = T::one() - b1.powi(self.step_count as i32);
        let bc2 = T::one() - b2.powi(self.step_count as i32);

        let update = |p: &mut [T], g: &[T], m: &mut [T], v: &mut [T]| {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        };
        for (((layer, g), m), v) in model
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first_moment.layers)
            .zip(&mut self.second_moment.layers)
        {
            update(layer.weight.data_mut(), g.weight.data(), m.weight.data_mut(), v.weight.data_mut());
            update(layer.bias.data_mut(), g.bias.data(), m.bias.data_mut(), v.bias.data_mut());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::{Activation, Dense, MlpConfig};
    use crate::tensor::Tensor;

    fn scalar_model(value: f64) -> Mlp<f64> {
        let cfg = MlpConfig {
            input_dim: 1,
            cond_dim: 0,
            time_embed_dim: 0,
            hidden: vec![],
            output_dim: 1,
            activation: Activation::Tanh,
        };
        Mlp::from_layers(
            cfg,
            vec![Dense {
                weight: Tensor::from_f64(&[1, 1], &[value]).unwrap(),
                bias: Tensor::zeros(&[1]),
            }],
        )
        .unwrap()
    }

    fn grads_of(w: f64, b: f64) -> MlpGrads<f64> {
        MlpGrads {
            layers: vec![Dense {
                weight: Tensor::from_f64(&[1, 1], &[w]).unwrap(),
                bias: Tensor::from_f64(&[1], &[b]).unwrap(),
            }],
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = scalar_model(0.7);
        let mut opt = OptimizerState::new(&m, AdamConfig::with_lr(1e-2));
        opt.step(&mut m, &grads_of(0.0, 0.0)).unwrap();
        assert_eq!(m.flat_params(), vec![0.7, 0.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut m = scalar_model(0.0);
        let lr = 1e-3;
        let mut opt = OptimizerState::new(&m, AdamConfig::with_lr(lr));
        opt.step(&mut m, &grads_of(1.0, 0.0)).unwrap();
        let moved = -m.flat_params()[0];
        assert!((moved - lr).abs() < 1e-6 * lr.max(1.0));
        assert!((moved - lr / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut m = scalar_model(0.5);
        let mut opt = OptimizerState::new(&m, AdamConfig::with_lr(1e-2));
        let err = opt.step(&mut m, &grads_of(0.0, f64::INFINITY)).unwrap_err();
        assert!(err.to_string().contains("layers.0.bias"), "{err}");
        assert_eq!(opt.step_count(), 0);
        assert_eq!(m.flat_params(), vec![0.5, 0.0]);
    }
}
