use serde::{Deserialize, Serialize};

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    /// Segmenter training rate.
    pub const SEGMENTER_LR: f64 = 1e-4;
    /// Translation GAN training rate.
    pub const GAN_LR: f64 = 2e-4;

    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn segmenter() -> Self {
        Self::with_lr(Self::SEGMENTER_LR)
    }

    /// GAN default; the lower first-moment decay is the usual choice for
    /// adversarial training.
    pub fn gan() -> Self {
        Self {
            lr: Self::GAN_LR,
            beta1: 0.5,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn for_params(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            state: AdamState::for_params(params),
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        let st = &mut self.state;
        if params.len() != grads.len() || params.len() != st.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                st.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != st.m[i].shape() {
                return Err(Error::Shape(format!(
                    "adam: tensor {i} has param {:?}, grad {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    st.m[i].shape()
                )));
            }
        }
        st.step += 1;
        let c = &self.config;
        let t = st.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.epsilon));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = st.m[i].data_mut();
            let v = st.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv * inv_bc1;
                let v_hat = *vv * inv_bc2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::<f32>::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut adam = Adam::new(AdamConfig::segmenter(), &params);
        adam.step(&mut params, &[Tensor::zeros([3])]).unwrap();
        assert_eq!(params, before);
        assert_eq!(adam.state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let lr = AdamConfig::GAN_LR;
        let mut params = vec![Tensor::<f64>::zeros([4])];
        let grads = vec![Tensor::new([4], vec![3.0, -0.01, 250.0, -7.5]).unwrap()];
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &params);
        adam.step(&mut params, &grads).unwrap();
        for (p, g) in params[0].data().iter().zip(grads[0].data()) {
            assert!((p + lr * g.signum()).abs() < 1e-6 * lr.max(1.0));
            assert!((p.abs() - lr).abs() / lr < 1e-5);
        }
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut params = vec![Tensor::<f32>::ones([2])];
        let grads = vec![Tensor::ones([2])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        for expected in 1..=3 {
            adam.step(&mut params, &grads).unwrap();
            assert_eq!(adam.state.step, expected);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::<f32>::ones([2])];
        let mut adam = Adam::new(AdamConfig::default(), &params);
        assert!(adam.step(&mut params, &[Tensor::ones([3])]).is_err());
        assert!(adam.step(&mut params, &[]).is_err());
    }

    #[test]
    fn learning_rate_defaults() {
        assert_eq!(AdamConfig::segmenter().lr, 0.0001);
        assert_eq!(AdamConfig::gan().lr, 0.0002);
    }
}
