//! Adversarial, cycle-consistency and segmentation objectives, built on a
//! [`Graph`] so each one is differentiable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;
/// Default weight of the cycle term in the generator objective.
pub const DEFAULT_LAMBDA_CYCLE: f64 = 10.0;

fn neg_log_clamped<T: Element>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let l = g.log(p)?;
    g.scale(l, -1.0)
}

fn one_minus<T: Element>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let n = g.scale(p, -1.0)?;
    g.add_scalar(n, 1.0)
}

/// `mean(−log d_real) + mean(−log(1 − d_fake))` over "real" probabilities.
pub fn discriminator_loss<T: Element>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = neg_log_clamped(g, d_real)?;
    let real = g.mean(real)?;
    let not_fake = one_minus(g, d_fake)?;
    let fake = neg_log_clamped(g, not_fake)?;
    let fake = g.mean(fake)?;
    g.add(real, fake)
}

/// Non-saturating generator loss `mean(−log d_fake)`.
pub fn generator_adv_loss<T: Element>(g: &mut Graph<T>, d_fake: Var) -> Result<Var> {
    let l = neg_log_clamped(g, d_fake)?;
    g.mean(l)
}

/// `mean|x_s − x_s_rec| + mean|x_t − x_t_rec|`.
pub fn cycle_loss<T: Element>(
    g: &mut Graph<T>,
    x_s: Var,
    x_s_rec: Var,
    x_t: Var,
    x_t_rec: Var,
) -> Result<Var> {
    let a = g.l1_distance(x_s, x_s_rec)?;
    let b = g.l1_distance(x_t, x_t_rec)?;
    g.add(a, b)
}

/// `adv_st + adv_ts + lambda_cycle · cycle`.
pub fn total_generator_objective<T: Element>(
    g: &mut Graph<T>,
    adv_st: Var,
    adv_ts: Var,
    cycle: Var,
    lambda_cycle: f64,
) -> Result<Var> {
    check_lambda(lambda_cycle)?;
    let adv = g.add(adv_st, adv_ts)?;
    let cyc = g.scale(cycle, lambda_cycle)?;
    g.add(adv, cyc)
}

fn check_lambda(lambda_cycle: f64) -> Result<()> {
    if lambda_cycle >= 0.0 && lambda_cycle.is_finite() {
        Ok(())
    } else {
        Err(Error::Param(format!(
            "lambda_cycle must be finite and >= 0, got {lambda_cycle}"
        )))
    }
}

/// Outcome of [`segmentation_loss`] besides the loss node itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegLossInfo {
    /// Pixels that contributed to the mean.
    pub counted: usize,
    /// Set when every pixel was ignored and the loss was defined as 0.
    pub empty: bool,
}

/// Mean per-pixel cross-entropy of `N×C×H×W` logits against `N·H·W` labels.
pub fn segmentation_loss<T: Element>(
    g: &mut Graph<T>,
    logits: Var,
    labels: &[usize],
    ignore_index: Option<usize>,
) -> Result<(Var, SegLossInfo)> {
    let (loss, counted) = g.cross_entropy(logits, labels, ignore_index)?;
    Ok((
        loss,
        SegLossInfo {
            counted,
            empty: counted == 0,
        },
    ))
}

/// Scalar values of the GAN objective terms for one update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GanLossTerms {
    pub d_loss_real: f64,
    pub d_loss_fake: f64,
    /// Adversarial loss of the source→target generator.
    pub g_adv_st: f64,
    /// Adversarial loss of the target→source generator.
    pub g_adv_ts: f64,
    pub cycle_loss: f64,
    pub g_total: f64,
}

impl GanLossTerms {
    pub fn g_adv_loss(&self) -> f64 {
        self.g_adv_st + self.g_adv_ts
    }

    /// Recomputes the generator total from its components.
    pub fn recompute_total(&self, lambda_cycle: f64) -> f64 {
        self.g_adv_st + self.g_adv_ts + lambda_cycle * self.cycle_loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn probs(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.constant(Tensor::new([v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn discriminator_loss_at_equilibrium_is_two_ln_two() {
        let mut g = Graph::new();
        let r = probs(&mut g, &[0.5, 0.5]);
        let f = probs(&mut g, &[0.5, 0.5]);
        let l = discriminator_loss(&mut g, r, f).unwrap();
        assert!((g.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_discriminator_has_near_zero_loss() {
        let mut g = Graph::new();
        let r = probs(&mut g, &[1.0]);
        let f = probs(&mut g, &[0.0]);
        let l = discriminator_loss(&mut g, r, f).unwrap();
        let v = g.value(l).item();
        assert!((0.0..1e-6).contains(&v), "{v}");
    }

    #[test]
    fn generator_loss_is_decreasing() {
        let mut g = Graph::new();
        let vals: Vec<f64> = [0.1, 0.5, 0.9, 1.0]
            .iter()
            .map(|&p| {
                let v = probs(&mut g, &[p]);
                let l = generator_adv_loss(&mut g, v).unwrap();
                g.value(l).item()
            })
            .collect();
        assert!((vals[1] - 2f64.ln()).abs() < 1e-12);
        assert!(vals.windows(2).all(|w| w[0] > w[1]));
        assert!(vals[3] < 1e-6);
    }

    #[test]
    fn cycle_loss_unit_shift() {
        let mut g = Graph::new();
        let xs = Tensor::from_fn([1, 3, 2, 2], |i| i as f64 * 0.1);
        let xt = Tensor::from_fn([1, 3, 2, 2], |i| -(i as f64));
        let a = g.constant(xs.clone());
        let a_rec = g.constant(xs.map(|v| v + 1.0));
        let b = g.constant(xt.clone());
        let b_rec = g.constant(xt);
        let l = cycle_loss(&mut g, a, a_rec, b, b_rec).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let swapped = cycle_loss(&mut g, b, b_rec, a, a_rec).unwrap();
        assert_eq!(g.value(l).item(), g.value(swapped).item());
    }

    #[test]
    fn total_objective_arithmetic() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::<f64>::scalar(0.7));
        let b = g.constant(Tensor::scalar(0.7));
        let c = g.constant(Tensor::scalar(0.5));
        let t = total_generator_objective(&mut g, a, b, c, 10.0).unwrap();
        assert!((g.value(t).item() - 6.4).abs() < 1e-12);
        let t0 = total_generator_objective(&mut g, a, b, c, 0.0).unwrap();
        assert!((g.value(t0).item() - 1.4).abs() < 1e-12);
        assert!(total_generator_objective(&mut g, a, b, c, -1.0).is_err());
    }

    #[test]
    fn segmentation_loss_uniform_and_ignored() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros([1, 6, 2, 2]));
        let (l, info) = segmentation_loss(&mut g, logits, &[0, 1, 5, 3], None).unwrap();
        assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);
        assert_eq!(info.counted, 4);
        let (l, info) = segmentation_loss(&mut g, logits, &[9; 4], Some(9)).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(info.empty);
    }
}
