use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::invalid(format!("adam lr must be > 0, got {}", config.lr)));
        }
        Ok(AdamState {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }

    /// Applies one update in place. A non-finite gradient aborts the whole
    /// step before any parameter or moment is touched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite("adam_step gradient"));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shape = p.shape().to_vec();
            let mut data = std::mem::replace(p, Tensor::scalar(0.0)).into_data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            *p = Tensor::new(&shape, data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut params = vec![t(&[1.0, -2.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
        adam.step(&mut params, &[t(&[1.0, 1.0])]).unwrap();
        let m_before = adam.first_moment(0).to_vec();
        let p_before = params[0].clone();
        adam.step(&mut params, &[t(&[0.0, 0.0])]).unwrap();
        for (a, b) in adam.first_moment(0).iter().zip(&m_before) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        // m is nonzero so params still move; from a fresh state they must not.
        let mut fresh = vec![p_before.clone()];
        let mut adam2 = AdamState::new(AdamConfig::default(), &fresh).unwrap();
        adam2.step(&mut fresh, &[t(&[0.0, 0.0])]).unwrap();
        assert_eq!(fresh[0], p_before);
        assert_eq!(adam2.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // m_hat = g, v_hat = g^2 after one step, so delta = -lr * g / (|g| + eps).
        let cfg = AdamConfig { lr: 0.01, eps: 1e-3, ..AdamConfig::default() };
        let g = [0.5, -2.0, 1e-4];
        let mut params = vec![t(&[0.0, 0.0, 0.0])];
        let mut adam = AdamState::new(cfg, &params).unwrap();
        adam.step(&mut params, &[t(&g)]).unwrap();
        for (p, gv) in params[0].data().iter().zip(g) {
            let expect = -0.01 * gv / (gv.abs() + 1e-3);
            assert!((p - expect).abs() < 1e-15, "{p} vs {expect}");
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let cfg = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut params = vec![t(&[3.0])];
        let mut adam = AdamState::new(cfg, &params).unwrap();
        let mut last = 3.0;
        let mut delta = 0.0;
        for _ in 0..2000 {
            adam.step(&mut params, &[t(&[0.7])]).unwrap();
            delta = params[0].item() - last;
            last = params[0].item();
        }
        // m_hat -> g and v_hat -> g^2, so |delta| -> lr * g / (g + eps).
        assert!((delta.abs() - 0.05).abs() < 1e-6, "delta {delta}");
        assert!(delta < 0.0);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = vec![t(&[1.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
        let err = adam.step(&mut params, &[t(&[f64::NAN])]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(params[0].item(), 1.0);
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = vec![t(&[1.0, 2.0])];
        let mut adam = AdamState::new(AdamConfig::default(), &params).unwrap();
        assert!(adam.step(&mut params, &[t(&[1.0])]).is_err());
        assert!(AdamState::new(AdamConfig { lr: 0.0, ..AdamConfig::default() }, &params).is_err());
    }
}
