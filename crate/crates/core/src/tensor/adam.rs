use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

/// Adam with bias correction. The learning rate is supplied per step so a
/// schedule can drive it.
#[derive(Clone, Debug)]
pub struct Adam<T: Element> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState {
                step: 0,
                first_moment: Vec::new(),
                second_moment: Vec::new(),
            },
        }
    }

    pub fn with_state(config: AdamConfig, state: AdamState<T>) -> Self {
        Adam { config, state }
    }

    /// Replaces every parameter with its updated value. A parameter
    /// without a gradient is treated as having a zero gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if self.state.first_moment.is_empty() && self.state.step == 0 {
            self.state.first_moment = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.state.second_moment = self.state.first_moment.clone();
        }
        if self.state.first_moment.len() != params.len()
            || self.state.second_moment.len() != params.len()
        {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.state.first_moment.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let len = p.numel();
            if self.state.first_moment[i].len() != len || self.state.second_moment[i].len() != len {
                return Err(Error::shape(format!(
                    "optimizer state for parameter {i} has {} values, parameter has {len}",
                    self.state.first_moment[i].len()
                )));
            }
            if let Some(g) = p.grad() {
                if g.len() != len {
                    return Err(Error::shape(format!("gradient for parameter {i} has wrong size")));
                }
            }
        }

        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(lr / correction1);
        let inv_sqrt_c2 = T::from_f64_lossy(1.0 / correction2.sqrt());
        let eps = T::from_f64_lossy(eps);

        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().unwrap_or_else(|| vec![T::zero(); p.numel()]);
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            let updated: Vec<T> = p
                .data()
                .iter()
                .zip(&grad)
                .zip(m.iter_mut().zip(v.iter_mut()))
                .map(|((&w, &g), (m, v))| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    w - step_size * *m / (v.sqrt() * inv_sqrt_c2 + eps)
                })
                .collect();
            **p = Tensor::parameter(p.shape(), updated)?;
        }
        Ok(())
    }
}
