//! Training objective: `λ·L1 + (1 − λ)·(1 − SSIM)`.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Gaussian-window SSIM parameters for signals on the `[0, 1]` range.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            c1: (0.01f64 * 1.0).powi(2),
            c2: (0.03f64 * 1.0).powi(2),
        }
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let center = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - center;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l1: f64,
    pub ssim_loss: f64,
    pub total: f64,
    pub epoch: usize,
    pub step: u64,
}

fn same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: prediction {} vs target {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape(pred, target, "l1 loss")?;
    Ok(pred.sub(target)?.abs().mean())
}

/// Mean local SSIM over all valid window positions, channels and batch items.
pub fn ssim<T: Element>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    same_shape(x, y, "ssim")?;
    let s = x.shape();
    if cfg.window == 0 || cfg.window > s.h || cfg.window > s.w {
        return Err(Error::shape(format!(
            "ssim window {} larger than image {}x{}",
            cfg.window, s.h, s.w
        )));
    }
    let taps: Vec<T> = cfg.taps().into_iter().map(T::from_f64_lossy).collect();
    let blur = |t: &Tensor<T>| t.separable_filter(&taps);
    let two = T::from_f64_lossy(2.0);
    let c1 = T::from_f64_lossy(cfg.c1);
    let c2 = T::from_f64_lossy(cfg.c2);

    let mu_x = blur(x)?;
    let mu_y = blur(y)?;
    let mu_xx = mu_x.square();
    let mu_yy = mu_y.square();
    let mu_xy = mu_x.mul(&mu_y)?;
    let var_x = blur(&x.square())?.sub(&mu_xx)?;
    let var_y = blur(&y.square())?.sub(&mu_yy)?;
    let cov = blur(&x.mul(y)?)?.sub(&mu_xy)?;

    let luminance_num = mu_xy.mul_scalar(two).add_scalar(c1);
    let structure_num = cov.mul_scalar(two).add_scalar(c2);
    let luminance_den = mu_xx.add(&mu_yy)?.add_scalar(c1);
    let structure_den = var_x.add(&var_y)?.add_scalar(c2);
    let map = luminance_num
        .mul(&structure_num)?
        .div(&luminance_den.mul(&structure_den)?)?;
    Ok(map.mean())
}

pub fn ssim_loss<T: Element>(x: &Tensor<T>, y: &Tensor<T>, cfg: &SsimConfig) -> Result<Tensor<T>> {
    Ok(ssim(x, y, cfg)?.mul_scalar(-T::one()).add_scalar(T::one()))
}

/// The weighted objective as a differentiable scalar plus its parts.
pub fn total_loss<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    lambda: f64,
    cfg: &SsimConfig,
) -> Result<(Tensor<T>, LossReport)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    let l1 = l1_loss(pred, target)?;
    let structural = ssim_loss(pred, target, cfg)?;
    let total = l1
        .mul_scalar(T::from_f64_lossy(lambda))
        .add(&structural.mul_scalar(T::from_f64_lossy(1.0 - lambda)))?;
    let (l1_value, ssim_value) = (l1.item()?.as_f64(), structural.item()?.as_f64());
    let report = LossReport {
        l1: l1_value,
        ssim_loss: ssim_value,
        total: combine(lambda, l1_value, ssim_value),
        epoch: 0,
        step: 0,
    };
    Ok((total, report))
}

/// `λ·l1 + (1 − λ)·ssim_loss` in f64.
pub fn combine(lambda: f64, l1: f64, ssim_loss: f64) -> f64 {
    lambda * l1 + (1.0 - lambda) * ssim_loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn pattern(shape: Shape, seed: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |n, c, h, w| {
            (((n * 7 + c * 13 + h * 31 + w * 17 + seed * 5) % 23) as f64) / 22.0
        })
    }

    #[test]
    fn taps_are_normalized_and_symmetric() {
        let taps = SsimConfig::default().taps();
        assert_eq!(taps.len(), 11);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(taps[0], taps[10]);
        assert!(taps[5] > taps[4]);
    }

    #[test]
    fn l1_values() {
        let s = Shape::new(1, 3, 4, 4);
        let gt = pattern(s, 0);
        assert_eq!(l1_loss(&gt, &gt).unwrap().item().unwrap(), 0.0);
        let shifted = gt.add_scalar(0.5);
        assert!((l1_loss(&shifted, &gt).unwrap().item().unwrap() - 0.5).abs() < 1e-12);
        assert!(l1_loss(&gt, &pattern(Shape::new(1, 3, 4, 5), 0)).is_err());
    }

    #[test]
    fn ssim_identities() {
        let cfg = SsimConfig::default();
        let x = pattern(Shape::new(2, 3, 16, 16), 1);
        assert!((ssim(&x, &x, &cfg).unwrap().item().unwrap() - 1.0).abs() < 1e-6);
        let gray = Tensor::<f64>::full(Shape::new(1, 3, 12, 12), 0.5);
        assert!((ssim(&gray, &gray, &cfg).unwrap().item().unwrap() - 1.0).abs() < 1e-12);
        assert!(ssim_loss(&x, &x, &cfg).unwrap().item().unwrap().abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let cfg = SsimConfig::default();
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 10, 20));
        assert!(matches!(ssim(&x, &x, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_boundaries() {
        let cfg = SsimConfig::default();
        let gt = pattern(Shape::new(1, 3, 16, 16), 2);
        let pred = pattern(Shape::new(1, 3, 16, 16), 5);
        let (t1, r1) = total_loss(&pred, &gt, 1.0, &cfg).unwrap();
        assert_eq!(t1.item().unwrap(), r1.l1);
        let (t0, r0) = total_loss(&pred, &gt, 0.0, &cfg).unwrap();
        assert_eq!(t0.item().unwrap(), r0.ssim_loss);
        assert!((combine(0.2, 0.5, 0.25) - 0.3).abs() < 1e-15);
        assert!(total_loss(&pred, &gt, 1.5, &cfg).is_err());
    }
}
