//! Central finite-difference checks for the reverse-mode gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Element, Tensor};

#[derive(Copy, Clone, Debug)]
pub struct GradCheckOptions {
    /// Step is `relative_step * max(|x|, 1)`.
    pub relative_step: f64,
    /// Gradients smaller than this are compared on an absolute scale.
    pub magnitude_floor: f64,
    /// Coordinates probed per parameter tensor; `None` probes all.
    pub coords_per_param: Option<usize>,
    /// When set, a coordinate is only judged once two central differences
    /// with steps `h` and `h/2` agree within this relative error; otherwise
    /// the step is halved again. Disagreement means the step crossed a
    /// kink (a ReLU hinge or a max switch). After a few halvings the
    /// coordinate is skipped rather than judged.
    pub consistency: Option<f64>,
}

impl GradCheckOptions {
    pub fn for_f32() -> Self {
        GradCheckOptions {
            relative_step: 1e-2,
            magnitude_floor: 1e-1,
            coords_per_param: None,
            consistency: Some(1e-3),
        }
    }

    pub fn for_f64() -> Self {
        GradCheckOptions {
            relative_step: 1e-5,
            magnitude_floor: 1e-4,
            coords_per_param: None,
            consistency: Some(1e-6),
        }
    }

    pub fn sampled(mut self, coords: usize) -> Self {
        self.coords_per_param = Some(coords);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates skipped by the consistency guard.
    pub skipped: usize,
    /// `(parameter index, coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    /// Worst error under `tolerance`, and at most one coordinate in five
    /// skipped as non-smooth.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_relative_error < tolerance && skip_ratio_ok(self.checked, self.skipped)
    }
}

const HALVINGS: u32 = 3;

pub fn skip_ratio_ok(checked: usize, skipped: usize) -> bool {
    skipped * 5 <= checked + skipped
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the backward-pass gradient of `loss_fn` w.r.t. each tensor in
/// `params` with central differences of the forward pass alone.
///
/// The tensors are taken as plain values; they are re-wrapped as trainable
/// leaves for the analytic pass and as constants for the numeric pass.
pub fn check_gradients<T, F, R>(
    params: &[Tensor<T>],
    loss_fn: F,
    options: GradCheckOptions,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
    R: Rng,
{
    let leaves: Vec<Tensor<T>> = params
        .iter()
        .map(|p| Tensor::parameter(p.shape(), p.data().to_vec()))
        .collect::<Result<_>>()?;
    let loss = loss_fn(&leaves)?;
    loss.backward()?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    let evaluate = |values: &[Tensor<T>]| -> Result<f64> { Ok(loss_fn(values)?.item()?.as_f64()) };

    for (pi, leaf) in leaves.iter().enumerate() {
        // No gradient means the loss does not depend on this tensor.
        let analytic = leaf.grad().unwrap_or_else(|| vec![T::zero(); leaf.numel()]);
        let coords: Vec<usize> = match options.coords_per_param {
            Some(k) if k < leaf.numel() => sample(rng, leaf.numel(), k).into_vec(),
            _ => (0..leaf.numel()).collect(),
        };
        for idx in coords {
            let x = leaf.data()[idx].as_f64();
            let central = |h: f64| -> Result<f64> {
                let at = |delta: f64| -> Result<f64> {
                    let mut values: Vec<Tensor<T>> = leaves.iter().map(Tensor::detach).collect();
                    let mut data = values[pi].data().to_vec();
                    data[idx] = T::from_f64_lossy(x + delta);
                    values[pi] = Tensor::new(leaf.shape(), data)?;
                    evaluate(&values)
                };
                // Divide by the step actually representable in T.
                let plus = T::from_f64_lossy(x + h).as_f64();
                let minus = T::from_f64_lossy(x - h).as_f64();
                Ok((at(h)? - at(-h)?) / (plus - minus))
            };
            let h = options.relative_step * x.abs().max(1.0);
            let mut numeric = central(h)?;
            if let Some(limit) = options.consistency {
                // Halve the step until two successive estimates agree.
                let mut agreed = false;
                for k in 1..=HALVINGS {
                    let finer = central(h / f64::from(1u32 << k))?;
                    if relative_error(numeric, finer, options.magnitude_floor) <= limit {
                        agreed = true;
                        break;
                    }
                    numeric = finer;
                }
                if !agreed {
                    report.skipped += 1;
                    continue;
                }
            }
            let a = analytic[idx].as_f64();
            let err = relative_error(a, numeric, options.magnitude_floor);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((pi, idx, a, numeric));
            }
        }
    }
    Ok(report)
}
