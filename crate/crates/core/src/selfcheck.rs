//! Built-in correctness checks: finite-difference gradient checks for every
//! differentiable op and the whole network, plus attention invariants.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{check_gradients, skip_ratio_ok, GradCheckOptions};
use crate::loss::{l1_loss, ssim_loss, SsimConfig};
use crate::network::{channel_attention, spatial_attention, Ablation, FusionNetwork};
use crate::tensor::{
    concat_channels, conv2d, softmax_over_set, split_channels, ConvWeights, Element, Padding, PoolMode, Shape,
    Tensor,
};

pub type LossFn<T> = Box<dyn Fn(&[Tensor<T>]) -> Result<Tensor<T>>>;

/// One randomized gradient-check problem: inputs plus a scalar loss.
pub struct Instance<T: Element> {
    pub inputs: Vec<Tensor<T>>,
    pub loss: LossFn<T>,
}

/// A differentiable op and a generator of random instances for it.
pub struct OpCase<T: Element> {
    pub name: &'static str,
    /// The loss is at most quadratic in every single input coordinate, so
    /// central differences are exact at any step and a large one can be
    /// used to keep rounding noise down.
    pub quadratic: bool,
    pub make: fn(&mut ChaCha8Rng) -> Instance<T>,
}

fn uniform<T: Element>(rng: &mut ChaCha8Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<T> {
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.gen_range(lo..hi)))
        .collect();
    Tensor::new(shape, data).expect("sized to shape")
}

/// Uniform in `±[margin, hi)`, keeping clear of kinks at zero.
fn away_from_zero<T: Element>(rng: &mut ChaCha8Rng, shape: Shape, margin: f64, hi: f64) -> Tensor<T> {
    let data = (0..shape.numel())
        .map(|_| {
            let v = rng.gen_range(margin..hi);
            T::from_f64_lossy(if rng.gen_bool(0.5) { v } else { -v })
        })
        .collect();
    Tensor::new(shape, data).expect("sized to shape")
}

/// Distinct values per pixel across channels, so channel max has no ties.
fn spread_channels<T: Element>(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<T> {
    let mut data = vec![T::zero(); shape.numel()];
    for n in 0..shape.n {
        for y in 0..shape.h {
            for x in 0..shape.w {
                let base = rng.gen_range(-1.0..1.0);
                let mut order: Vec<usize> = (0..shape.c).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                for (rank, &c) in order.iter().enumerate() {
                    data[shape.index(n, c, y, x)] = T::from_f64_lossy(base + 0.1 * rank as f64);
                }
            }
        }
    }
    Tensor::new(shape, data).expect("sized to shape")
}

fn small_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4))
}

/// `sum(y · w)` for a fixed random `w`, so every output element gets a
/// distinct upstream gradient.
fn weighted_sum<T: Element>(y: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(y.mul(w)?.sum())
}

fn unary<T: Element>(
    rng: &mut ChaCha8Rng,
    x: Tensor<T>,
    out_shape: Shape,
    f: fn(&Tensor<T>) -> Result<Tensor<T>>,
) -> Instance<T> {
    let w = uniform(rng, out_shape, -1.0, 1.0);
    Instance {
        inputs: vec![x],
        loss: Box::new(move |p| weighted_sum(&f(&p[0])?, &w)),
    }
}

fn binary<T: Element>(
    rng: &mut ChaCha8Rng,
    a: Tensor<T>,
    b: Tensor<T>,
    out_shape: Shape,
    f: fn(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
) -> Instance<T> {
    let w = uniform(rng, out_shape, -1.0, 1.0);
    Instance {
        inputs: vec![a, b],
        loss: Box::new(move |p| weighted_sum(&f(&p[0], &p[1])?, &w)),
    }
}

/// A broadcast partner for `s`: same shape, per-channel or per-pixel.
fn broadcast_shape(rng: &mut ChaCha8Rng, s: Shape) -> Shape {
    match rng.gen_range(0..3) {
        0 => s,
        1 => Shape::new(s.n, s.c, 1, 1),
        _ => Shape::new(s.n, 1, s.h, s.w),
    }
}

pub fn op_cases<T: Element>() -> Vec<OpCase<T>> {
    vec![
        OpCase {
            name: "add",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let bs = broadcast_shape(rng, s);
                let (a, b) = (uniform(rng, s, -1.0, 1.0), uniform(rng, bs, -1.0, 1.0));
                binary(rng, a, b, s, |a, b| a.add(b))
            },
        },
        OpCase {
            name: "sub",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let bs = broadcast_shape(rng, s);
                let (a, b) = (uniform(rng, bs, -1.0, 1.0), uniform(rng, s, -1.0, 1.0));
                binary(rng, a, b, s, |a, b| a.sub(b))
            },
        },
        OpCase {
            name: "mul",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let bs = broadcast_shape(rng, s);
                let (a, b) = (uniform(rng, s, -1.0, 1.0), uniform(rng, bs, -1.0, 1.0));
                binary(rng, a, b, s, |a, b| a.mul(b))
            },
        },
        OpCase {
            name: "div",
            quadratic: false,
            make: |rng| {
                let s = small_shape(rng);
                let a = uniform(rng, s, -1.0, 1.0);
                let bs = broadcast_shape(rng, s);
                let b = uniform(rng, bs, 1.0, 2.0);
                binary(rng, a, b, s, |a, b| a.div(b))
            },
        },
        OpCase {
            name: "add_scalar",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -1.0, 1.0);
                unary(rng, x, s, |x| Ok(x.add_scalar(T::from_f64_lossy(0.7))))
            },
        },
        OpCase {
            name: "mul_scalar",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -1.0, 1.0);
                unary(rng, x, s, |x| Ok(x.mul_scalar(T::from_f64_lossy(-1.3))))
            },
        },
        OpCase {
            name: "square",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -1.0, 1.0);
                unary(rng, x, s, |x| Ok(x.square()))
            },
        },
        OpCase {
            name: "abs",
            quadratic: false,
            make: |rng| {
                let s = small_shape(rng);
                let x = away_from_zero(rng, s, 0.05, 1.0);
                unary(rng, x, s, |x| Ok(x.abs()))
            },
        },
        OpCase {
            name: "leaky_relu",
            quadratic: false,
            make: |rng| {
                let s = small_shape(rng);
                let x = away_from_zero(rng, s, 0.05, 1.0);
                unary(rng, x, s, |x| Ok(x.leaky_relu(T::from_f64_lossy(0.01))))
            },
        },
        OpCase {
            name: "sigmoid",
            quadratic: false,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -4.0, 4.0);
                unary(rng, x, s, |x| Ok(x.sigmoid()))
            },
        },
        OpCase {
            name: "mean",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -1.0, 1.0);
                unary(rng, x, Shape::scalar(), |x| Ok(x.mean()))
            },
        },
        OpCase {
            name: "sum",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -1.0, 1.0);
                unary(rng, x, Shape::scalar(), |x| Ok(x.sum()))
            },
        },
        OpCase {
            name: "global_avg_pool",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -1.0, 1.0);
                unary(rng, x, Shape::new(s.n, s.c, 1, 1), |x| Ok(x.global_avg_pool()))
            },
        },
        OpCase {
            name: "channel_pool_avg",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let x = uniform(rng, s, -1.0, 1.0);
                unary(rng, x, Shape::new(s.n, 1, s.h, s.w), |x| Ok(x.channel_pool(PoolMode::Avg)))
            },
        },
        OpCase {
            name: "channel_pool_max",
            quadratic: false,
            make: |rng| {
                let s = small_shape(rng);
                let x = spread_channels(rng, s);
                unary(rng, x, Shape::new(s.n, 1, s.h, s.w), |x| Ok(x.channel_pool(PoolMode::Max)))
            },
        },
        OpCase {
            name: "separable_filter",
            quadratic: true,
            make: |rng| {
                let s = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(5..=8), rng.gen_range(5..=8));
                let x = uniform(rng, s, -1.0, 1.0);
                let out = Shape::new(s.n, s.c, s.h - 4, s.w - 4);
                unary(rng, x, out, |x| x.separable_filter(&[0.1, 0.2, 0.4, 0.2, 0.1].map(T::from_f64_lossy)))
            },
        },
        OpCase {
            name: "softmax_over_set",
            quadratic: false,
            make: |rng| {
                let s = small_shape(rng);
                let k = rng.gen_range(2..=3);
                let inputs: Vec<Tensor<T>> = (0..k).map(|_| uniform(rng, s, -2.0, 2.0)).collect();
                let ws: Vec<Tensor<T>> = (0..k).map(|_| uniform(rng, s, -1.0, 1.0)).collect();
                Instance {
                    inputs,
                    loss: Box::new(move |p| {
                        let parts = softmax_over_set(p)?
                            .iter()
                            .zip(&ws)
                            .map(|(m, w)| weighted_sum(m, w))
                            .collect::<Result<Vec<_>>>()?;
                        parts[1..].iter().try_fold(parts[0].clone(), |acc, t| acc.add(t))
                    }),
                }
            },
        },
        OpCase {
            name: "concat_channels",
            quadratic: true,
            make: |rng| {
                let s = small_shape(rng);
                let c2 = rng.gen_range(1..=3);
                let a = uniform(rng, s, -1.0, 1.0);
                let b = uniform(rng, Shape::new(s.n, c2, s.h, s.w), -1.0, 1.0);
                let out = Shape::new(s.n, s.c + c2, s.h, s.w);
                binary(rng, a, b, out, |a, b| concat_channels(&[a.clone(), b.clone()]))
            },
        },
        OpCase {
            name: "split_channels",
            quadratic: true,
            make: |rng| {
                let s = Shape::new(rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(1..=4), rng.gen_range(1..=4));
                let first = rng.gen_range(1..s.c);
                let x = uniform(rng, s, -1.0, 1.0);
                let w1 = uniform(rng, Shape::new(s.n, first, s.h, s.w), -1.0, 1.0);
                let w2 = uniform(rng, Shape::new(s.n, s.c - first, s.h, s.w), -1.0, 1.0);
                Instance {
                    inputs: vec![x],
                    loss: Box::new(move |p| {
                        let parts = split_channels(&p[0], &[first, p[0].shape().c - first])?;
                        weighted_sum(&parts[0], &w1)?.add(&weighted_sum(&parts[1].square(), &w2)?)
                    }),
                }
            },
        },
        OpCase {
            name: "conv2d",
            quadratic: true,
            make: |rng| {
                let k: usize = [1, 3, 7][rng.gen_range(0..3)];
                let pad = rng.gen_range(0..=k / 2 + 1);
                let side = |rng: &mut ChaCha8Rng| rng.gen_range((k.saturating_sub(2 * pad)).max(1)..=k + 2);
                let s = Shape::new(rng.gen_range(1..=2), rng.gen_range(1..=3), side(rng), side(rng));
                let o = rng.gen_range(1..=3);
                let x = uniform(rng, s, -1.0, 1.0);
                let kernel = uniform(rng, Shape::new(o, s.c, k, k), -1.0, 1.0);
                let bias = uniform(rng, Shape::new(1, o, 1, 1), -1.0, 1.0);
                let out = Shape::new(s.n, o, s.h + 2 * pad + 1 - k, s.w + 2 * pad + 1 - k);
                let w = uniform(rng, out, -1.0, 1.0);
                Instance {
                    inputs: vec![x, kernel, bias],
                    loss: Box::new(move |p| weighted_sum(&conv2d(&p[0], &p[1], &p[2], Padding::Zeros(pad))?, &w)),
                }
            },
        },
        OpCase {
            name: "l1_loss",
            quadratic: false,
            make: |rng| {
                let s = small_shape(rng);
                let a = uniform(rng, s, 0.0, 1.0);
                // Keep |a - b| clear of zero.
                let offsets = away_from_zero::<T>(rng, s, 0.05, 0.5);
                let b = a.add(&offsets).expect("same shape").detach();
                Instance {
                    inputs: vec![a, b],
                    loss: Box::new(|p| l1_loss(&p[0], &p[1])),
                }
            },
        },
        OpCase {
            name: "ssim_loss",
            quadratic: false,
            make: |rng| {
                let s = Shape::new(1, rng.gen_range(1..=3), rng.gen_range(11..=14), rng.gen_range(11..=14));
                let a = uniform(rng, s, 0.0, 1.0);
                let b = uniform(rng, s, 0.0, 1.0);
                Instance {
                    inputs: vec![a, b],
                    loss: Box::new(|p| ssim_loss(&p[0], &p[1], &SsimConfig::default())),
                }
            },
        },
    ]
}

const QUADRATIC_STEP: f64 = 0.25;

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs `instances` random instances of every op; `passes` when the worst
/// relative error stays under `tolerance`.
pub fn check_op<T: Element>(
    case: &OpCase<T>,
    instances: usize,
    options: GradCheckOptions,
    tolerance: f64,
    rng: &mut ChaCha8Rng,
) -> CheckOutcome {
    let options = if case.quadratic {
        GradCheckOptions {
            relative_step: options.relative_step.max(QUADRATIC_STEP),
            ..options
        }
    } else {
        options
    };
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    for _ in 0..instances {
        let inst = (case.make)(rng);
        match check_gradients(&inst.inputs, &inst.loss, options, rng) {
            Ok(report) => {
                worst = worst.max(report.max_relative_error);
                checked += report.checked;
                skipped += report.skipped;
            }
            Err(e) => {
                return CheckOutcome {
                    name: format!("grad {} ({})", case.name, T::NAME),
                    passed: false,
                    detail: format!("error: {e}"),
                }
            }
        }
    }
    CheckOutcome {
        name: format!("grad {} ({})", case.name, T::NAME),
        passed: checked > 0 && worst < tolerance && skip_ratio_ok(checked, skipped),
        detail: format!(
            "{instances} instances, {checked} coords ({skipped} skipped as non-smooth), max rel err {worst:.3e} (tol {tolerance:.0e})"
        ),
    }
}

/// Gradient check of the whole network on `(1, 3, side, side)` inputs,
/// probing `coords` entries of every parameter and input.
pub fn check_network(mode: Ablation, side: usize, coords: usize, tolerance: f64, seed: u64) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = FusionNetwork::<f64>::new(mode, seed);
    let shape = Shape::new(1, 3, side, side);
    let a = uniform::<f64>(&mut rng, shape, 0.0, 1.0);
    let b = uniform::<f64>(&mut rng, shape, 0.0, 1.0);
    let target = uniform::<f64>(&mut rng, shape, 0.0, 1.0);
    let mut inputs: Vec<Tensor<f64>> = net.parameters().into_iter().map(Tensor::detach).collect();
    let n_params = inputs.len();
    inputs.push(a);
    inputs.push(b);
    let loss = |p: &[Tensor<f64>]| -> Result<Tensor<f64>> {
        let layers = p[..n_params]
            .chunks(2)
            .map(|kb| ConvWeights::new(kb[0].clone(), kb[1].clone()))
            .collect::<Result<Vec<_>>>()?;
        let net = FusionNetwork::from_layers(layers, mode, net.leaky_slope, net.init_seed)?;
        let out = net.forward(&[p[n_params].clone(), p[n_params + 1].clone()])?;
        Ok(out.sub(&target)?.square().mean())
    };
    let name = format!("grad network {mode} (f64, {side}x{side})");
    match check_gradients(&inputs, loss, GradCheckOptions::for_f64().sampled(coords), &mut rng) {
        Ok(r) => CheckOutcome {
            name,
            passed: r.passes(tolerance),
            detail: format!(
                "{} coords ({} skipped as non-smooth), max rel err {:.3e} (tol {tolerance:.0e})",
                r.checked, r.skipped, r.max_relative_error
            ),
        },
        Err(e) => CheckOutcome {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Worst deviations of the attention invariants over random feature pairs:
/// `(sum-to-one, identical-inputs-at-half, swap-permutes)`.
pub fn attention_invariants(pairs: usize, seed: u64) -> Result<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = FusionNetwork::<f32>::new(Ablation::Ufa, seed);
    let (mut sum_err, mut same_err, mut swap_err) = (0.0f64, 0.0f64, 0.0f64);
    let max_dev = |a: &Tensor<f32>, f: &dyn Fn(usize, f32) -> f32| {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f64::from((v - f(i, v)).abs()))
            .fold(0.0, f64::max)
    };
    for _ in 0..pairs {
        let s = Shape::new(rng.gen_range(1..=2), 64, rng.gen_range(7..=12), rng.gen_range(7..=12));
        let fa = uniform::<f32>(&mut rng, s, -2.0, 2.0);
        let fb = uniform::<f32>(&mut rng, s, -2.0, 2.0);
        let pair = [fa.clone(), fb.clone()];
        let swapped = [fb, fa.clone()];
        let ca = channel_attention(&pair)?;
        let sa = spatial_attention(&pair, &net.spatial)?;
        for maps in [&ca, &sa] {
            let total = maps[0].add(&maps[1])?;
            sum_err = sum_err.max(max_dev(&total, &|_, _| 1.0));
        }
        let cs = channel_attention(&swapped)?;
        let ss = spatial_attention(&swapped, &net.spatial)?;
        for (orig, sw) in [(&ca, &cs), (&sa, &ss)] {
            for k in 0..2 {
                let other = sw[1 - k].data();
                swap_err = swap_err.max(max_dev(&orig[k], &|i, _| other[i]));
            }
        }
        let same = [fa.clone(), fa];
        for maps in [channel_attention(&same)?, spatial_attention(&same, &net.spatial)?] {
            for m in &maps {
                same_err = same_err.max(max_dev(m, &|_, _| 0.5));
            }
        }
    }
    Ok((sum_err, same_err, swap_err))
}

/// The full suite: every op in f64 with `instances` random instances each,
/// the network in every ablation mode, and the attention invariants.
pub fn run(seed: u64, instances: usize) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes: Vec<CheckOutcome> = op_cases::<f64>()
        .iter()
        .map(|case| check_op(case, instances, GradCheckOptions::for_f64(), 1e-6, &mut rng))
        .collect();
    for (i, mode) in Ablation::ALL.into_iter().enumerate() {
        outcomes.push(check_network(mode, 16, 2, 1e-6, seed.wrapping_add(i as u64)));
    }
    let started = Instant::now();
    outcomes.push(match attention_invariants(50, seed) {
        Ok((sum, same, swap)) => CheckOutcome {
            name: "attention invariants (50 pairs)".into(),
            passed: sum < 1e-5 && same < 1e-6 && swap < 1e-6,
            detail: format!(
                "sum-to-one {sum:.1e}, identical {same:.1e}, swap {swap:.1e} ({:.1}s)",
                started.elapsed().as_secs_f64()
            ),
        },
        Err(e) => CheckOutcome {
            name: "attention invariants (50 pairs)".into(),
            passed: false,
            detail: format!("error: {e}"),
        },
    });
    outcomes
}
