use std::sync::Arc;

use super::{Element, GradFn, Shape, Tensor};
use crate::error::{Error, Result};

/// Backward rule stored as a closure over the op's inputs.
struct ClosureGrad<T: Element, F> {
    inputs: Vec<Tensor<T>>,
    rule: F,
}

impl<T, F> GradFn<T> for ClosureGrad<T, F>
where
    T: Element,
    F: Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync,
{
    fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }

    fn backward(&self, output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>> {
        (self.rule)(&self.inputs, output, grad)
    }
}

pub(crate) fn record<T, F>(shape: Shape, data: Vec<T>, inputs: Vec<Tensor<T>>, rule: F) -> Tensor<T>
where
    T: Element,
    F: Fn(&[Tensor<T>], &[T], &[T]) -> Vec<Option<Vec<T>>> + Send + Sync + 'static,
{
    Tensor::from_op(shape, data, Box::new(ClosureGrad { inputs, rule }))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    #[inline]
    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    #[inline]
    fn grad_lhs<T: Element>(self, _a: T, b: T, g: T) -> T {
        match self {
            Binary::Add | Binary::Sub => g,
            Binary::Mul => g * b,
            Binary::Div => g / b,
        }
    }

    #[inline]
    fn grad_rhs<T: Element>(self, a: T, b: T, g: T) -> T {
        match self {
            Binary::Add => g,
            Binary::Sub => -g,
            Binary::Mul => g * a,
            Binary::Div => -g * a / (b * b),
        }
    }
}

/// How the smaller operand of a binary op maps onto the full shape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// `(N, C, 1, 1)` against `(N, C, H, W)`.
    PerChannel,
    /// `(N, 1, H, W)` against `(N, C, H, W)`.
    PerPixel,
}

impl Broadcast {
    fn classify(full: Shape, other: Shape) -> Option<Self> {
        if full == other {
            return Some(Broadcast::Same);
        }
        if other.n != full.n {
            return None;
        }
        if other.c == full.c && other.h == 1 && other.w == 1 {
            Some(Broadcast::PerChannel)
        } else if other.c == 1 && other.h == full.h && other.w == full.w {
            Some(Broadcast::PerPixel)
        } else {
            None
        }
    }

    #[inline]
    fn small_index(self, full: Shape, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::PerChannel => i / full.plane(),
            Broadcast::PerPixel => {
                let plane = full.plane();
                (i / (plane * full.c)) * plane + i % plane
            }
        }
    }
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: Binary) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    // `lhs_full` tells which side carries the full shape.
    let (full, mode, lhs_full) = if let Some(m) = Broadcast::classify(sa, sb) {
        (sa, m, true)
    } else if let Some(m) = Broadcast::classify(sb, sa) {
        (sb, m, false)
    } else {
        return Err(Error::shape(format!(
            "cannot broadcast {sa} with {sb} for {op:?}"
        )));
    };

    let (ad, bd) = (a.data(), b.data());
    let out: Vec<T> = (0..full.numel())
        .map(|i| {
            let j = mode.small_index(full, i);
            if lhs_full {
                op.apply(ad[i], bd[j])
            } else {
                op.apply(ad[j], bd[i])
            }
        })
        .collect();

    Ok(record(full, out, vec![a.clone(), b.clone()], move |inputs, _, g| {
        let (ad, bd) = (inputs[0].data(), inputs[1].data());
        let mut ga = vec![T::zero(); ad.len()];
        let mut gb = vec![T::zero(); bd.len()];
        for (i, &gi) in g.iter().enumerate() {
            let j = mode.small_index(full, i);
            let (ia, ib) = if lhs_full { (i, j) } else { (j, i) };
            let (x, y) = (ad[ia], bd[ib]);
            ga[ia] = ga[ia] + op.grad_lhs(x, y, gi);
            gb[ib] = gb[ib] + op.grad_rhs(x, y, gi);
        }
        vec![Some(ga), Some(gb)]
    }))
}

fn unary<T: Element>(
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + Send + Sync + 'static,
) -> Tensor<T> {
    let out = x.data().iter().map(|&v| f(v)).collect();
    record(x.shape(), out, vec![x.clone()], move |inputs, y, g| {
        let xd = inputs[0].data();
        vec![Some(
            g.iter()
                .zip(xd.iter().zip(y))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect(),
        )]
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, Binary::Div)
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        unary(self, |v| v + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Tensor<T> {
        unary(self, |v| v * s, move |_, _| s)
    }

    pub fn square(&self) -> Tensor<T> {
        let two = T::one() + T::one();
        unary(self, |v| v * v, move |x, _| two * x)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        unary(self, |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    /// `max(x, slope·x)`; the derivative at exactly 0 is 1.
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        unary(
            self,
            |v| if v >= T::zero() { v } else { v * slope },
            move |x, _| if x >= T::zero() { T::one() } else { slope },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(self, stable_sigmoid, |_, y| y * (T::one() - y))
    }

    /// Mean over all elements, as a `(1, 1, 1, 1)` tensor.
    pub fn mean(&self) -> Tensor<T> {
        let count = T::from_usize(self.numel()).expect("count");
        let total: T = self.data().iter().copied().sum();
        record(Shape::scalar(), vec![total / count], vec![self.clone()], move |inputs, _, g| {
            vec![Some(vec![g[0] / count; inputs[0].numel()])]
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let total: T = self.data().iter().copied().sum();
        record(Shape::scalar(), vec![total], vec![self.clone()], |inputs, _, g| {
            vec![Some(vec![g[0]; inputs[0].numel()])]
        })
    }

    /// Spatial mean per `(n, c)`, giving `(N, C, 1, 1)`.
    pub fn global_avg_pool(&self) -> Tensor<T> {
        let s = self.shape();
        let plane = s.plane();
        let count = T::from_usize(plane).expect("count");
        let out: Vec<T> = self
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() / count)
            .collect();
        record(Shape::new(s.n, s.c, 1, 1), out, vec![self.clone()], move |_, _, g| {
            let mut gx = Vec::with_capacity(g.len() * plane);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi / count, plane));
            }
            vec![Some(gx)]
        })
    }

    /// Mean or max across channels at each pixel, giving `(N, 1, H, W)`.
    ///
    /// Max routes its gradient to the lowest-index channel among ties.
    pub fn channel_pool(&self, mode: PoolMode) -> Tensor<T> {
        let s = self.shape();
        let plane = s.plane();
        let xd = self.data();
        let out_shape = Shape::new(s.n, 1, s.h, s.w);
        match mode {
            PoolMode::Avg => {
                let count = T::from_usize(s.c).expect("count");
                let mut out = vec![T::zero(); out_shape.numel()];
                for n in 0..s.n {
                    let dst = &mut out[n * plane..(n + 1) * plane];
                    for c in 0..s.c {
                        let src = &xd[(n * s.c + c) * plane..][..plane];
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d = *d + *v);
                    }
                    dst.iter_mut().for_each(|d| *d = *d / count);
                }
                record(out_shape, out, vec![self.clone()], move |_, _, g| {
                    let mut gx = vec![T::zero(); s.numel()];
                    for n in 0..s.n {
                        let gp = &g[n * plane..(n + 1) * plane];
                        for c in 0..s.c {
                            let dst = &mut gx[(n * s.c + c) * plane..][..plane];
                            dst.iter_mut().zip(gp).for_each(|(d, v)| *d = *v / count);
                        }
                    }
                    vec![Some(gx)]
                })
            }
            PoolMode::Max => {
                let mut out = vec![T::zero(); out_shape.numel()];
                let mut argmax = vec![0usize; out_shape.numel()];
                for n in 0..s.n {
                    for p in 0..plane {
                        let mut best = xd[n * s.c * plane + p];
                        let mut best_c = 0;
                        for c in 1..s.c {
                            let v = xd[(n * s.c + c) * plane + p];
                            if v > best {
                                best = v;
                                best_c = c;
                            }
                        }
                        out[n * plane + p] = best;
                        argmax[n * plane + p] = best_c;
                    }
                }
                record(out_shape, out, vec![self.clone()], move |_, _, g| {
                    let mut gx = vec![T::zero(); s.numel()];
                    for (i, (&gi, &c)) in g.iter().zip(&argmax).enumerate() {
                        let (n, p) = (i / plane, i % plane);
                        gx[(n * s.c + c) * plane + p] = gi;
                    }
                    vec![Some(gx)]
                })
            }
        }
    }

    /// Separable "valid" filter applied to every `(n, c)` plane with the
    /// same 1-D taps along both axes. Output is `(H - k + 1, W - k + 1)`.
    pub fn separable_filter(&self, taps: &[T]) -> Result<Tensor<T>> {
        let s = self.shape();
        let k = taps.len();
        if k == 0 || k > s.h || k > s.w {
            return Err(Error::shape(format!(
                "filter of size {k} does not fit {s}"
            )));
        }
        let (ho, wo) = (s.h - k + 1, s.w - k + 1);
        let taps: Arc<[T]> = taps.into();
        let planes = s.n * s.c;
        let mut out = vec![T::zero(); planes * ho * wo];
        let mut rows = vec![T::zero(); s.h * wo];
        for p in 0..planes {
            let src = &self.data()[p * s.plane()..][..s.plane()];
            // horizontal pass: H × wo
            for y in 0..s.h {
                let line = &src[y * s.w..][..s.w];
                for x in 0..wo {
                    let mut acc = T::zero();
                    for (t, &wt) in taps.iter().enumerate() {
                        acc = acc + wt * line[x + t];
                    }
                    rows[y * wo + x] = acc;
                }
            }
            // vertical pass: ho × wo
            let dst = &mut out[p * ho * wo..][..ho * wo];
            for y in 0..ho {
                for (t, &wt) in taps.iter().enumerate() {
                    let line = &rows[(y + t) * wo..][..wo];
                    dst[y * wo..][..wo]
                        .iter_mut()
                        .zip(line)
                        .for_each(|(d, v)| *d = *d + wt * *v);
                }
            }
        }
        let out_shape = Shape::new(s.n, s.c, ho, wo);
        Ok(record(out_shape, out, vec![self.clone()], move |_, _, g| {
            let mut gx = vec![T::zero(); s.numel()];
            let mut grows = vec![T::zero(); s.h * wo];
            for p in 0..planes {
                let gp = &g[p * ho * wo..][..ho * wo];
                grows.iter_mut().for_each(|v| *v = T::zero());
                for y in 0..ho {
                    for (t, &wt) in taps.iter().enumerate() {
                        let dst = &mut grows[(y + t) * wo..][..wo];
                        dst.iter_mut()
                            .zip(&gp[y * wo..][..wo])
                            .for_each(|(d, v)| *d = *d + wt * *v);
                    }
                }
                let dst = &mut gx[p * s.plane()..][..s.plane()];
                for y in 0..s.h {
                    for x in 0..wo {
                        let gv = grows[y * wo + x];
                        for (t, &wt) in taps.iter().enumerate() {
                            let d = &mut dst[y * s.w + x + t];
                            *d = *d + wt * gv;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where it rounds to an endpoint.
#[inline]
fn stable_sigmoid<T: Element>(v: T) -> T {
    let y = if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    };
    let below_one = T::one() - T::epsilon() / (T::one() + T::one());
    y.max(T::min_positive_value()).min(below_one)
}

/// Softmax across a set of same-shaped tensors, independently at every
/// element position. Outputs sum to one position-wise.
pub fn softmax_over_set<T: Element>(xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    if xs.len() < 2 {
        return Err(Error::invalid(format!(
            "softmax over a set needs at least 2 tensors, got {}",
            xs.len()
        )));
    }
    let shape = xs[0].shape();
    if let Some(bad) = xs.iter().find(|x| x.shape() != shape) {
        return Err(Error::shape(format!(
            "softmax set mixes {shape} and {}",
            bad.shape()
        )));
    }
    let k = xs.len();
    let len = shape.numel();
    let mut outs = vec![vec![T::zero(); len]; k];
    for p in 0..len {
        let max = xs
            .iter()
            .map(|x| x.data()[p])
            .fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (o, x) in outs.iter_mut().zip(xs) {
            let e = (x.data()[p] - max).exp();
            o[p] = e;
            denom = denom + e;
        }
        for o in outs.iter_mut() {
            o[p] = o[p] / denom;
        }
    }
    let probs: Arc<Vec<Vec<T>>> = Arc::new(outs);
    Ok((0..k)
        .map(|idx| {
            let probs = Arc::clone(&probs);
            record(shape, probs[idx].clone(), xs.to_vec(), move |_, _, g| {
                // d y_idx / d x_j = y_idx (δ_idx,j − y_j)
                let mine = &probs[idx];
                (0..k)
                    .map(|j| {
                        let other = &probs[j];
                        Some(
                            g.iter()
                                .zip(mine.iter().zip(other))
                                .map(|(&gi, (&yi, &yj))| {
                                    let delta = if j == idx { T::one() } else { T::zero() };
                                    gi * yi * (delta - yj)
                                })
                                .collect(),
                        )
                    })
                    .collect()
            })
        })
        .collect())
}

/// Joins tensors along the channel axis, preserving order.
pub fn concat_channels<T: Element>(xs: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat of an empty list"))?
        .shape();
    for x in xs {
        let s = x.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(Error::shape(format!("cannot concat {first} with {s}")));
        }
    }
    let channels: Vec<usize> = xs.iter().map(|x| x.shape().c).collect();
    let total_c: usize = channels.iter().sum();
    let out_shape = Shape::new(first.n, total_c, first.h, first.w);
    let plane = first.plane();
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for (x, &c) in xs.iter().zip(&channels) {
            out.extend_from_slice(&x.data()[n * c * plane..][..c * plane]);
        }
    }
    Ok(record(out_shape, out, xs.to_vec(), move |_, _, g| {
        let mut grads: Vec<Vec<T>> = channels
            .iter()
            .map(|&c| Vec::with_capacity(first.n * c * plane))
            .collect();
        let mut offset = 0;
        for _ in 0..first.n {
            for (gx, &c) in grads.iter_mut().zip(&channels) {
                gx.extend_from_slice(&g[offset..offset + c * plane]);
                offset += c * plane;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}

/// Inverse of [`concat_channels`]: slices `x` into consecutive channel blocks.
pub fn split_channels<T: Element>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    if sizes.iter().sum::<usize>() != s.c || sizes.contains(&0) {
        return Err(Error::shape(format!("cannot split {s} into {sizes:?}")));
    }
    let plane = s.plane();
    let mut start = 0;
    let mut parts = Vec::with_capacity(sizes.len());
    for &c in sizes {
        let part_shape = Shape::new(s.n, c, s.h, s.w);
        let mut data = Vec::with_capacity(part_shape.numel());
        for n in 0..s.n {
            data.extend_from_slice(&x.data()[(n * s.c + start) * plane..][..c * plane]);
        }
        let first = start;
        parts.push(record(part_shape, data, vec![x.clone()], move |_, _, g| {
            let mut gx = vec![T::zero(); s.numel()];
            for n in 0..s.n {
                gx[(n * s.c + first) * plane..][..c * plane]
                    .copy_from_slice(&g[n * c * plane..][..c * plane]);
            }
            vec![Some(gx)]
        }));
        start += c;
    }
    Ok(parts)
}
