use std::sync::atomic::{AtomicBool, Ordering};

use super::ops::record;
use super::{Element, Shape, Tensor};
use crate::error::{Error, Result};

/// Kernel sizes the network uses.
pub const SUPPORTED_KERNELS: [usize; 3] = [1, 3, 7];

static CONV_BACKWARD_FAULT: AtomicBool = AtomicBool::new(false);

/// Test hook: when enabled, conv2d reports a deliberately wrong kernel
/// gradient. Used to prove the gradient self-check can fail.
#[doc(hidden)]
pub fn inject_conv_backward_fault(enabled: bool) {
    CONV_BACKWARD_FAULT.store(enabled, Ordering::SeqCst);
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` zeros on every side; odd kernels only.
    Same,
    Zeros(usize),
}

impl Padding {
    fn resolve(self, kernel: usize) -> Result<usize> {
        match self {
            Padding::Same if kernel.is_multiple_of(2) => Err(Error::Unsupported(format!(
                "\"same\" padding with even kernel size {kernel}"
            ))),
            Padding::Same => Ok((kernel - 1) / 2),
            Padding::Zeros(p) => Ok(p),
        }
    }
}

/// One convolution layer: `(O, I, k, k)` kernel and `(1, O, 1, 1)` bias.
#[derive(Clone, Debug)]
pub struct ConvWeights<T: Element = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ConvWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let ks = kernel.shape();
        if ks.h != ks.w || !SUPPORTED_KERNELS.contains(&ks.h) {
            return Err(Error::Unsupported(format!(
                "kernel {}x{} (supported: 1, 3, 7)",
                ks.h, ks.w
            )));
        }
        if bias.shape() != Shape::new(1, ks.n, 1, 1) {
            return Err(Error::shape(format!(
                "bias {} does not match {} output channels",
                bias.shape(),
                ks.n
            )));
        }
        Ok(ConvWeights { kernel, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().n
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().c
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape().h
    }

    /// Stride-1 convolution with "same" output size.
    pub fn apply(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(input, &self.kernel, &self.bias, Padding::Same)
    }
}

struct Geometry {
    input: Shape,
    kernel: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.input.c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1 kernels without padding read the input plane directly.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.pad == 0
    }

    /// Unfolds one batch item into a `(C·k·k) × (Ho·Wo)` patch matrix.
    fn im2col<T: Element>(&self, x: &[T], cols: &mut [T]) {
        let (h, w, k, pad) = (self.input.h, self.input.w, self.kernel, self.pad);
        let (oh, ow) = (self.out_h, self.out_w);
        for c in 0..self.input.c {
            let plane = &x[c * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - pad as isize;
                        let dst = &mut row[oy * ow..][..ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let (lo, hi) = self.valid_span(kx);
                        dst[..lo].iter_mut().for_each(|v| *v = T::zero());
                        if lo < hi {
                            dst[lo..hi].copy_from_slice(&src[lo + kx - pad..hi + kx - pad]);
                        }
                        dst[hi..].iter_mut().for_each(|v| *v = T::zero());
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters patch gradients back.
    fn col2im<T: Element>(&self, cols: &[T], dx: &mut [T]) {
        let (h, w, k, pad) = (self.input.h, self.input.w, self.kernel, self.pad);
        let (oh, ow) = (self.out_h, self.out_w);
        for c in 0..self.input.c {
            let plane = &mut dx[c * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * oh * ow..][..oh * ow];
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..][..w];
                        let (lo, hi) = self.valid_span(kx);
                        if lo == hi {
                            continue;
                        }
                        let src = &row[oy * ow..][lo..hi];
                        for (d, &v) in dst[lo + kx - pad..hi + kx - pad].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose input column `ox + kx - pad` is inside
    /// the image.
    fn valid_span(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.out_w);
        let hi = (self.input.w + self.pad).saturating_sub(kx).min(self.out_w).max(lo);
        (lo, hi)
    }
}

/// Stride-1 2-D cross-correlation (no kernel flip) with zero padding.
///
/// `kernel` is `(O, I, k, k)`, `bias` is `(1, O, 1, 1)`, `input` is
/// `(N, I, H, W)`. Output is `(N, O, H + 2p - k + 1, W + 2p - k + 1)`.
pub fn conv2d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: Padding,
) -> Result<Tensor<T>> {
    let xs = input.shape();
    let ks = kernel.shape();
    if ks.h != ks.w {
        return Err(Error::Unsupported(format!(
            "non-square kernel {}x{}",
            ks.h, ks.w
        )));
    }
    if xs.c != ks.c {
        return Err(Error::shape(format!(
            "input has {} channels, kernel expects {}",
            xs.c, ks.c
        )));
    }
    if bias.shape() != Shape::new(1, ks.n, 1, 1) {
        return Err(Error::shape(format!(
            "bias {} does not match {} output channels",
            bias.shape(),
            ks.n
        )));
    }
    let k = ks.h;
    let pad = padding.resolve(k)?;
    if xs.h + 2 * pad < k || xs.w + 2 * pad < k {
        return Err(Error::shape(format!(
            "kernel {k} with padding {pad} does not fit {xs}"
        )));
    }
    let geo = Geometry {
        input: xs,
        kernel: k,
        pad,
        out_h: xs.h + 2 * pad - k + 1,
        out_w: xs.w + 2 * pad - k + 1,
    };
    let out_c = ks.n;
    let out_shape = Shape::new(xs.n, out_c, geo.out_h, geo.out_w);
    let (rows, ncols) = (geo.col_rows(), geo.col_cols());
    let in_item = xs.c * xs.plane();
    let out_item = out_c * ncols;

    let mut out = vec![T::zero(); out_shape.numel()];
    let mut cols = if geo.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * ncols]
    };
    for n in 0..xs.n {
        let x = &input.data()[n * in_item..][..in_item];
        let y = &mut out[n * out_item..][..out_item];
        for (o, plane) in y.chunks_exact_mut(ncols).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.data()[o]);
        }
        let patches: &[T] = if geo.is_pointwise() {
            x
        } else {
            geo.im2col(x, &mut cols);
            &cols
        };
        T::gemm(
            out_c,
            rows,
            ncols,
            T::one(),
            kernel.data(),
            (rows as isize, 1),
            patches,
            (ncols as isize, 1),
            T::one(),
            y,
            (ncols as isize, 1),
        );
    }

    let inputs = vec![input.clone(), kernel.clone(), bias.clone()];
    Ok(record(out_shape, out, inputs, move |inputs, _, g| {
        let (x_all, w) = (inputs[0].data(), inputs[1].data());
        let want = |i: usize| inputs[i].requires_grad();
        let mut gx = want(0).then(|| vec![T::zero(); x_all.len()]);
        let mut gw = want(1).then(|| vec![T::zero(); w.len()]);
        let mut gb = want(2).then(|| vec![T::zero(); out_c]);
        let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { rows * ncols }];
        let mut gcols = vec![T::zero(); rows * ncols];
        for n in 0..geo.input.n {
            let gy = &g[n * out_item..][..out_item];
            if let Some(gb) = gb.as_mut() {
                for (o, plane) in gy.chunks_exact(ncols).enumerate() {
                    gb[o] = gb[o] + plane.iter().copied().sum::<T>();
                }
            }
            if let Some(gw) = gw.as_mut() {
                let x = &x_all[n * in_item..][..in_item];
                let patches: &[T] = if geo.is_pointwise() {
                    x
                } else {
                    geo.im2col(x, &mut cols);
                    &cols
                };
                // dW (O × rows) += dY (O × cols) · patchesᵀ
                T::gemm(
                    out_c,
                    ncols,
                    rows,
                    T::one(),
                    gy,
                    (ncols as isize, 1),
                    patches,
                    (1, ncols as isize),
                    T::one(),
                    gw,
                    (rows as isize, 1),
                );
            }
            if let Some(gx) = gx.as_mut() {
                let dx = &mut gx[n * in_item..][..in_item];
                // d patches (rows × cols) = Wᵀ · dY
                let target: &mut [T] = if geo.is_pointwise() { dx } else { &mut gcols };
                T::gemm(
                    rows,
                    out_c,
                    ncols,
                    T::one(),
                    w,
                    (1, rows as isize),
                    gy,
                    (ncols as isize, 1),
                    T::zero(),
                    target,
                    (ncols as isize, 1),
                );
                if !geo.is_pointwise() {
                    geo.col2im(&gcols, dx);
                }
            }
        }
        if CONV_BACKWARD_FAULT.load(Ordering::Relaxed) {
            if let Some(gw) = gw.as_mut() {
                let bump = T::from_f64_lossy(0.05);
                gw.iter_mut().for_each(|v| *v = *v * (T::one() + bump) + bump);
            }
        }
        vec![gx, gw, gb]
    }))
}
