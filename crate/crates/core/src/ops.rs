//! Forward and backward kernels on plain tensors.
//!
//! These are the numerical primitives behind every layer. The autodiff tape in
//! [`crate::autodiff`] records which of them ran and calls the matching
//! backward kernel; they can also be used directly for inference.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::tensor::{axis_geometry, ConvKernel, KernelKind, Padding, Real, Shape, Tensor};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
    static NOMINAL: Cell<u64> = const { Cell::new(0) };
}

/// Per-thread count of multiply-accumulates executed by forward convolutions.
///
/// [`read`](mac_counter::read) counts taps actually executed; taps that fall
/// into zero padding are skipped. [`read_nominal`](mac_counter::read_nominal)
/// also counts the padded taps, which is the quantity analytical cost models use.
pub mod mac_counter {
    use super::{MACS, NOMINAL};

    pub fn reset() {
        MACS.with(|m| m.set(0));
        NOMINAL.with(|m| m.set(0));
    }

    pub fn read() -> u64 {
        MACS.with(|m| m.get())
    }

    pub fn read_nominal() -> u64 {
        NOMINAL.with(|m| m.get())
    }

    pub(super) fn add(n: u64, nominal: u64) {
        MACS.with(|m| m.set(m.get() + n));
        NOMINAL.with(|m| m.set(m.get() + nominal));
    }
}

/// Resolved geometry of one convolution.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    input: Shape,
    output: Shape,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    /// Input row for output row `oy` and tap `ky`, if inside the image.
    #[inline]
    fn in_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        (y < self.input.height).then_some(y)
    }

    #[inline]
    fn in_x(&self, ox: usize, kx: usize) -> Option<usize> {
        let x = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (x < self.input.width).then_some(x)
    }
}

fn conv_geometry(
    input: Shape,
    kind: KernelKind,
    kdims: [usize; 4],
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let [kh, kw, kin, kout] = kdims;
    if input.channels != kin {
        return Err(Error::shape("conv2d", input, Shape::new(kh, kw, kin, kout)));
    }
    let gy = axis_geometry(input.height, kh, stride, padding)?;
    let gx = axis_geometry(input.width, kw, stride, padding)?;
    let out_c = match kind {
        KernelKind::Depthwise => kin,
        _ => kout,
    };
    Ok(ConvGeom {
        input,
        output: Shape::new(input.batch, gy.output, gx.output, out_c),
        kh,
        kw,
        stride,
        pad_top: gy.pad_before,
        pad_left: gx.pad_before,
    })
}

/// Output shape of a convolution without running it.
pub fn conv2d_output_shape(
    input: Shape,
    kind: KernelKind,
    kdims: [usize; 4],
    stride: usize,
    padding: Padding,
) -> Result<Shape> {
    conv_geometry(input, kind, kdims, stride, padding).map(|g| g.output)
}

/// 2-D convolution of an NHWC tensor with a full, depthwise or pointwise kernel.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    conv2d_raw(input, kernel.kind(), kernel.dims(), kernel.weights(), stride, padding)
}

pub(crate) fn conv2d_raw<T: Real>(
    input: &Tensor<T>,
    kind: KernelKind,
    kdims: [usize; 4],
    w: &[T],
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input.shape(), kind, kdims, stride, padding)?;
    let mut out = Tensor::zeros(g.output);
    let positions = (g.output.batch * g.output.height * g.output.width) as u64;
    let nominal = positions * kdims.iter().product::<usize>() as u64;
    match kind {
        KernelKind::Depthwise => depthwise_forward(&g, input.data(), w, out.data_mut()),
        KernelKind::Full | KernelKind::Pointwise => full_forward(&g, kdims[3], input.data(), w, out.data_mut()),
    }
    mac_counter::add(0, nominal);
    Ok(out)
}

fn full_forward<T: Real>(g: &ConvGeom, cout: usize, x: &[T], w: &[T], out: &mut [T]) {
    let cin = g.input.channels;
    let mut macs = 0u64;
    for b in 0..g.input.batch {
        for oy in 0..g.output.height {
            for ox in 0..g.output.width {
                let o0 = g.output.offset(b, oy, ox, 0);
                let orow = &mut out[o0..o0 + cout];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_y(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_x(ox, kx) else { continue };
                        let i0 = g.input.offset(b, iy, ix, 0);
                        let xrow = &x[i0..i0 + cin];
                        let wbase = (ky * g.kw + kx) * cin * cout;
                        for (ci, &xv) in xrow.iter().enumerate() {
                            let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (o, &wv) in orow.iter_mut().zip(wrow) {
                                *o = *o + xv * wv;
                            }
                        }
                        macs += (cin * cout) as u64;
                    }
                }
            }
        }
    }
    mac_counter::add(macs, 0);
}

fn depthwise_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let c = g.input.channels;
    let mut macs = 0u64;
    for b in 0..g.input.batch {
        for oy in 0..g.output.height {
            for ox in 0..g.output.width {
                let o0 = g.output.offset(b, oy, ox, 0);
                let orow = &mut out[o0..o0 + c];
                for ky in 0..g.kh {
                    let Some(iy) = g.in_y(oy, ky) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = g.in_x(ox, kx) else { continue };
                        let i0 = g.input.offset(b, iy, ix, 0);
                        let wrow = &w[(ky * g.kw + kx) * c..(ky * g.kw + kx + 1) * c];
                        for ((o, &xv), &wv) in orow.iter_mut().zip(&x[i0..i0 + c]).zip(wrow) {
                            *o = *o + xv * wv;
                        }
                        macs += c as u64;
                    }
                }
            }
        }
    }
    mac_counter::add(macs, 0);
}

/// Gradients of a convolution with respect to its input and its weights.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kind: KernelKind,
    kdims: [usize; 4],
    w: &[T],
    stride: usize,
    padding: Padding,
    grad_out: &[T],
    want_input: bool,
    want_weights: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let g = conv_geometry(input.shape(), kind, kdims, stride, padding)?;
    let x = input.data();
    let mut gx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut gw = want_weights.then(|| vec![T::zero(); w.len()]);
    match kind {
        KernelKind::Depthwise => {
            let c = g.input.channels;
            for b in 0..g.input.batch {
                for oy in 0..g.output.height {
                    for ox in 0..g.output.width {
                        let o0 = g.output.offset(b, oy, ox, 0);
                        let go = &grad_out[o0..o0 + c];
                        for ky in 0..g.kh {
                            let Some(iy) = g.in_y(oy, ky) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.in_x(ox, kx) else { continue };
                                let i0 = g.input.offset(b, iy, ix, 0);
                                let w0 = (ky * g.kw + kx) * c;
                                if let Some(gx) = gx.as_mut() {
                                    for ch in 0..c {
                                        gx[i0 + ch] = gx[i0 + ch] + go[ch] * w[w0 + ch];
                                    }
                                }
                                if let Some(gw) = gw.as_mut() {
                                    for ch in 0..c {
                                        gw[w0 + ch] = gw[w0 + ch] + go[ch] * x[i0 + ch];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        KernelKind::Full | KernelKind::Pointwise => {
            let cin = g.input.channels;
            let cout = kdims[3];
            for b in 0..g.input.batch {
                for oy in 0..g.output.height {
                    for ox in 0..g.output.width {
                        let o0 = g.output.offset(b, oy, ox, 0);
                        let go = &grad_out[o0..o0 + cout];
                        for ky in 0..g.kh {
                            let Some(iy) = g.in_y(oy, ky) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.in_x(ox, kx) else { continue };
                                let i0 = g.input.offset(b, iy, ix, 0);
                                let wbase = (ky * g.kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let wr = wbase + ci * cout;
                                    if let Some(gx) = gx.as_mut() {
                                        let mut acc = T::zero();
                                        for (gov, wv) in go.iter().zip(&w[wr..wr + cout]) {
                                            acc = acc + *gov * *wv;
                                        }
                                        gx[i0 + ci] = gx[i0 + ci] + acc;
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let xv = x[i0 + ci];
                                        for (gwv, gov) in gw[wr..wr + cout].iter_mut().zip(go) {
                                            *gwv = *gwv + xv * *gov;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Depthwise convolution followed by a stride-1 pointwise convolution.
pub fn depthwise_separable<T: Real>(
    input: &Tensor<T>,
    dw: &ConvKernel<T>,
    pw: &ConvKernel<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    if dw.kind() != KernelKind::Depthwise || pw.kind() != KernelKind::Pointwise {
        return Err(Error::Contract(format!(
            "separable convolution needs (dw, pw) kernels, got ({}, {})",
            dw.kind().as_str(),
            pw.kind().as_str()
        )));
    }
    let mid = conv2d(input, dw, stride, Padding::Same)?;
    conv2d(&mid, pw, 1, Padding::Same)
}

/// Element-wise operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Sigmoid,
    Add,
    Sub,
    Hadamard,
}

/// Applies a unary (`relu`, `sigmoid`) or binary (`add`, `sub`, `hadamard`) operator.
pub fn elementwise<T: Real>(op: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    match (op, b) {
        (Elementwise::Relu, None) => Ok(map(a, relu)),
        (Elementwise::Sigmoid, None) => Ok(map(a, sigmoid)),
        (Elementwise::Add, Some(b)) => zip(a, b, "add", |x, y| x + y),
        (Elementwise::Sub, Some(b)) => zip(a, b, "sub", |x, y| x - y),
        (Elementwise::Hadamard, Some(b)) => zip(a, b, "hadamard", |x, y| x * y),
        (op, _) => Err(Error::Contract(format!("wrong operand count for {op:?}"))),
    }
}

#[inline]
pub fn relu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn map<T: Real>(a: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    let data = a.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(a.shape(), data).expect("same shape")
}

pub(crate) fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Channel-wise concatenation, `a`'s channels first.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.batch, sa.height, sa.width) != (sb.batch, sb.height, sb.width) {
        return Err(Error::shape("concat_channels", sa, sb));
    }
    let (ca, cb) = (sa.channels, sb.channels);
    let pixels = sa.batch * sa.height * sa.width;
    let mut data = Vec::with_capacity(pixels * (ca + cb));
    for p in 0..pixels {
        data.extend_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        data.extend_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Tensor::from_vec(sa.with_channels(ca + cb), data)
}

/// Channels `start..start + len` of `a`.
pub fn slice_channels<T: Real>(a: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = a.shape();
    if start + len > s.channels || len == 0 {
        return Err(Error::Contract(format!("channel slice {start}..{} out of range for {s}", start + len)));
    }
    let pixels = s.batch * s.height * s.width;
    let mut data = Vec::with_capacity(pixels * len);
    for p in 0..pixels {
        let base = p * s.channels + start;
        data.extend_from_slice(&a.data()[base..base + len]);
    }
    Tensor::from_vec(s.with_channels(len), data)
}

/// Adds a per-channel bias, given as a `(1, 1, 1, C)` tensor.
pub fn bias_add<T: Real>(a: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let c = a.shape().channels;
    if bias.shape() != Shape::new(1, 1, 1, c) {
        return Err(Error::shape("bias_add", a.shape(), bias.shape()));
    }
    let b = bias.data();
    let data = a.data().chunks(c).flat_map(|px| px.iter().zip(b).map(|(&x, &y)| x + y)).collect();
    Tensor::from_vec(a.shape(), data)
}

/// Numerically stable log-softmax over one row.
pub fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Smooth-L1 (Huber with unit threshold) and its derivative.
#[inline]
pub fn smooth_l1<T: Real>(d: T) -> (T, T) {
    let half = T::of(0.5);
    if d.abs() < T::one() {
        (half * d * d, d)
    } else {
        (d.abs() - half, d.signum())
    }
}
