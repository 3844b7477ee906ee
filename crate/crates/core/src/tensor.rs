//! Dense rank-4 tensors in `(batch, height, width, channels)` row-major order.
//!
//! Convolution kernels reuse the same container with the four axes read as
//! `(kh, kw, in_channels, out_channels)`; see [`ConvKernel`].

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real: Float + FromPrimitive + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: &'static str;

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";
}

/// Dimensions of a [`Tensor`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Shape {
    pub const fn new(batch: usize, height: usize, width: usize, channels: usize) -> Self {
        Shape { batch, height, width, channels }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.height * self.width * self.channels
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.batch, self.height, self.width, self.channels]
    }

    pub const fn with_channels(&self, channels: usize) -> Self {
        Shape::new(self.batch, self.height, self.width, channels)
    }

    /// Flat offset of `(b, y, x, c)`.
    #[inline]
    pub fn offset(&self, b: usize, y: usize, x: usize, c: usize) -> usize {
        ((b * self.height + y) * self.width + x) * self.channels + c
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.height, self.width, self.channels)
    }
}

/// Dense tensor with an optional gradient slot of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.numel()], grad: None }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.numel()], grad: None }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Contract(format!(
                "tensor {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value], grad: None }
    }

    /// Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| T::of(rng.sample::<f64, _>(StandardNormal) * std)).collect();
        Tensor { shape, data, grad: None }
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| T::of(rng.gen_range(lo..hi))).collect();
        Tensor { shape, data, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, b: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.shape.offset(b, y, x, c)]
    }

    pub fn set(&mut self, b: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.shape.offset(b, y, x, c);
        self.data[i] = v;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Contract(format!("gradient of length {} for tensor {}", grad.len(), self.shape)));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Same data, new dimensions with the same element count.
    pub fn reshaped(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::shape("reshape", self.shape, shape));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> T {
        self.data.iter().zip(&other.data).map(|(a, b)| (*a - *b).abs()).fold(T::zero(), T::max)
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.as_f64())).collect(), grad: None }
    }

    /// Extracts batch entry `b` as a single-sample tensor.
    pub fn sample(&self, b: usize) -> Tensor<T> {
        let per = self.shape.height * self.shape.width * self.shape.channels;
        Tensor {
            shape: Shape::new(1, self.shape.height, self.shape.width, self.shape.channels),
            data: self.data[b * per..(b + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Stacks single-sample tensors of equal shape along the batch axis.
    pub fn stack(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = samples.first().ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.numel() * samples.len());
        let mut batch = 0;
        for t in samples {
            let ts = t.shape;
            if (ts.height, ts.width, ts.channels) != (s.height, s.width, s.channels) {
                return Err(Error::shape("stack", s, ts));
            }
            batch += ts.batch;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(batch, s.height, s.width, s.channels), data)
    }
}

/// Spatial padding convention for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Output size `ceil(in / stride)`; zero padding split evenly with the
    /// odd pixel on the bottom/right.
    Same,
    /// No padding; output size `(in - k) / stride + 1`.
    Valid,
}

/// The three kernel layouts used by the layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    Full,
    Depthwise,
    Pointwise,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Full => "full",
            KernelKind::Depthwise => "dw",
            KernelKind::Pointwise => "pw",
        }
    }
}

/// A convolution kernel with layout `(kh, kw, in_channels, out_channels)`.
///
/// Depthwise kernels store one `kh x kw` plane per input channel with
/// `out_channels == 1` (channel multiplier one); pointwise kernels are 1x1.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T> {
    kind: KernelKind,
    weights: Tensor<T>,
}

impl<T: Real> ConvKernel<T> {
    pub fn new(kind: KernelKind, dims: [usize; 4], weights: Vec<T>) -> Result<Self> {
        let [kh, kw, cin, cout] = dims;
        match kind {
            KernelKind::Depthwise if cout != 1 => {
                return Err(Error::Contract(format!("depthwise kernel must have channel multiplier 1, got {cout}")))
            }
            KernelKind::Pointwise if kh != 1 || kw != 1 => {
                return Err(Error::Contract(format!("pointwise kernel must be 1x1, got {kh}x{kw}")))
            }
            _ => {}
        }
        if kh == 0 || kw == 0 || cin == 0 || cout == 0 {
            return Err(Error::Contract(format!("empty kernel dims {dims:?}")));
        }
        let weights = Tensor::from_vec(Shape::new(kh, kw, cin, cout), weights)?;
        Ok(ConvKernel { kind, weights })
    }

    pub fn zeros(kind: KernelKind, dims: [usize; 4]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(kind, dims, vec![T::zero(); n])
    }

    pub fn full(kh: usize, kw: usize, cin: usize, cout: usize, w: Vec<T>) -> Result<Self> {
        Self::new(KernelKind::Full, [kh, kw, cin, cout], w)
    }

    pub fn depthwise(kh: usize, kw: usize, channels: usize, w: Vec<T>) -> Result<Self> {
        Self::new(KernelKind::Depthwise, [kh, kw, channels, 1], w)
    }

    pub fn pointwise(cin: usize, cout: usize, w: Vec<T>) -> Result<Self> {
        Self::new(KernelKind::Pointwise, [1, 1, cin, cout], w)
    }

    /// Depthwise kernel with a single 1 at the centre tap of every plane.
    pub fn depthwise_identity(k: usize, channels: usize) -> Self {
        let mut w = vec![T::zero(); k * k * channels];
        let centre = (k / 2) * k + k / 2;
        for c in 0..channels {
            w[centre * channels + c] = T::one();
        }
        Self::depthwise(k, k, channels, w).expect("valid identity kernel")
    }

    /// Pointwise identity (`cin == cout`).
    pub fn pointwise_identity(channels: usize) -> Self {
        let mut w = vec![T::zero(); channels * channels];
        for c in 0..channels {
            w[c * channels + c] = T::one();
        }
        Self::pointwise(channels, channels, w).expect("valid identity kernel")
    }

    /// He-style Gaussian initialisation scaled by fan-in.
    pub fn he_normal<R: Rng + ?Sized>(kind: KernelKind, dims: [usize; 4], rng: &mut R) -> Self {
        let [kh, kw, cin, _] = dims;
        let fan_in = match kind {
            KernelKind::Depthwise => kh * kw,
            _ => kh * kw * cin,
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let t = Tensor::randn(Shape::new(dims[0], dims[1], dims[2], dims[3]), std, rng);
        Self::new(kind, dims, t.into_data()).expect("valid dims")
    }

    pub fn from_tensor(kind: KernelKind, t: Tensor<T>) -> Result<Self> {
        let dims = t.shape().dims();
        Self::new(kind, dims, t.into_data())
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    /// `(kh, kw, in_channels, out_channels)`.
    pub fn dims(&self) -> [usize; 4] {
        self.weights.shape().dims()
    }

    pub fn in_channels(&self) -> usize {
        self.dims()[2]
    }

    /// Output channels produced when applied to an input.
    pub fn output_channels(&self) -> usize {
        match self.kind {
            KernelKind::Depthwise => self.dims()[2],
            _ => self.dims()[3],
        }
    }

    pub fn weights(&self) -> &[T] {
        self.weights.data()
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        self.weights.data_mut()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.weights
    }

    pub fn params(&self) -> usize {
        self.weights.numel()
    }
}

/// Output size and leading padding of one spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisGeometry {
    pub output: usize,
    pub pad_before: usize,
}

pub fn axis_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<AxisGeometry> {
    if stride == 0 {
        return Err(Error::Contract("stride must be positive".into()));
    }
    match padding {
        Padding::Same => {
            let output = input.div_ceil(stride);
            let needed = ((output.max(1) - 1) * stride + kernel).saturating_sub(input);
            Ok(AxisGeometry { output, pad_before: needed / 2 })
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::Contract(format!(
                    "valid convolution of size-{input} axis with size-{kernel} kernel"
                )));
            }
            Ok(AxisGeometry { output: (input - kernel) / stride + 1, pad_before: 0 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = axis_geometry(10, 3, 2, Padding::Same).unwrap();
        assert_eq!(g.output, 5);
        // (5-1)*2 + 3 - 10 = 1 -> 0 before, 1 after
        assert_eq!(g.pad_before, 0);
        let g = axis_geometry(7, 3, 1, Padding::Same).unwrap();
        assert_eq!((g.output, g.pad_before), (7, 1));
        let g = axis_geometry(5, 3, 2, Padding::Same).unwrap();
        assert_eq!((g.output, g.pad_before), (3, 1));
    }

    #[test]
    fn valid_geometry() {
        let g = axis_geometry(2, 2, 1, Padding::Valid).unwrap();
        assert_eq!(g.output, 1);
        assert!(axis_geometry(1, 3, 1, Padding::Valid).is_err());
    }

    #[test]
    fn kernel_layout_constraints() {
        assert!(ConvKernel::<f32>::new(KernelKind::Depthwise, [3, 3, 4, 2], vec![0.0; 72]).is_err());
        assert!(ConvKernel::<f32>::new(KernelKind::Pointwise, [3, 3, 4, 2], vec![0.0; 72]).is_err());
        let k = ConvKernel::<f32>::depthwise_identity(3, 5);
        assert_eq!(k.output_channels(), 5);
        assert_eq!(k.params(), 45);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f64>::from_vec(Shape::new(1, 2, 2, 1), vec![1.0; 3]).is_err());
    }
}
