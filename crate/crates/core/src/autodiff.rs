//! Tape-based reverse-mode differentiation over a fixed operator set.
//!
//! Every operation on a [`Tape`] evaluates eagerly and appends a node
//! recording its inputs. [`Tape::backward`] walks the nodes in reverse and
//! leaves gradients in the grad slot of every node that requires one.
//! Only first derivatives are supported.

use crate::error::{Error, Result};
use crate::ops::{self, sigmoid};
use crate::tensor::{ConvKernel, KernelKind, Padding, Real, Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, k: Var, kind: KernelKind, stride: usize, padding: Padding },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    BiasAdd(Var, Var),
    Sum(Var),
    SoftmaxXent { inputs: Vec<Var>, row_len: usize, labels: Vec<usize>, weights: Vec<T> },
    SmoothL1 { inputs: Vec<Var>, targets: Vec<T>, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Confined to one thread; create one per stream.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert!(value.is_finite() || !inputs.iter().all(|v| self.value(*v).is_finite()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. `requires_grad` marks trainable parameters and
    /// anything whose gradient the caller wants.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a kernel; the returned var carries its `(kh, kw, in, out)` dims.
    pub fn kernel(&mut self, kernel: &ConvKernel<T>, requires_grad: bool) -> Var {
        self.leaf(kernel.tensor().clone(), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient left by the last [`Tape::backward`], if `v` required one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub fn conv2d(&mut self, x: Var, k: Var, kind: KernelKind, stride: usize, padding: Padding) -> Result<Var> {
        let kdims = self.shape(k).dims();
        if kind == KernelKind::Depthwise && kdims[3] != 1 {
            return Err(Error::Contract("depthwise kernel needs out dim 1".into()));
        }
        if kind == KernelKind::Pointwise && (kdims[0], kdims[1]) != (1, 1) {
            return Err(Error::Contract("pointwise kernel must be 1x1".into()));
        }
        let y = ops::conv2d_raw(self.value(x), kind, kdims, self.value(k).data(), stride, padding)?;
        Ok(self.push(y, Op::Conv { x, k, kind, stride, padding }, &[x, k]))
    }

    /// Depthwise (given stride, same padding) then pointwise.
    pub fn separable(&mut self, x: Var, dw: Var, pw: Var, stride: usize) -> Result<Var> {
        let mid = self.conv2d(x, dw, KernelKind::Depthwise, stride, Padding::Same)?;
        self.conv2d(mid, pw, KernelKind::Pointwise, 1, Padding::Same)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::zip(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::zip(self.value(a), self.value(b), "hadamard", |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let y = ops::map(self.value(a), |x| x * c);
        self.push(y, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = ops::map(self.value(a), ops::relu);
        self.push(y, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = ops::map(self.value(a), sigmoid);
        self.push(y, Op::Sigmoid(a), &[a])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat(a, b), &[a, b]))
    }

    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(a), start, len)?;
        Ok(self.push(y, Op::Slice { x: a, start }, &[a]))
    }

    /// Splits `a` into `parts` equal channel groups.
    pub fn split_channels(&mut self, a: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(a).channels;
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(Error::Contract(format!("cannot split {c} channels into {parts}")));
        }
        let n = c / parts;
        (0..parts).map(|i| self.slice_channels(a, i * n, n)).collect()
    }

    pub fn bias_add(&mut self, a: Var, bias: Var) -> Result<Var> {
        let y = ops::bias_add(self.value(a), self.value(bias))?;
        Ok(self.push(y, Op::BiasAdd(a, bias), &[a, bias]))
    }

    /// Sum of all elements as a scalar tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `sum_i weights[i] * CE(softmax(row_i), labels[i])` where rows of
    /// length `row_len` are read consecutively from `inputs` in order.
    pub fn softmax_cross_entropy(
        &mut self,
        inputs: &[Var],
        row_len: usize,
        labels: Vec<usize>,
        weights: Vec<T>,
    ) -> Result<Var> {
        let rows = self.row_count(inputs, row_len)?;
        if labels.len() != rows || weights.len() != rows {
            return Err(Error::Contract(format!(
                "{rows} rows but {} labels / {} weights",
                labels.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= row_len) {
            return Err(Error::Contract(format!("label {bad} out of range {row_len}")));
        }
        let mut total = T::zero();
        let mut logp = vec![T::zero(); row_len];
        let mut r = 0;
        for v in inputs {
            for row in self.value(*v).data().chunks(row_len) {
                if weights[r] != T::zero() {
                    ops::log_softmax_row(row, &mut logp);
                    total = total - weights[r] * logp[labels[r]];
                }
                r += 1;
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxXent { inputs: inputs.to_vec(), row_len, labels, weights },
            inputs,
        ))
    }

    /// `sum_i weights[i / 4] * smoothL1(input_i - targets_i)` over rows of 4.
    pub fn smooth_l1(&mut self, inputs: &[Var], targets: Vec<T>, weights: Vec<T>) -> Result<Var> {
        let rows = self.row_count(inputs, 4)?;
        if targets.len() != rows * 4 || weights.len() != rows {
            return Err(Error::Contract(format!(
                "{rows} box rows but {} targets / {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut total = T::zero();
        let mut i = 0;
        for v in inputs {
            for &p in self.value(*v).data() {
                let w = weights[i / 4];
                if w != T::zero() {
                    total = total + w * ops::smooth_l1(p - targets[i]).0;
                }
                i += 1;
            }
        }
        Ok(self.push(Tensor::scalar(total), Op::SmoothL1 { inputs: inputs.to_vec(), targets, weights }, inputs))
    }

    fn row_count(&self, inputs: &[Var], row_len: usize) -> Result<usize> {
        let mut rows = 0;
        for v in inputs {
            let n = self.value(*v).numel();
            if row_len == 0 || !n.is_multiple_of(row_len) {
                return Err(Error::Contract(format!(
                    "tensor {} does not split into rows of {row_len}",
                    self.shape(*v)
                )));
            }
            rows += n / row_len;
        }
        Ok(rows)
    }

    /// Reverse pass from a scalar. Overwrites any gradients from a previous call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {shape}")));
        }
        self.zero_grads();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            self.nodes[i].value.set_grad(g)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv { x, k, kind, stride, padding } => {
                let xv = self.value(x);
                let kv = self.value(k);
                let (gx, gw) = ops::conv2d_backward(
                    xv,
                    kind,
                    kv.shape().dims(),
                    kv.data(),
                    stride,
                    padding,
                    g,
                    self.requires_grad(x),
                    self.requires_grad(k),
                )?;
                if let Some(gx) = gx {
                    self.accumulate(grads, x, |s| add_into(s, &gx));
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, k, |s| add_into(s, &gw));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |s| add_into(s, g));
                self.accumulate(grads, b, |s| add_into(s, g));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |s| add_into(s, g));
                self.accumulate(grads, b, |s| {
                    for (d, &gv) in s.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |s| {
                    for ((d, &gv), &y) in s.iter_mut().zip(g).zip(bv) {
                        *d = *d + gv * y;
                    }
                });
                self.accumulate(grads, b, |s| {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(av) {
                        *d = *d + gv * x;
                    }
                });
            }
            &Op::Scale(a, c) => self.accumulate(grads, a, |s| {
                for (d, &gv) in s.iter_mut().zip(g) {
                    *d = *d + gv * c;
                }
            }),
            &Op::Relu(a) => {
                let xv = self.value(a).data();
                self.accumulate(grads, a, |s| {
                    for ((d, &gv), &x) in s.iter_mut().zip(g).zip(xv) {
                        if x > T::zero() {
                            *d = *d + gv;
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let yv = out.data();
                self.accumulate(grads, a, |s| {
                    for ((d, &gv), &y) in s.iter_mut().zip(g).zip(yv) {
                        *d = *d + gv * y * (T::one() - y);
                    }
                });
            }
            &Op::Concat(a, b) => {
                let ca = self.shape(a).channels;
                let cb = self.shape(b).channels;
                self.accumulate(grads, a, |s| {
                    for (dst, src) in s.chunks_mut(ca).zip(g.chunks(ca + cb)) {
                        add_into(dst, &src[..ca]);
                    }
                });
                self.accumulate(grads, b, |s| {
                    for (dst, src) in s.chunks_mut(cb).zip(g.chunks(ca + cb)) {
                        add_into(dst, &src[ca..]);
                    }
                });
            }
            &Op::Slice { x, start } => {
                let c = self.shape(x).channels;
                let len = out.shape().channels;
                self.accumulate(grads, x, |s| {
                    for (dst, src) in s.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut dst[start..start + len], src);
                    }
                });
            }
            &Op::BiasAdd(a, b) => {
                let c = self.shape(b).channels;
                self.accumulate(grads, a, |s| add_into(s, g));
                self.accumulate(grads, b, |s| {
                    for px in g.chunks(c) {
                        add_into(s, px);
                    }
                });
            }
            &Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(grads, a, |s| {
                    for d in s.iter_mut() {
                        *d = *d + g0;
                    }
                });
            }
            Op::SoftmaxXent { inputs, row_len, labels, weights } => {
                let g0 = g[0];
                let mut logp = vec![T::zero(); *row_len];
                let mut r = 0;
                for v in inputs {
                    let data = self.value(*v).data();
                    let rows = data.len() / row_len;
                    let (lbl, wts) = (&labels[r..r + rows], &weights[r..r + rows]);
                    self.accumulate(grads, *v, |s| {
                        for (j, (row, dst)) in data.chunks(*row_len).zip(s.chunks_mut(*row_len)).enumerate() {
                            let w = wts[j];
                            if w == T::zero() {
                                continue;
                            }
                            ops::log_softmax_row(row, &mut logp);
                            for (c, d) in dst.iter_mut().enumerate() {
                                let p = logp[c].exp();
                                let y = if c == lbl[j] { T::one() } else { T::zero() };
                                *d = *d + g0 * w * (p - y);
                            }
                        }
                    });
                    r += rows;
                }
            }
            Op::SmoothL1 { inputs, targets, weights } => {
                let g0 = g[0];
                let mut i0 = 0;
                for v in inputs {
                    let data = self.value(*v).data();
                    self.accumulate(grads, *v, |s| {
                        for (j, (d, &p)) in s.iter_mut().zip(data).enumerate() {
                            let w = weights[(i0 + j) / 4];
                            if w != T::zero() {
                                *d = *d + g0 * w * ops::smooth_l1(p - targets[i0 + j]).1;
                            }
                        }
                    });
                    i0 += data.len();
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("finite difference step must be positive".into()));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    tape.backward(y)?;
    let analytic = tape.grad(xv).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let y = f(&mut t, v)?;
        Ok(t.value(y).data()[0].as_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = T::of(x.data()[i].as_f64() + eps);
        let mut minus = x.clone();
        minus.data_mut()[i] = T::of(x.data()[i].as_f64() - eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i].as_f64();
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 3, 2), 1.0, &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let s = t.scale(v, 3.5);
                Ok(t.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::<f64>::new();
        let v = t.leaf(Tensor::zeros(Shape::new(1, 1, 1, 2)), true);
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::randn(Shape::new(1, 4, 4, 2), 1.0, &mut rng), true);
        let k = t.leaf(Tensor::randn(Shape::new(3, 3, 2, 3), 1.0, &mut rng), true);
        let y = t.conv2d(x, k, KernelKind::Full, 1, Padding::Same).unwrap();
        let y = t.sigmoid(y);
        let l = t.sum(y);
        t.backward(l).unwrap();
        let first = (t.grad(x).unwrap().to_vec(), t.grad(k).unwrap().to_vec());
        t.zero_grads();
        assert!(t.grad(x).is_none());
        t.backward(l).unwrap();
        assert_eq!(first.0, t.grad(x).unwrap());
        assert_eq!(first.1, t.grad(k).unwrap());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::filled(Shape::new(1, 1, 1, 2), 2.0));
        let b = t.leaf(Tensor::filled(Shape::new(1, 1, 1, 2), 3.0), true);
        let p = t.mul(a, b).unwrap();
        let l = t.sum(p);
        t.backward(l).unwrap();
        assert!(t.grad(a).is_none());
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_gradient_routes_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = Tensor::<f64>::randn(Shape::new(1, 2, 2, 2), 1.0, &mut rng);
        let w = Tensor::<f64>::randn(Shape::new(1, 2, 2, 5), 1.0, &mut rng);
        let err = finite_diff_check(
            |t, a| {
                let bv = t.constant(b.clone());
                let c = t.concat_channels(a, bv)?;
                let wv = t.constant(w.clone());
                let p = t.mul(c, wv)?;
                let s = t.sigmoid(p);
                Ok(t.sum(s))
            },
            &Tensor::randn(Shape::new(1, 2, 2, 3), 1.0, &mut rng),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");

        // Gradient of sum(concat) puts ones in both inputs.
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(Shape::new(1, 1, 1, 2)), true);
        let bb = t.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)), true);
        let c = t.concat_channels(a, bb).unwrap();
        let s = t.slice_channels(c, 1, 2).unwrap();
        let l = t.sum(s);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0]);
        assert_eq!(t.grad(bb).unwrap(), &[1.0]);
    }

    #[test]
    fn softmax_xent_value_matches_hand() {
        let mut t = Tape::<f64>::new();
        let logits = t.leaf(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 0.0, 2.0, 0.0]).unwrap(), true);
        let l = t.softmax_cross_entropy(&[logits], 2, vec![0, 1], vec![1.0, 0.5]).unwrap();
        let expected = 2f64.ln() + 0.5 * (1.0 + 2f64.exp()).ln();
        assert!((t.value(l).data()[0] - expected).abs() < 1e-12);
    }
}
