//! Rank-4 tensor engine with tape-based reverse-mode differentiation.
//!
//! Tensors live on a [`Tape`]; operations record enough state during the
//! forward pass (pool argmax, dropout masks, batch-norm statistics) for an
//! exact backward sweep in reverse topological order. The engine is generic
//! over the scalar type: training runs at `f32`, gradient verification at
//! `f64` where central finite differences are trustworthy.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Scalar types usable on the tape.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        f32::exp(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// (batch, channels, height, width)
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T: Scalar> {
    Leaf,
    Relu {
        x: TensorId,
    },
    Sigmoid {
        x: TensorId,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    TransposedConv2 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    MaxPool2 {
        x: TensorId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    Dropout {
        x: TensorId,
        mask: Vec<bool>,
        scale: T,
    },
    Concat {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        k: T,
    },
    Sum {
        x: TensorId,
    },
    WeightedBce {
        pred: TensorId,
        target: Vec<T>,
        bg_weight: T,
        eps: T,
    },
}

struct Node<T: Scalar> {
    shape: Shape,
    value: Vec<T>,
    grad: Vec<T>,
    op: Op<T>,
}

/// Records a forward computation for one backward sweep.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>) -> TensorId {
        debug_assert_eq!(value.len(), numel(shape));
        let n = value.len();
        self.nodes.push(Node {
            shape,
            value,
            grad: vec![T::ZERO; n],
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Create an input tensor.
    pub fn leaf(&mut self, shape: Shape, value: Vec<T>) -> TensorId {
        self.push(shape, value, Op::Leaf)
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> &[T] {
        &self.nodes[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad.iter_mut().for_each(|g| *g = T::ZERO);
        }
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        let v: Vec<T> = self.value(x)
            .iter()
            .map(|&a| if a > T::ZERO { a } else { T::ZERO })
            .collect();
        self.push(shape, v, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let shape = self.shape(x);
        let v: Vec<T> = self.value(x)
            .iter()
            .map(|&a| T::ONE / (T::ONE + (-a).exp()))
            .collect();
        self.push(shape, v, Op::Sigmoid { x })
    }

    /// 3x3 convolution, stride 1, same padding (one ring of zeros).
    ///
    /// `w` has shape (C_out, C_in, 3, 3); `b` shape (C_out, 1, 1, 1).
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let [n, c_in, h, wd] = self.shape(x);
        let [c_out, wc_in, kh, kw] = self.shape(w);
        if wc_in != c_in || kh != 3 || kw != 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("kernel ({c_out},{c_in},3,3)"),
                found: format!("({c_out},{wc_in},{kh},{kw})"),
            });
        }
        if self.shape(b)[0] != c_out {
            return Err(Error::ShapeMismatch {
                expected: format!("bias ({c_out},1,1,1)"),
                found: format!("{:?}", self.shape(b)),
            });
        }
        let out_shape = [n, c_out, h, wd];
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            n,
            c_in,
            c_out,
            h,
            wd,
        );
        Ok(self.push(out_shape, value, Op::Conv2d { x, w, b }))
    }

    /// 2x2 stride-2 transposed convolution (doubles H and W).
    ///
    /// `w` has shape (C_in, C_out, 2, 2); `b` shape (C_out, 1, 1, 1).
    pub fn transposed_conv2(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        let [n, c_in, h, wd] = self.shape(x);
        let [wc_in, c_out, kh, kw] = self.shape(w);
        if wc_in != c_in || kh != 2 || kw != 2 {
            return Err(Error::ShapeMismatch {
                expected: format!("kernel ({c_in},{c_out},2,2)"),
                found: format!("({wc_in},{c_out},{kh},{kw})"),
            });
        }
        let out_shape = [n, c_out, 2 * h, 2 * wd];
        let value = tconv2_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            n,
            c_in,
            c_out,
            h,
            wd,
        );
        Ok(self.push(out_shape, value, Op::TransposedConv2 { x, w, b }))
    }

    /// 2x2 max pooling, stride 2. Gradient flows to the first (row-major)
    /// maximal element of each window.
    pub fn maxpool2(&mut self, x: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.shape(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Invalid(format!(
                "maxpool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xin = self.value(x);
        let mut value = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &xin[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    value.push(best);
                    argmax.push((p * h * w + best_idx) as u32);
                }
            }
        }
        Ok(self.push([n, c, oh, ow], value, Op::MaxPool2 { x, argmax }))
    }

    /// Per-channel batch normalization.
    ///
    /// Train mode normalizes by batch statistics over (N, H, W) and updates
    /// `running_mean`/`running_var` in place; eval mode normalizes by the
    /// running statistics. `gamma`/`beta` have shape (1, C, 1, 1).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &mut [T],
        running_var: &mut [T],
        momentum: T,
        epsilon: T,
        mode: Mode,
    ) -> Result<TensorId> {
        let [n, c, h, w] = self.shape(x);
        if n * h * w == 0 {
            return Err(Error::Invalid("batchnorm on zero-size batch".into()));
        }
        if self.shape(gamma)[1] != c || running_mean.len() != c {
            return Err(Error::ShapeMismatch {
                expected: format!("{c} channels"),
                found: format!(
                    "gamma {:?}, running stats {}",
                    self.shape(gamma),
                    running_mean.len()
                ),
            });
        }
        let m = n * h * w;
        let plane = h * w;
        let xin = self.value(x);
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();

        let mut mean = vec![T::ZERO; c];
        let mut invstd = vec![T::ZERO; c];
        let train = mode == Mode::Train;
        if train {
            let minv = T::ONE / T::from_f64(m as f64);
            for ch in 0..c {
                let mut s = T::ZERO;
                for bi in 0..n {
                    let base = (bi * c + ch) * plane;
                    for &v in &xin[base..base + plane] {
                        s += v;
                    }
                }
                let mu = s * minv;
                let mut var = T::ZERO;
                for bi in 0..n {
                    let base = (bi * c + ch) * plane;
                    for &v in &xin[base..base + plane] {
                        let d = v - mu;
                        var += d * d;
                    }
                }
                let var = var * minv;
                mean[ch] = mu;
                invstd[ch] = T::ONE / (var + epsilon).sqrt();
                running_mean[ch] = (T::ONE - momentum) * running_mean[ch] + momentum * mu;
                running_var[ch] = (T::ONE - momentum) * running_var[ch] + momentum * var;
            }
        } else {
            for ch in 0..c {
                mean[ch] = running_mean[ch];
                invstd[ch] = T::ONE / (running_var[ch] + epsilon).sqrt();
            }
        }

        let mut xhat = vec![T::ZERO; xin.len()];
        let mut value = vec![T::ZERO; xin.len()];
        for bi in 0..n {
            for ch in 0..c {
                let base = (bi * c + ch) * plane;
                let (mu, is, g, be) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
                for k in 0..plane {
                    let xh = (xin[base + k] - mu) * is;
                    xhat[base + k] = xh;
                    value[base + k] = g * xh + be;
                }
            }
        }
        Ok(self.push(
            [n, c, h, w],
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            },
        ))
    }

    /// Inverted dropout: train mode zeroes with probability `rate` and scales
    /// survivors by 1/(1-rate); eval mode is the identity.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!("dropout rate {rate} not in [0,1)")));
        }
        let shape = self.shape(x);
        if mode == Mode::Eval || rate == 0.0 {
            let v = self.value(x).to_vec();
            return Ok(self.push(
                shape,
                v,
                Op::Dropout {
                    x,
                    mask: vec![true; numel(shape)],
                    scale: T::ONE,
                },
            ));
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<bool> = (0..numel(shape)).map(|_| rng.gen::<f64>() >= rate).collect();
        let v: Vec<T> = self.value(x)
            .iter()
            .zip(&mask)
            .map(|(&a, &keep)| if keep { a * scale } else { T::ZERO })
            .collect();
        Ok(self.push(shape, v, Op::Dropout { x, mask, scale }))
    }

    /// Concatenate along the channel axis, `a`'s channels first.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let [na, ca, ha, wa] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if na != nb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                expected: format!("({na},*,{ha},{wa})"),
                found: format!("({nb},*,{hb},{wb})"),
            });
        }
        let plane = ha * wa;
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = Vec::with_capacity((ca + cb) * na * plane);
        for bi in 0..na {
            value.extend_from_slice(&av[bi * ca * plane..(bi + 1) * ca * plane]);
            value.extend_from_slice(&bv[bi * cb * plane..(bi + 1) * cb * plane]);
        }
        Ok(self.push([na, ca + cb, ha, wa], value, Op::Concat { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(Error::ShapeMismatch {
                expected: format!("{sa:?}"),
                found: format!("{:?}", self.shape(b)),
            });
        }
        let v: Vec<T> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(sa, v, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(Error::ShapeMismatch {
                expected: format!("{sa:?}"),
                found: format!("{:?}", self.shape(b)),
            });
        }
        let v: Vec<T> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(sa, v, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, k: T) -> TensorId {
        let shape = self.shape(x);
        let v: Vec<T> = self.value(x).iter().map(|&a| a * k).collect();
        self.push(shape, v, Op::Scale { x, k })
    }

    /// Sum of all elements, as a (1,1,1,1) tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let mut s = T::ZERO;
        for &v in self.value(x) {
            s += v;
        }
        self.push([1, 1, 1, 1], vec![s], Op::Sum { x })
    }

    /// Class-weighted binary cross-entropy, mean over all pixels.
    ///
    /// `bg_weight` is w: the background term carries weight w, the
    /// foreground term 1-w. Predictions are clamped to [eps, 1-eps].
    pub fn weighted_bce(
        &mut self,
        pred: TensorId,
        target: &[T],
        bg_weight: T,
        eps: T,
    ) -> Result<TensorId> {
        let shape = self.shape(pred);
        if target.len() != numel(shape) {
            return Err(Error::ShapeMismatch {
                expected: format!("{} target values", numel(shape)),
                found: format!("{}", target.len()),
            });
        }
        if target.iter().any(|&c| !(c == T::ZERO || c == T::ONE)) {
            return Err(Error::Invalid("weighted_bce target must be binary".into()));
        }
        let w = bg_weight;
        let fw = T::ONE - w;
        let count = T::from_f64(target.len() as f64);
        let mut loss = T::ZERO;
        for (&p, &c) in self.value(pred).iter().zip(target) {
            let p = clamp(p, eps, T::ONE - eps);
            loss += -(fw * c * p.ln()) - w * (T::ONE - c) * (T::ONE - p).ln();
        }
        loss = loss / count;
        Ok(self.push(
            [1, 1, 1, 1],
            vec![loss],
            Op::WeightedBce {
                pred,
                target: target.to_vec(),
                bg_weight,
                eps,
            },
        ))
    }

    /// Reverse sweep from a scalar loss; gradients accumulate into every node.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].grad[0] += T::ONE;
        for i in (0..self.nodes.len()).rev() {
            let grad_out = std::mem::take(&mut self.nodes[i].grad);
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op, &grad_out);
            self.nodes[i].op = op;
            self.nodes[i].grad = grad_out;
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op<T>, gy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let xi = x.0;
                for (k, &g) in gy.iter().enumerate() {
                    if self.nodes[xi].value[k] > T::ZERO {
                        self.nodes[xi].grad[k] += g;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let xi = x.0;
                for (k, &g) in gy.iter().enumerate() {
                    let s = self.nodes[i].value[k];
                    self.nodes[xi].grad[k] += g * s * (T::ONE - s);
                }
            }
            Op::Conv2d { x, w, b } => {
                let [n, c_in, h, wd] = self.nodes[x.0].shape;
                let c_out = self.nodes[w.0].shape[0];
                let (dx, dw, db) = conv2d_backward(
                    gy,
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    n,
                    c_in,
                    c_out,
                    h,
                    wd,
                );
                accumulate(&mut self.nodes[x.0].grad, &dx);
                accumulate(&mut self.nodes[w.0].grad, &dw);
                accumulate(&mut self.nodes[b.0].grad, &db);
            }
            Op::TransposedConv2 { x, w, b } => {
                let [n, c_in, h, wd] = self.nodes[x.0].shape;
                let c_out = self.nodes[w.0].shape[1];
                let (dx, dw, db) = tconv2_backward(
                    gy,
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    n,
                    c_in,
                    c_out,
                    h,
                    wd,
                );
                accumulate(&mut self.nodes[x.0].grad, &dx);
                accumulate(&mut self.nodes[w.0].grad, &dw);
                accumulate(&mut self.nodes[b.0].grad, &db);
            }
            Op::MaxPool2 { x, argmax } => {
                let xi = x.0;
                for (k, &src) in argmax.iter().enumerate() {
                    self.nodes[xi].grad[src as usize] += gy[k];
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
                train,
            } => {
                let [n, c, h, w] = self.nodes[x.0].shape;
                let plane = h * w;
                let m = n * plane;
                let gv = self.nodes[gamma.0].value.clone();
                for ch in 0..c {
                    let mut sum_dy = T::ZERO;
                    let mut sum_dy_xhat = T::ZERO;
                    for bi in 0..n {
                        let base = (bi * c + ch) * plane;
                        for k in 0..plane {
                            let dy = gy[base + k];
                            sum_dy += dy;
                            sum_dy_xhat += dy * xhat[base + k];
                        }
                    }
                    self.nodes[beta.0].grad[ch] += sum_dy;
                    self.nodes[gamma.0].grad[ch] += sum_dy_xhat;
                    let g = gv[ch];
                    let is = invstd[ch];
                    if *train {
                        let minv = T::ONE / T::from_f64(m as f64);
                        for bi in 0..n {
                            let base = (bi * c + ch) * plane;
                            for k in 0..plane {
                                let dy = gy[base + k];
                                let xh = xhat[base + k];
                                self.nodes[x.0].grad[base + k] +=
                                    g * is * (dy - (sum_dy + xh * sum_dy_xhat) * minv);
                            }
                        }
                    } else {
                        for bi in 0..n {
                            let base = (bi * c + ch) * plane;
                            for k in 0..plane {
                                self.nodes[x.0].grad[base + k] += gy[base + k] * g * is;
                            }
                        }
                    }
                }
            }
            Op::Dropout { x, mask, scale } => {
                let xi = x.0;
                for k in 0..gy.len() {
                    if mask[k] {
                        self.nodes[xi].grad[k] += gy[k] * *scale;
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.nodes[a.0].shape;
                let cb = self.nodes[b.0].shape[1];
                let plane = h * w;
                for bi in 0..n {
                    let out_base = bi * (ca + cb) * plane;
                    for k in 0..ca * plane {
                        self.nodes[a.0].grad[bi * ca * plane + k] += gy[out_base + k];
                    }
                    for k in 0..cb * plane {
                        self.nodes[b.0].grad[bi * cb * plane + k] +=
                            gy[out_base + ca * plane + k];
                    }
                }
            }
            Op::Add { a, b } => {
                accumulate(&mut self.nodes[a.0].grad, gy);
                accumulate(&mut self.nodes[b.0].grad, gy);
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                for k in 0..gy.len() {
                    self.nodes[a.0].grad[k] += gy[k] * bv[k];
                    self.nodes[b.0].grad[k] += gy[k] * av[k];
                }
            }
            Op::Scale { x, k } => {
                let xi = x.0;
                for (g, &dy) in self.nodes[xi].grad.iter_mut().zip(gy) {
                    *g += dy * *k;
                }
            }
            Op::Sum { x } => {
                let dy = gy[0];
                for g in self.nodes[x.0].grad.iter_mut() {
                    *g += dy;
                }
            }
            Op::WeightedBce {
                pred,
                target,
                bg_weight,
                eps,
            } => {
                let dy = gy[0];
                let w = *bg_weight;
                let fw = T::ONE - w;
                let count = T::from_f64(target.len() as f64);
                let pv = self.nodes[pred.0].value.clone();
                for (k, (&p, &c)) in pv.iter().zip(target).enumerate() {
                    let p = clamp(p, *eps, T::ONE - *eps);
                    let g = (-(fw * c) / p + w * (T::ONE - c) / (T::ONE - p)) / count;
                    self.nodes[pred.0].grad[k] += dy * g;
                }
            }
        }
    }
}

#[inline]
fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn accumulate<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
) -> Vec<T> {
    let plane = h * wd;
    let mut out = vec![T::ZERO; n * c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, op)| {
        let bi = idx / c_out;
        let co = idx % c_out;
        op.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let xp = &x[(bi * c_in + ci) * plane..(bi * c_in + ci + 1) * plane];
            let wk = &w[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = wk[ky * 3 + kx];
                    // output rows y where input row y+ky-1 is valid
                    let y_lo = 1usize.saturating_sub(ky);
                    let y_hi = if ky == 2 { h - 1 } else { h };
                    let x_lo = 1usize.saturating_sub(kx);
                    let x_hi = if kx == 2 { wd - 1 } else { wd };
                    for y in y_lo..y_hi {
                        let iy = y + ky - 1;
                        let orow = y * wd;
                        let irow = iy * wd + x_lo + kx - 1;
                        let ov = &mut op[orow + x_lo..orow + x_hi];
                        let iv = &xp[irow..irow + (x_hi - x_lo)];
                        for (o, &v) in ov.iter_mut().zip(iv) {
                            *o += wv * v;
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    gy: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = h * wd;

    // dx: correlate gy with the flipped kernel
    let mut dx = vec![T::ZERO; n * c_in * plane];
    dx.par_chunks_mut(plane).enumerate().for_each(|(idx, dp)| {
        let bi = idx / c_in;
        let ci = idx % c_in;
        for co in 0..c_out {
            let gp = &gy[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane];
            let wk = &w[(co * c_in + ci) * 9..(co * c_in + ci + 1) * 9];
            for ky in 0..3usize {
                for kx in 0..3usize {
                    let wv = wk[ky * 3 + kx];
                    // d x[u,v] += w[ky,kx] * gy[u-ky+1, v-kx+1]
                    let u_lo = if ky == 0 { 0 } else { ky - 1 };
                    let u_hi = if ky == 2 { h } else { h + ky - 1 };
                    let v_lo = if kx == 0 { 0 } else { kx - 1 };
                    let v_hi = if kx == 2 { wd } else { wd + kx - 1 };
                    for u in u_lo..u_hi {
                        let oy = u + 1 - ky;
                        let drow = u * wd;
                        let grow = oy * wd + v_lo + 1 - kx;
                        let dv = &mut dp[drow + v_lo..drow + v_hi];
                        let gv = &gp[grow..grow + (v_hi - v_lo)];
                        for (d, &g) in dv.iter_mut().zip(gv) {
                            *d += wv * g;
                        }
                    }
                }
            }
        }
    });

    // dw and db
    let mut dw = vec![T::ZERO; c_out * c_in * 9];
    let mut db = vec![T::ZERO; c_out];
    let per_co: Vec<(Vec<T>, T)> = (0..c_out)
        .into_par_iter()
        .map(|co| {
            let mut dwc = vec![T::ZERO; c_in * 9];
            let mut dbc = T::ZERO;
            for bi in 0..n {
                let gp = &gy[(bi * c_out + co) * plane..(bi * c_out + co + 1) * plane];
                for &g in gp {
                    dbc += g;
                }
                for ci in 0..c_in {
                    let xp = &x[(bi * c_in + ci) * plane..(bi * c_in + ci + 1) * plane];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let y_lo = 1usize.saturating_sub(ky);
                            let y_hi = if ky == 2 { h - 1 } else { h };
                            let x_lo = 1usize.saturating_sub(kx);
                            let x_hi = if kx == 2 { wd - 1 } else { wd };
                            let mut acc = T::ZERO;
                            for y in y_lo..y_hi {
                                let iy = y + ky - 1;
                                let grow = y * wd;
                                let irow = iy * wd + x_lo + kx - 1;
                                let gvr = &gp[grow + x_lo..grow + x_hi];
                                let xvr = &xp[irow..irow + (x_hi - x_lo)];
                                for (&g, &v) in gvr.iter().zip(xvr) {
                                    acc += g * v;
                                }
                            }
                            dwc[ci * 9 + ky * 3 + kx] += acc;
                        }
                    }
                }
            }
            (dwc, dbc)
        })
        .collect();
    for (co, (dwc, dbc)) in per_co.into_iter().enumerate() {
        dw[co * c_in * 9..(co + 1) * c_in * 9].copy_from_slice(&dwc);
        db[co] = dbc;
    }
    (dx, dw, db)
}

#[allow(clippy::too_many_arguments)]
fn tconv2_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * wd);
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let mut out = vec![T::ZERO; n * c_out * out_plane];
    out.par_chunks_mut(out_plane).enumerate().for_each(|(idx, op)| {
        let bi = idx / c_out;
        let co = idx % c_out;
        op.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..c_in {
            let xp = &x[(bi * c_in + ci) * in_plane..(bi * c_in + ci + 1) * in_plane];
            let wk = &w[(ci * c_out + co) * 4..(ci * c_out + co + 1) * 4];
            for y in 0..h {
                for xx in 0..wd {
                    let v = xp[y * wd + xx];
                    let base = (2 * y) * ow + 2 * xx;
                    op[base] += v * wk[0];
                    op[base + 1] += v * wk[1];
                    op[base + ow] += v * wk[2];
                    op[base + ow + 1] += v * wk[3];
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
fn tconv2_backward<T: Scalar>(
    gy: &[T],
    x: &[T],
    w: &[T],
    n: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    wd: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (2 * h, 2 * wd);
    let in_plane = h * wd;
    let out_plane = oh * ow;

    let mut dx = vec![T::ZERO; n * c_in * in_plane];
    dx.par_chunks_mut(in_plane).enumerate().for_each(|(idx, dp)| {
        let bi = idx / c_in;
        let ci = idx % c_in;
        for co in 0..c_out {
            let gp = &gy[(bi * c_out + co) * out_plane..(bi * c_out + co + 1) * out_plane];
            let wk = &w[(ci * c_out + co) * 4..(ci * c_out + co + 1) * 4];
            for y in 0..h {
                for xx in 0..wd {
                    let base = (2 * y) * ow + 2 * xx;
                    dp[y * wd + xx] += gp[base] * wk[0]
                        + gp[base + 1] * wk[1]
                        + gp[base + ow] * wk[2]
                        + gp[base + ow + 1] * wk[3];
                }
            }
        }
    });

    let mut dw = vec![T::ZERO; c_in * c_out * 4];
    let mut db = vec![T::ZERO; c_out];
    for bi in 0..n {
        for co in 0..c_out {
            let gp = &gy[(bi * c_out + co) * out_plane..(bi * c_out + co + 1) * out_plane];
            for &g in gp {
                db[co] += g;
            }
            for ci in 0..c_in {
                let xp = &x[(bi * c_in + ci) * in_plane..(bi * c_in + ci + 1) * in_plane];
                let wk = &mut dw[(ci * c_out + co) * 4..(ci * c_out + co + 1) * 4];
                for y in 0..h {
                    for xx in 0..wd {
                        let v = xp[y * wd + xx];
                        let base = (2 * y) * ow + 2 * xx;
                        wk[0] += v * gp[base];
                        wk[1] += v * gp[base + 1];
                        wk[2] += v * gp[base + ow];
                        wk[3] += v * gp[base + ow + 1];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} over {} coords (tol {:.1e}) -> {}",
            self.name,
            self.max_rel_error,
            self.checked,
            self.tolerance,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Compare analytic gradients against central finite differences at `f64`.
///
/// `build` constructs a scalar loss from leaves holding copies of `inputs`;
/// gradients are checked for every coordinate of every input.
pub fn gradient_check<F>(
    name: &str,
    inputs: &[(Shape, Vec<f64>)],
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>) -> Result<(TensorId, Vec<TensorId>)>,
{
    let eval = |points: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        for ((shape, _), vals) in inputs.iter().zip(points) {
            tape.leaf(*shape, vals.clone());
        }
        let (loss, _) = build(&mut tape)?;
        let v = tape.value(loss)[0];
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name}: loss is non-finite")));
        }
        Ok(v)
    };

    // analytic pass
    let mut tape = Tape::new();
    let mut leaf_ids = Vec::new();
    for (shape, vals) in inputs {
        leaf_ids.push(tape.leaf(*shape, vals.clone()));
    }
    let (loss, checked_ids) = build(&mut tape)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = checked_ids.iter().map(|&id| tape.grad(id).to_vec()).collect();

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (which, &id) in checked_ids.iter().enumerate() {
        let leaf_pos = leaf_ids
            .iter()
            .position(|&l| l == id)
            .ok_or_else(|| Error::Invalid("checked tensor is not an input leaf".into()))?;
        for k in 0..base[leaf_pos].len() {
            let x0 = base[leaf_pos][k];
            let h = 1e-6 * x0.abs().max(1.0);
            let mut plus = base.clone();
            plus[leaf_pos][k] = x0 + h;
            let mut minus = base.clone();
            minus[leaf_pos][k] = x0 - h;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[which][k];
            if !fd.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("{name}: non-finite gradient")));
            }
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        tolerance,
        checked,
        pass: max_rel <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn relu_and_sigmoid_values() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 1, 3], vec![-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s)[1], 0.5);
        assert!(t.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[1.0; 4]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let mut t: Tape<f64> = Tape::new();
        let vals = vec![1.0, -2.0, 0.5, 3.0];
        let x = t.leaf([1, 1, 2, 2], vals.clone());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let loss = t.scale(s, 0.5);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), vals.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 2, 2], vec![0.0; 4]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 1, 2], vec![1.0, 2.0]);
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        // grads accumulate; the loss seed is re-applied each call
        assert!(t.grad(x)[0] >= 2.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut t: Tape<f64> = Tape::new();
        let vals = rand_vec(&mut rng(), 16);
        let x = t.leaf([1, 1, 4, 4], vals.clone());
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // center tap
        let w = t.leaf([1, 1, 3, 3], k);
        let b = t.leaf([1, 1, 1, 1], vec![0.0]);
        let y = t.conv2d(x, w, b).unwrap();
        assert_eq!(t.value(y), vals.as_slice());
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 3, 3], vec![1.0; 9]);
        let w = t.leaf([1, 1, 3, 3], vec![1.0; 9]);
        let b = t.leaf([1, 1, 1, 1], vec![0.0]);
        let y = t.conv2d(x, w, b).unwrap();
        assert_eq!(t.value(y)[4], 9.0); // center sees the full window
        assert_eq!(t.value(y)[0], 4.0); // corner sees a 2x2 window
    }

    #[test]
    fn conv2d_channel_mismatch_rejected() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 2, 4, 4], vec![0.0; 32]);
        let w = t.leaf([1, 3, 3, 3], vec![0.0; 27]);
        let b = t.leaf([1, 1, 1, 1], vec![0.0]);
        assert!(t.conv2d(x, w, b).is_err());
    }

    #[test]
    fn maxpool_basics() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = t.maxpool2(x).unwrap();
        assert_eq!(t.value(y), &[4.0]);

        let mut t2: Tape<f64> = Tape::new();
        let c = t2.leaf([1, 1, 2, 2], vec![5.0; 4]);
        let y2 = t2.maxpool2(c).unwrap();
        assert_eq!(t2.value(y2), &[5.0]);
        let s = t2.sum(y2);
        t2.backward(s).unwrap();
        // tie-break: gradient to the first (row-major) element
        assert_eq!(t2.grad(c), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_shape_and_odd_dims() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 64, 112], vec![0.0; 64 * 112]);
        let y = t.maxpool2(x).unwrap();
        assert_eq!(t.shape(y), [1, 1, 32, 56]);
        let odd = t.leaf([1, 1, 3, 4], vec![0.0; 12]);
        assert!(t.maxpool2(odd).is_err());
    }

    #[test]
    fn tconv_shape_and_single_pixel() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 8, 14], vec![0.0; 112]);
        let w = t.leaf([1, 2, 2, 2], vec![0.1; 8]);
        let b = t.leaf([2, 1, 1, 1], vec![0.0; 2]);
        let y = t.transposed_conv2(x, w, b).unwrap();
        assert_eq!(t.shape(y), [1, 2, 16, 28]);

        let mut t2: Tape<f64> = Tape::new();
        let x = t2.leaf([1, 1, 1, 1], vec![3.0]);
        let w = t2.leaf([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t2.leaf([1, 1, 1, 1], vec![0.0]);
        let y = t2.transposed_conv2(x, w, b).unwrap();
        assert_eq!(t2.value(y), &[3.0, 6.0, 9.0, 12.0]);
    }

    #[test]
    fn batchnorm_standardizes_in_train_mode() {
        let mut t: Tape<f64> = Tape::new();
        let mut r = rng();
        let vals = rand_vec(&mut r, 2 * 3 * 4 * 4);
        let x = t.leaf([2, 3, 4, 4], vals);
        let gamma = t.leaf([1, 3, 1, 1], vec![1.0; 3]);
        let beta = t.leaf([1, 3, 1, 1], vec![0.0; 3]);
        let mut rm = vec![0.0; 3];
        let mut rv = vec![1.0; 3];
        let y = t
            .batchnorm(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-8, Mode::Train)
            .unwrap();
        let out = t.value(y);
        let plane = 16;
        for ch in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for bi in 0..2 {
                let base = (bi * 3 + ch) * plane;
                for k in 0..plane {
                    s += out[base + k];
                    s2 += out[base + k] * out[base + k];
                }
            }
            let m = s / 32.0;
            let var = s2 / 32.0 - m * m;
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        // running stats moved away from init
        assert!(rm.iter().any(|&v| v != 0.0) || rv.iter().any(|&v| v != 1.0));
    }

    #[test]
    fn batchnorm_identity_on_standardized_input() {
        // zero-mean unit-variance input with gamma=1, beta=0 passes through
        let mut t: Tape<f64> = Tape::new();
        let vals = vec![-1.0, 1.0, -1.0, 1.0];
        let x = t.leaf([1, 1, 2, 2], vals.clone());
        let gamma = t.leaf([1, 1, 1, 1], vec![1.0]);
        let beta = t.leaf([1, 1, 1, 1], vec![0.0]);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = t
            .batchnorm(x, gamma, beta, &mut rm, &mut rv, 0.1, 1e-12, Mode::Train)
            .unwrap();
        for (a, b) in t.value(y).iter().zip(&vals) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn dropout_contracts() {
        let mut t: Tape<f64> = Tape::new();
        let vals = rand_vec(&mut rng(), 64);
        let x = t.leaf([1, 1, 8, 8], vals.clone());
        let mut r = rng();
        let y = t.dropout(x, 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(t.value(y), vals.as_slice());
        let z = t.dropout(x, 0.9, Mode::Eval, &mut r).unwrap();
        assert_eq!(t.value(z), vals.as_slice());
        assert!(t.dropout(x, 1.0, Mode::Train, &mut r).is_err());
    }

    #[test]
    fn dropout_rate_statistics() {
        let n = 100_000;
        let rate = 0.3;
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf([1, 1, 1000, 100], vec![1.0; n]);
        let mut r = rng();
        let y = t.dropout(x, rate, Mode::Train, &mut r).unwrap();
        let zeroed = t.value(y).iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        let se = (rate * (1.0 - rate) / n as f64).sqrt();
        assert!(
            (zeroed - rate).abs() < 3.0 * se,
            "zeroed fraction {zeroed} vs rate {rate}"
        );
    }

    #[test]
    fn dropout_deterministic_per_seed() {
        let run = || {
            let mut t: Tape<f32> = Tape::new();
            let x = t.leaf([1, 1, 8, 8], vec![1.0; 64]);
            let mut r = ChaCha8Rng::seed_from_u64(99);
            let y = t.dropout(x, 0.4, Mode::Train, &mut r).unwrap();
            t.value(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn concat_ordering_and_backward() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf([1, 2, 4, 4], vec![1.0; 32]);
        let b = t.leaf([1, 3, 4, 4], vec![2.0; 48]);
        let y = t.concat_channels(a, b).unwrap();
        assert_eq!(t.shape(y), [1, 5, 4, 4]);
        assert_eq!(t.value(y)[0], 1.0);
        assert_eq!(t.value(y)[32], 2.0);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(a).iter().all(|&g| g == 1.0));
        assert!(t.grad(b).iter().all(|&g| g == 1.0));

        let mut t2: Tape<f64> = Tape::new();
        let a = t2.leaf([1, 1, 4, 4], vec![0.0; 16]);
        let c = t2.leaf([1, 1, 2, 2], vec![0.0; 4]);
        assert!(t2.concat_channels(a, c).is_err());
    }

    #[test]
    fn gradcheck_identity_and_sigmoid() {
        let mut r = rng();
        let point = rand_vec(&mut r, 12);
        let rep = gradient_check(
            "identity",
            &[([1, 1, 3, 4], point.clone())],
            1e-9,
            |tape| {
                let x = TensorId(0);
                let s = tape.sum(x);
                Ok((s, vec![x]))
            },
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        let rep = gradient_check("sigmoid", &[([1, 1, 3, 4], point)], 1e-6, |tape| {
            let x = TensorId(0);
            let s = tape.sigmoid(x);
            let l = tape.sum(s);
            Ok((l, vec![x]))
        })
        .unwrap();
        assert!(rep.pass, "{rep}");
    }

    #[test]
    fn gradcheck_detects_wrong_backward_rule() {
        // forward multiplies by 3 but the recorded op claims a factor of 2,
        // so the analytic gradient is wrong and the check must fail
        let rep = gradient_check(
            "wrong-rule",
            &[([1, 1, 2, 2], vec![0.3, -0.4, 0.9, 0.1])],
            1e-4,
            |tape| {
                let x = TensorId(0);
                let v: Vec<f64> = tape.value(x).iter().map(|&a| a * 3.0).collect();
                let y = tape.push([1, 1, 2, 2], v, Op::Scale { x, k: 2.0 });
                let l = tape.sum(y);
                Ok((l, vec![x]))
            },
        )
        .unwrap();
        assert!(!rep.pass, "wrong backward rule slipped through: {rep}");
    }

    #[test]
    fn gradcheck_all_primitives() {
        let mut r = rng();
        // conv2d: input + weights + bias
        let xi = rand_vec(&mut r, 2 * 2 * 6 * 6);
        let wi = rand_vec(&mut r, 3 * 2 * 9);
        let bi = rand_vec(&mut r, 3);
        let rep = gradient_check(
            "conv2d",
            &[
                ([2, 2, 6, 6], xi),
                ([3, 2, 3, 3], wi),
                ([3, 1, 1, 1], bi),
            ],
            1e-4,
            |tape| {
                let (x, w, b) = (TensorId(0), TensorId(1), TensorId(2));
                let y = tape.conv2d(x, w, b)?;
                let s = tape.sigmoid(y);
                let l = tape.sum(s);
                Ok((l, vec![x, w, b]))
            },
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        // transposed conv
        let xi = rand_vec(&mut r, 2 * 4 * 4);
        let wi = rand_vec(&mut r, 2 * 3 * 4);
        let bi = rand_vec(&mut r, 3);
        let rep = gradient_check(
            "transposed_conv2",
            &[
                ([1, 2, 4, 4], xi),
                ([2, 3, 2, 2], wi),
                ([3, 1, 1, 1], bi),
            ],
            1e-4,
            |tape| {
                let (x, w, b) = (TensorId(0), TensorId(1), TensorId(2));
                let y = tape.transposed_conv2(x, w, b)?;
                let s = tape.sigmoid(y);
                let l = tape.sum(s);
                Ok((l, vec![x, w, b]))
            },
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        // batchnorm (train mode)
        let xi = rand_vec(&mut r, 2 * 2 * 4 * 4);
        let gi = vec![1.2, 0.7];
        let be = vec![0.1, -0.3];
        let rep = gradient_check(
            "batchnorm",
            &[([2, 2, 4, 4], xi), ([1, 2, 1, 1], gi), ([1, 2, 1, 1], be)],
            1e-4,
            |tape| {
                let (x, g, b) = (TensorId(0), TensorId(1), TensorId(2));
                let mut rm = vec![0.0; 2];
                let mut rv = vec![1.0; 2];
                let y = tape.batchnorm(x, g, b, &mut rm, &mut rv, 0.1, 1e-5, Mode::Train)?;
                let s = tape.sigmoid(y);
                let l = tape.sum(s);
                Ok((l, vec![x, g, b]))
            },
        )
        .unwrap();
        assert!(rep.pass, "{rep}");

        // maxpool through sigmoid (away from ties)
        let xi: Vec<f64> = (0..32).map(|i| (i as f64) * 0.13 - 2.0).collect();
        let rep = gradient_check("maxpool2", &[([1, 2, 4, 4], xi)], 1e-4, |tape| {
            let x = TensorId(0);
            let y = tape.maxpool2(x)?;
            let s = tape.sigmoid(y);
            let l = tape.sum(s);
            Ok((l, vec![x]))
        })
        .unwrap();
        assert!(rep.pass, "{rep}");

        // relu away from the kink
        let xi: Vec<f64> = rand_vec(&mut r, 16)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let rep = gradient_check("relu", &[([1, 1, 4, 4], xi)], 1e-4, |tape| {
            let x = TensorId(0);
            let y = tape.relu(x);
            let l = tape.sum(y);
            Ok((l, vec![x]))
        })
        .unwrap();
        assert!(rep.pass, "{rep}");
    }
}
