//! Tape-style reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each op appends a node
//! holding its output value; nodes are therefore stored in topological
//! order and [`Graph::backward`] walks them in reverse exactly once,
//! accumulating gradients additively across fan-out.
//!
//! ```
//! use etc_core::autodiff::Graph;
//! use etc_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::new(&[2], vec![1.0, 3.0]).unwrap().with_grad());
//! let y = g.mul(x, x).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 6.0]);
//! ```

mod gradcheck;
pub(crate) mod kernels;
pub mod special;

pub use gradcheck::grad_check;

use crate::error::{EtcError, Result};
use crate::tensor::{split_axis, Tensor};
use kernels::{bilinear_taps, col2im, gemm, im2col, Window};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Log,
    Exp,
    Softplus,
    Relu,
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
    Digamma,
    Trigamma,
    Lgamma,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Unary(UnaryKind, Var),
    Sum(Var),
    Mean(Var),
    SumAxis {
        a: Var,
        axis: usize,
    },
    Expand {
        a: Var,
        axis: usize,
    },
    Narrow {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    L2Norm {
        a: Var,
        axis: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
    },
    UpsampleNearest {
        a: Var,
        factor: usize,
    },
    UpsampleBilinear {
        a: Var,
        factor: usize,
    },
    MaxPool2d {
        a: Var,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Inserts a tensor as a leaf; it is differentiable iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    /// Inserts a non-differentiable leaf.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Copies `v`'s value into a new constant: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ---------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------

    /// Binary elementwise op. Shapes must be equal, or one side must hold a
    /// single value (scalar broadcast).
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = if ta.shape() == tb.shape() || tb.numel() == 1 {
            ta.shape().to_vec()
        } else if ta.numel() == 1 {
            tb.shape().to_vec()
        } else {
            return Err(EtcError::Dimension(format!(
                "{kind:?} of {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let n: usize = out_shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let at = |i: usize| if da.len() == 1 { da[0] } else { da[i] };
        let bt = |i: usize| if db.len() == 1 { db[0] } else { db[i] };
        if kind == BinaryKind::Div && db.contains(&0.0) {
            return Err(EtcError::Domain("division by a tensor containing 0".into()));
        }
        let out: Vec<f64> = match kind {
            BinaryKind::Add => (0..n).map(|i| at(i) + bt(i)).collect(),
            BinaryKind::Sub => (0..n).map(|i| at(i) - bt(i)).collect(),
            BinaryKind::Mul => (0..n).map(|i| at(i) * bt(i)).collect(),
            BinaryKind::Div => (0..n).map(|i| at(i) / bt(i)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(&out_shape, out)?;
        Ok(self.push(t, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let xs = x.data();
        let positive_only = matches!(
            kind,
            UnaryKind::Log | UnaryKind::Digamma | UnaryKind::Trigamma | UnaryKind::Lgamma
        );
        if positive_only {
            if let Some(bad) = xs.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(EtcError::Domain(format!(
                    "{kind:?} of non-positive value {bad}"
                )));
            }
        }
        if let UnaryKind::Pow(p) = kind {
            if p.fract() != 0.0 && xs.iter().any(|&v| v < 0.0) {
                return Err(EtcError::Domain(format!("pow({p}) of a negative value")));
            }
        }
        let f: fn(f64, f64) -> f64 = match kind {
            UnaryKind::Neg => |v, _| -v,
            UnaryKind::Log => |v, _| v.ln(),
            UnaryKind::Exp => |v, _| v.exp(),
            UnaryKind::Softplus => |v, _| softplus(v),
            UnaryKind::Relu => |v, _| v.max(0.0),
            UnaryKind::Pow(_) => f64::powf,
            UnaryKind::Scale(_) => |v, c| v * c,
            UnaryKind::AddScalar(_) => |v, c| v + c,
            UnaryKind::Digamma => |v, _| special::digamma(v),
            UnaryKind::Trigamma => |v, _| special::trigamma(v),
            UnaryKind::Lgamma => |v, _| special::lgamma(v),
        };
        let param = match kind {
            UnaryKind::Pow(c) | UnaryKind::Scale(c) | UnaryKind::AddScalar(c) => c,
            _ => 0.0,
        };
        let out: Vec<f64> = xs.iter().map(|&v| f(v, param)).collect();
        let t = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Unary(kind, a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary(UnaryKind::Pow(p), a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    pub fn digamma(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Digamma, a)
    }

    pub fn trigamma(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Trigamma, a)
    }

    pub fn lgamma(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Lgamma, a)
    }

    // ---------------------------------------------------------------
    // Reductions and shape ops
    // ---------------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.nodes[a.0].value.data();
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    fn check_axis(&self, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(EtcError::Dimension(format!(
                "axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(())
    }

    /// Sums along `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = &self.nodes[a.0].value;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xs = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let src = &xs[(o * n + k) * inner..(o * n + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { a, axis }, rg))
    }

    /// Repeats a size-1 `axis` `n` times.
    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = &self.nodes[a.0].value;
        if x.shape()[axis] != 1 {
            return Err(EtcError::Dimension(format!(
                "expand of axis {axis} with size {}",
                x.shape()[axis]
            )));
        }
        let (outer, _, inner) = split_axis(x.shape(), axis);
        let xs = x.data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xs[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = n;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Expand { a, axis }, rg))
    }

    /// Expands `a` (size 1 on `axis`) to match `like`'s size on that axis.
    pub fn expand_as(&mut self, a: Var, like: Var, axis: usize) -> Result<Var> {
        self.check_axis(like, axis)?;
        let n = self.shape(like)[axis];
        self.expand(a, axis, n)
    }

    /// Slice `start..start+len` of `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis)?;
        let x = &self.nodes[a.0].value;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        if len == 0 || start + len > n {
            return Err(EtcError::Dimension(format!(
                "narrow {start}..{} of axis with size {n}",
                start + len
            )));
        }
        let xs = x.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xs[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Narrow { a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| EtcError::Usage("concat of zero tensors".into()))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(EtcError::Dimension(format!(
                    "concat of {base:?} and {s:?} along axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let x = &self.nodes[p.0].value;
                let n = x.shape()[axis];
                out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// Euclidean norm along `axis`, keeping it with size 1. The gradient
    /// at a zero vector is taken to be zero.
    pub fn l2_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sq = {
            self.check_axis(a, axis)?;
            let x = &self.nodes[a.0].value;
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let xs = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        let v = xs[(o * n + k) * inner + i];
                        out[o * inner + i] += v * v;
                    }
                }
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = 1;
            Tensor::new(&shape, out.into_iter().map(f64::sqrt).collect())?
        };
        let rg = self.rg(a);
        Ok(self.push(sq, Op::L2Norm { a, axis }, rg))
    }

    // ---------------------------------------------------------------
    // Spatial ops (NCHW)
    // ---------------------------------------------------------------

    fn nchw(&self, a: Var, what: &str) -> Result<[usize; 4]> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(EtcError::Dimension(format!(
                "{what} expects NCHW input, got {s:?}"
            )));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    fn check_bias(&self, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(EtcError::Dimension(format!(
                    "bias shape {:?} for {channels} channels",
                    self.shape(b)
                )));
            }
        }
        Ok(())
    }

    fn add_bias(&self, out: &mut [f64], b: Option<Var>, n: usize, c: usize, plane: usize) {
        if let Some(b) = b {
            let bs = self.nodes[b.0].value.data();
            for i in 0..n {
                for (ch, &bv) in bs.iter().enumerate().take(c) {
                    let start = (i * c + ch) * plane;
                    out[start..start + plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
    }

    /// 2-D convolution; `w` is `(out_c, in_c, k, k)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.nchw(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(EtcError::Dimension(format!(
                "conv2d weight {ws:?} for input channels {c}"
            )));
        }
        let (oc, k) = (ws[0], ws[2]);
        self.check_bias(b, oc)?;
        let win = Window::new(h, wd, k, stride, padding).ok_or_else(|| {
            EtcError::Dimension(format!(
                "kernel {k} does not fit {h}x{wd} with padding {padding}"
            ))
        })?;
        let grid = win.grid();
        let rows = c * k * k;
        let mut out = vec![0.0; n * oc * grid];
        let mut cols = vec![0.0; rows * grid];
        {
            let xs = self.nodes[x.0].value.data();
            let wsd = self.nodes[w.0].value.data();
            for i in 0..n {
                im2col(
                    &xs[i * c * h * wd..(i + 1) * c * h * wd],
                    c,
                    &win,
                    &mut cols,
                );
                gemm(
                    oc,
                    rows,
                    grid,
                    wsd,
                    false,
                    &cols,
                    false,
                    0.0,
                    &mut out[i * oc * grid..(i + 1) * oc * grid],
                );
            }
        }
        self.add_bias(&mut out, b, n, oc, grid);
        let t = Tensor::new(&[n, oc, win.oh, win.ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::Conv2d { x, w, b, win }, rg))
    }

    /// Transposed 2-D convolution without padding; `w` is
    /// `(in_c, out_c, k, k)` and the output side is `(h - 1) * stride + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let [n, c, h, wd] = self.nchw(x, "conv_transpose2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c || ws[2] != ws[3] || stride == 0 {
            return Err(EtcError::Dimension(format!(
                "conv_transpose2d weight {ws:?} for input channels {c}"
            )));
        }
        let (oc, k) = (ws[1], ws[2]);
        self.check_bias(b, oc)?;
        let (oh, ow) = ((h - 1) * stride + k, (wd - 1) * stride + k);
        let win = Window::new(oh, ow, k, stride, 0).expect("output covers kernel");
        debug_assert_eq!((win.oh, win.ow), (h, wd));
        let grid = h * wd;
        let rows = oc * k * k;
        let plane = oh * ow;
        let mut out = vec![0.0; n * oc * plane];
        let mut cols = vec![0.0; rows * grid];
        {
            let xs = self.nodes[x.0].value.data();
            let wsd = self.nodes[w.0].value.data();
            for i in 0..n {
                gemm(
                    rows,
                    c,
                    grid,
                    wsd,
                    true,
                    &xs[i * c * grid..(i + 1) * c * grid],
                    false,
                    0.0,
                    &mut cols,
                );
                col2im(
                    &cols,
                    oc,
                    &win,
                    &mut out[i * oc * plane..(i + 1) * oc * plane],
                );
            }
        }
        self.add_bias(&mut out, b, n, oc, plane);
        let t = Tensor::new(&[n, oc, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, win }, rg))
    }

    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(a, "upsample_nearest")?;
        if factor == 0 {
            return Err(EtcError::Dimension("upsample factor 0".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xs = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for xo in 0..ow {
                    out.push(row[xo / factor]);
                }
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(t, Op::UpsampleNearest { a, factor }, rg))
    }

    /// Bilinear resize by an integer factor with half-pixel centers.
    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(a, "upsample_bilinear")?;
        if factor == 0 {
            return Err(EtcError::Dimension("upsample factor 0".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let xs = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let plane = &xs[p * h * w..(p + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(t, Op::UpsampleBilinear { a, factor }, rg))
    }

    /// Non-overlapping `k x k` max pooling; spatial dims must be divisible
    /// by `k`.
    pub fn maxpool2d(&mut self, a: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(a, "maxpool2d")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(EtcError::Dimension(format!("maxpool {k} on {h}x{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let xs = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = base + (oy * k + dy) * w + ox * k + dx;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(a);
        let t = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2d { a, argmax }, rg))
    }

    // ---------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------

    /// Reverse accumulation from a single-valued output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.nodes[out.0].value.numel() != 1 {
            return Err(EtcError::Usage(format!(
                "backward from non-scalar output of shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(buf);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let at = |j: usize| if av.len() == 1 { av[0] } else { av[j] };
                let bt = |j: usize| if bv.len() == 1 { bv[0] } else { bv[j] };
                let da = |j: usize| match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[j],
                    BinaryKind::Mul => g[j] * bt(j),
                    BinaryKind::Div => g[j] / bt(j),
                };
                let db = |j: usize| match kind {
                    BinaryKind::Add => g[j],
                    BinaryKind::Sub => -g[j],
                    BinaryKind::Mul => g[j] * at(j),
                    BinaryKind::Div => -g[j] * at(j) / (bt(j) * bt(j)),
                };
                let n = g.len();
                self.acc(grads, *a, |buf| {
                    if buf.len() == 1 && n > 1 {
                        buf[0] += (0..n).map(da).sum::<f64>();
                    } else {
                        buf.iter_mut().enumerate().for_each(|(j, d)| *d += da(j));
                    }
                });
                self.acc(grads, *b, |buf| {
                    if buf.len() == 1 && n > 1 {
                        buf[0] += (0..n).map(db).sum::<f64>();
                    } else {
                        buf.iter_mut().enumerate().for_each(|(j, d)| *d += db(j));
                    }
                });
            }
            Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                let kind = *kind;
                self.acc(grads, *a, |buf| {
                    for j in 0..buf.len() {
                        let d = match kind {
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Log => 1.0 / x[j],
                            UnaryKind::Exp => y[j],
                            UnaryKind::Softplus => sigmoid(x[j]),
                            UnaryKind::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Pow(p) => {
                                if p == 0.0 {
                                    0.0
                                } else {
                                    p * x[j].powf(p - 1.0)
                                }
                            }
                            UnaryKind::Scale(c) => c,
                            UnaryKind::AddScalar(_) => 1.0,
                            UnaryKind::Digamma => special::trigamma(x[j]),
                            UnaryKind::Trigamma => special::tetragamma(x[j]),
                            UnaryKind::Lgamma => special::digamma(x[j]),
                        };
                        buf[j] += g[j] * d;
                    }
                });
            }
            Op::Sum(a) => self.acc(grads, *a, |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => self.acc(grads, *a, |buf| {
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|d| *d += s);
            }),
            Op::SumAxis { a, axis } => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                self.acc(grads, *a, |buf| {
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                buf[(o * n + k) * inner + j] += g[o * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Expand { a, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.acc(grads, *a, |buf| {
                    for o in 0..outer {
                        for k in 0..n {
                            for j in 0..inner {
                                buf[o * inner + j] += g[(o * n + k) * inner + j];
                            }
                        }
                    }
                });
            }
            Op::Narrow { a, axis, start } => {
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                self.acc(grads, *a, |buf| {
                    for o in 0..outer {
                        let dst = &mut buf[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    self.acc(grads, p, |buf| {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            let dst = &mut buf[o * n * inner..(o + 1) * n * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += n;
                }
            }
            Op::L2Norm { a, axis } => {
                let x = self.nodes[a.0].value.data();
                let (outer, n, inner) = split_axis(self.shape(*a), *axis);
                self.acc(grads, *a, |buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let norm = y[o * inner + j];
                            if norm == 0.0 {
                                continue;
                            }
                            let s = g[o * inner + j] / norm;
                            for k in 0..n {
                                let idx = (o * n + k) * inner + j;
                                buf[idx] += s * x[idx];
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, win } => self.conv2d_backward(*x, *w, *b, win, node, g, grads),
            Op::ConvTranspose2d { x, w, b, win } => {
                self.conv_t2d_backward(*x, *w, *b, win, node, g, grads)
            }
            Op::UpsampleNearest { a, factor } => {
                let [n, c, h, w] = dims4(self.shape(*a));
                let (oh, ow) = (h * factor, w * factor);
                self.acc(grads, *a, |buf| {
                    for p in 0..n * c {
                        for yo in 0..oh {
                            for xo in 0..ow {
                                buf[p * h * w + (yo / factor) * w + xo / factor] +=
                                    g[p * oh * ow + yo * ow + xo];
                            }
                        }
                    }
                });
            }
            Op::UpsampleBilinear { a, factor } => {
                let [n, c, h, w] = dims4(self.shape(*a));
                let (oh, ow) = (h * factor, w * factor);
                let ty = bilinear_taps(h, oh);
                let tx = bilinear_taps(w, ow);
                self.acc(grads, *a, |buf| {
                    for p in 0..n * c {
                        let plane = &mut buf[p * h * w..(p + 1) * h * w];
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        for (yo, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (xo, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = gp[yo * ow + xo];
                                plane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                plane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                plane[y1 * w + x0] += gv * fy * (1.0 - fx);
                                plane[y1 * w + x1] += gv * fy * fx;
                            }
                        }
                    }
                });
            }
            Op::MaxPool2d { a, argmax } => self.acc(grads, *a, |buf| {
                for (j, &src) in argmax.iter().enumerate() {
                    buf[src] += g[j];
                }
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        win: &Window,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let [n, c, h, wd] = dims4(self.shape(x));
        let oc = node.value.shape()[1];
        let grid = win.grid();
        let rows = c * win.k * win.k;
        let xs = self.nodes[x.0].value.data();
        let wsd = self.nodes[w.0].value.data();
        if let Some(b) = b {
            self.acc(grads, b, |buf| bias_grad(buf, g, n, oc, grid));
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; rows * grid];
        let mut dw = vec![0.0; if need_w { oc * rows } else { 0 }];
        let mut dx = vec![0.0; if need_x { xs.len() } else { 0 }];
        for i in 0..n {
            let gi = &g[i * oc * grid..(i + 1) * oc * grid];
            if need_w {
                im2col(&xs[i * c * h * wd..(i + 1) * c * h * wd], c, win, &mut cols);
                gemm(oc, grid, rows, gi, false, &cols, true, 1.0, &mut dw);
            }
            if need_x {
                gemm(rows, oc, grid, wsd, true, gi, false, 0.0, &mut cols);
                col2im(&cols, c, win, &mut dx[i * c * h * wd..(i + 1) * c * h * wd]);
            }
        }
        if need_w {
            self.acc(grads, w, |buf| add_into(buf, &dw));
        }
        if need_x {
            self.acc(grads, x, |buf| add_into(buf, &dx));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_t2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        win: &Window,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let [n, c, h, wd] = dims4(self.shape(x));
        let oc = node.value.shape()[1];
        let plane = win.h * win.w;
        let grid = h * wd;
        let rows = oc * win.k * win.k;
        let xs = self.nodes[x.0].value.data();
        let wsd = self.nodes[w.0].value.data();
        if let Some(b) = b {
            self.acc(grads, b, |buf| bias_grad(buf, g, n, oc, plane));
        }
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        if !need_w && !need_x {
            return;
        }
        let mut cols = vec![0.0; rows * grid];
        let mut dw = vec![0.0; if need_w { c * rows } else { 0 }];
        let mut dx = vec![0.0; if need_x { xs.len() } else { 0 }];
        for i in 0..n {
            im2col(&g[i * oc * plane..(i + 1) * oc * plane], oc, win, &mut cols);
            if need_w {
                gemm(
                    c,
                    grid,
                    rows,
                    &xs[i * c * grid..(i + 1) * c * grid],
                    false,
                    &cols,
                    true,
                    1.0,
                    &mut dw,
                );
            }
            if need_x {
                gemm(
                    c,
                    rows,
                    grid,
                    wsd,
                    false,
                    &cols,
                    false,
                    0.0,
                    &mut dx[i * c * grid..(i + 1) * c * grid],
                );
            }
        }
        if need_w {
            self.acc(grads, w, |buf| add_into(buf, &dw));
        }
        if need_x {
            self.acc(grads, x, |buf| add_into(buf, &dx));
        }
    }
}

fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn bias_grad(buf: &mut [f64], g: &[f64], n: usize, c: usize, plane: usize) {
    for i in 0..n {
        for (ch, d) in buf.iter_mut().enumerate().take(c) {
            let start = (i * c + ch) * plane;
            *d += g[start..start + plane].iter().sum::<f64>();
        }
    }
}

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
