//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] holding its value, its
//! inputs and enough saved state to run the backward rule. Nodes only ever
//! reference earlier nodes, so recording order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! ```
//! use painlarks::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(&Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Gelu,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryOp,
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Shift {
        x: Var,
    },
    Sum {
        x: Var,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Stack {
        xs: Vec<Var>,
    },
    Select {
        x: Var,
        index: usize,
    },
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        spec: Conv2dSpec,
    },
    Conv1d {
        input: Var,
        kernel: Var,
        pad: usize,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Source offset of each output element of a permutation, in output order.
fn permute_offsets(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = numel(shape);
    let mut offsets = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        offsets.push(off);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            off += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    T::of(0.5) * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient of the last backward pass; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); self.node(v).value.len()])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Records a copy of `t` as an input of the pass.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        self.constant(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn binary(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.value(a).len(), self.value(b).len());
        let shape = if self.shape(a) == self.shape(b) {
            self.shape(a).to_vec()
        } else if nb == 1 {
            self.shape(a).to_vec()
        } else if na == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(Error::shape(
                "elementwise",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        };
        let n = numel(&shape);
        let av = self.value(a);
        let bv = self.value(b);
        let out: Vec<T> = (0..n)
            .map(|i| {
                let x = av[if na == 1 { 0 } else { i }];
                let y = bv[if nb == 1 { 0 } else { i }];
                match kind {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                }
            })
            .collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, kind: UnaryOp, x: Var) -> Var {
        let out: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| match kind {
                UnaryOp::Gelu => gelu(v),
                UnaryOp::Relu => v.max(T::zero()),
                UnaryOp::Sigmoid => sigmoid(v),
                UnaryOp::Tanh => v.tanh(),
                UnaryOp::Exp => v.exp(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, rg, Op::Unary { kind, x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Gelu, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, rg, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, shift: T) -> Var {
        let out = self.value(x).iter().map(|&v| v + shift).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, rg, Op::Shift { x })
    }

    // ---- reductions -----------------------------------------------------

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Vec::new(), vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "mean_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, out, rg, Op::MeanAxis { x, axis }))
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let xv = self.value(x);
        let out = permute_offsets(&shape, perm)
            .into_iter()
            .map(|o| xv[o])
            .collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape(x)),
            ));
        }
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(xs);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Stacks equally shaped inputs along a new leading axis.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(numel(&base) * xs.len());
        for &v in xs {
            if self.shape(v) != base.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {base:?}", self.shape(v)),
                ));
            }
            out.extend_from_slice(self.value(v));
        }
        let mut shape = vec![xs.len()];
        shape.extend_from_slice(&base);
        let rg = self.any_grad(xs);
        Ok(self.push(shape, out, rg, Op::Stack { xs: xs.to_vec() }))
    }

    /// Slice `index` of the leading axis.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::shape(
                "select",
                format!("index {index} out of range for {shape:?}"),
            ));
        }
        let inner = numel(&shape[1..]);
        let out = self.value(x)[index * inner..(index + 1) * inner].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape[1..].to_vec(), out, rg, Op::Select { x, index }))
    }

    /// Adds `bias[c]` to every element whose coordinate along `axis` is `c`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} vs input {shape:?} on axis {axis}", self.shape(bias)),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut out = xv.to_vec();
        for o in 0..outer {
            for (c, &b) in bv.iter().enumerate().take(len) {
                let start = (o * len + c) * inner;
                out[start..start + inner].iter_mut().for_each(|v| *v += b);
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(shape, out, rg, Op::AddBias { x, bias, axis }))
    }

    // ---- normalization --------------------------------------------------

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 {
            return Err(Error::shape("layer_norm", "normalized axis is empty"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs channels {c}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let rows = xv.len() / c;
        let inv_c = T::one() / T::of(c as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- convolutions ---------------------------------------------------

    /// 2-D convolution of `[C_in, H, W]` by `[C_out, C_in / groups, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, spec: Conv2dSpec) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() != 3 || sk.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?} must be [C,H,W] and kernel {sk:?} [C_out,C_in/g,kh,kw]"),
            ));
        }
        let Conv2dSpec { stride, pad, groups } = spec;
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, cin_g, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
        if stride == 0 || groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!("input {si:?} and kernel {sk:?} inconsistent with stride {stride}, groups {groups}"),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let xv = self.value(input);
        let kv = self.value(kernel);
        let cout_g = cout / groups;
        let mut out = vec![T::zero(); cout * ho * wo];
        for oc in 0..cout {
            let g = oc / cout_g;
            let oplane = &mut out[oc * ho * wo..(oc + 1) * ho * wo];
            for icl in 0..cin_g {
                let ic = g * cin_g + icl;
                let iplane = &xv[ic * h * w..(ic + 1) * h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kv[((oc * cin_g + icl) * kh + ky) * kw + kx];
                        if wgt == T::zero() {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *o += wgt * irow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(vec![cout, ho, wo], out, rg, Op::Conv2d { input, kernel, spec }))
    }

    /// Convolution along the leading (time) axis of `[T, ..., C_in]` with a
    /// `[C_out, C_in, k]` kernel. Middle axes are independent positions.
    pub fn conv1d_temporal(&mut self, input: Var, kernel: Var, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        if si.len() < 2 || sk.len() != 3 || sk[1] != *si.last().unwrap() {
            return Err(Error::shape(
                "conv1d_temporal",
                format!("input {si:?} must be [T,...,C_in] and kernel {sk:?} [C_out,C_in,k]"),
            ));
        }
        let t = si[0];
        let cin = sk[1];
        let (cout, k) = (sk[0], sk[2]);
        if t + 2 * pad < k {
            return Err(Error::shape(
                "conv1d_temporal",
                format!("kernel length {k} exceeds padded sequence length {}", t + 2 * pad),
            ));
        }
        let positions = numel(&si[1..si.len() - 1]);
        let to = t + 2 * pad - k + 1;
        let xv = self.value(input);
        let kv = self.value(kernel);
        // [k][C_in][C_out] so the innermost loop is contiguous in output channels.
        let mut kt = vec![T::zero(); k * cin * cout];
        for oc in 0..cout {
            for ic in 0..cin {
                for j in 0..k {
                    kt[(j * cin + ic) * cout + oc] = kv[(oc * cin + ic) * k + j];
                }
            }
        }
        let mut out = vec![T::zero(); to * positions * cout];
        for tp in 0..to {
            for j in 0..k {
                let ts = tp + j;
                if ts < pad || ts - pad >= t {
                    continue;
                }
                let ts = ts - pad;
                for n in 0..positions {
                    let xrow = &xv[(ts * positions + n) * cin..(ts * positions + n + 1) * cin];
                    let orow = &mut out[(tp * positions + n) * cout..(tp * positions + n + 1) * cout];
                    for (ic, &xval) in xrow.iter().enumerate() {
                        if xval == T::zero() {
                            continue;
                        }
                        let krow = &kt[(j * cin + ic) * cout..(j * cin + ic + 1) * cout];
                        for (o, &kw) in orow.iter_mut().zip(krow) {
                            *o += kw * xval;
                        }
                    }
                }
            }
        }
        let mut shape = si;
        shape[0] = to;
        *shape.last_mut().unwrap() = cout;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(shape, out, rg, Op::Conv1d { input, kernel, pad }))
    }

    // ---- probability ----------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (shape, out) = self.softmax_rows(x, false)?;
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::Softmax { x }))
    }

    /// Log-softmax over the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (shape, out) = self.softmax_rows(x, true)?;
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, rg, Op::LogSoftmax { x }))
    }

    fn softmax_rows(&self, x: Var, log: bool) -> Result<(Vec<usize>, Vec<T>)> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for (row, orow) in xv.chunks(c).zip(out.chunks_mut(c)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - m).exp()).sum();
            let lz = z.ln();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = if log { v - m - lz } else { (v - m).exp() / z };
            }
        }
        Ok((shape, out))
    }

    /// `out[b] = x[b, index[b]]` for a `[B, K]` input.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != index.len() || index.iter().any(|&i| i >= shape[1]) {
            return Err(Error::shape(
                "pick",
                format!("indices {index:?} do not address rows of {shape:?}"),
            ));
        }
        let k = shape[1];
        let xv = self.value(x);
        let out = index.iter().enumerate().map(|(b, &i)| xv[b * k + i]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(
            vec![index.len()],
            out,
            rg,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node reachable from `loss`
    /// that requires a gradient. The tape cannot be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward called on a consumed tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backprop(before, node, g);
        }
        Ok(())
    }
}

fn add_grad<T: Scalar>(nodes: &mut [Node<T>], v: Var, contrib: &[T]) {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return;
    }
    match &mut n.grad {
        Some(g) => {
            for (a, &c) in g.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => n.grad = Some(contrib.to_vec()),
    }
}

/// Mutable gradient buffer of `v`, zero-initialized on first touch.
fn grad_buf<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Vec<T>> {
    let n = &mut nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(n.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop<T: Scalar>(nodes: &mut [Node<T>], node: &Node<T>, g: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
            let n = nodes[b.0].shape[1];
            if nodes[a.0].requires_grad {
                let bv = &nodes[b.0].value;
                let mut da = vec![T::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    }
                }
                add_grad(nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                let av = std::mem::take(&mut nodes[a.0].value);
                if let Some(db) = grad_buf(nodes, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av[i * k + p];
                            if aip == T::zero() {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += aip * gv;
                            }
                        }
                    }
                }
                nodes[a.0].value = av;
            }
        }
        Op::Binary { kind, a, b } => {
            let na = nodes[a.0].value.len();
            let nb = nodes[b.0].value.len();
            let len = g.len();
            let at = |i: usize, n: usize| if n == 1 { 0 } else { i };
            if nodes[a.0].requires_grad {
                let mut da = vec![T::zero(); na];
                for i in 0..len {
                    let d = match kind {
                        BinaryOp::Add | BinaryOp::Sub => g[i],
                        BinaryOp::Mul => g[i] * nodes[b.0].value[at(i, nb)],
                    };
                    da[at(i, na)] += d;
                }
                add_grad(nodes, *a, &da);
            }
            if nodes[b.0].requires_grad {
                let mut db = vec![T::zero(); nb];
                for i in 0..len {
                    let d = match kind {
                        BinaryOp::Add => g[i],
                        BinaryOp::Sub => -g[i],
                        BinaryOp::Mul => g[i] * nodes[a.0].value[at(i, na)],
                    };
                    db[at(i, nb)] += d;
                }
                add_grad(nodes, *b, &db);
            }
        }
        Op::Unary { kind, x } => {
            let xv = &nodes[x.0].value;
            let y = &node.value;
            let dx: Vec<T> = (0..g.len())
                .map(|i| {
                    let local = match kind {
                        UnaryOp::Gelu => gelu_grad(xv[i]),
                        UnaryOp::Relu => {
                            if xv[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Sigmoid => y[i] * (T::one() - y[i]),
                        UnaryOp::Tanh => T::one() - y[i] * y[i],
                        UnaryOp::Exp => y[i],
                    };
                    g[i] * local
                })
                .collect();
            add_grad(nodes, *x, &dx);
        }
        Op::Scale { x, factor } => {
            let dx: Vec<T> = g.iter().map(|&v| v * *factor).collect();
            add_grad(nodes, *x, &dx);
        }
        Op::Shift { x } | Op::Reshape { x } => add_grad(nodes, *x, g),
        Op::Sum { x } => {
            let dx = vec![g[0]; nodes[x.0].value.len()];
            add_grad(nodes, *x, &dx);
        }
        Op::MeanAxis { x, axis } => {
            let (outer, len, inner) = split_axis(&nodes[x.0].shape, *axis);
            let inv = T::one() / T::of(len as f64);
            if let Some(dx) = grad_buf(nodes, *x) {
                for o in 0..outer {
                    let grow = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let start = (o * len + l) * inner;
                        for (d, &gv) in dx[start..start + inner].iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            let offsets = permute_offsets(&nodes[x.0].shape, perm);
            if let Some(dx) = grad_buf(nodes, *x) {
                for (&o, &gv) in offsets.iter().zip(g) {
                    dx[o] += gv;
                }
            }
        }
        Op::Concat { xs, axis } => {
            let out_shape = &node.shape;
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &v in xs {
                let len = nodes[v.0].shape[*axis];
                if let Some(dx) = grad_buf(nodes, v) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for (d, &gv) in dx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[src..src + len * inner])
                        {
                            *d += gv;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Stack { xs } => {
            let chunk = g.len() / xs.len();
            for (i, &v) in xs.iter().enumerate() {
                add_grad(nodes, v, &g[i * chunk..(i + 1) * chunk]);
            }
        }
        Op::Select { x, index } => {
            let chunk = g.len();
            if let Some(dx) = grad_buf(nodes, *x) {
                for (d, &gv) in dx[index * chunk..(index + 1) * chunk].iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::AddBias { x, bias, axis } => {
            add_grad(nodes, *x, g);
            if nodes[bias.0].requires_grad {
                let (outer, len, inner) = split_axis(&node.shape, *axis);
                let mut db = vec![T::zero(); len];
                for o in 0..outer {
                    for (c, d) in db.iter_mut().enumerate() {
                        let start = (o * len + c) * inner;
                        *d += g[start..start + inner].iter().copied().sum::<T>();
                    }
                }
                add_grad(nodes, *bias, &db);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = *node.shape.last().unwrap();
            let rows = g.len() / c;
            let inv_c = T::one() / T::of(c as f64);
            if nodes[gamma.0].requires_grad || nodes[beta.0].requires_grad {
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        dgamma[j] += g[r * c + j] * xhat[r * c + j];
                        dbeta[j] += g[r * c + j];
                    }
                }
                add_grad(nodes, *gamma, &dgamma);
                add_grad(nodes, *beta, &dbeta);
            }
            if nodes[x.0].requires_grad {
                let gv = nodes[gamma.0].value.clone();
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let d = g[r * c + j] * gv[j];
                        mean_d += d;
                        mean_dh += d * xhat[r * c + j];
                    }
                    mean_d *= inv_c;
                    mean_dh *= inv_c;
                    for j in 0..c {
                        let d = g[r * c + j] * gv[j];
                        dx[r * c + j] = inv_std[r] * (d - mean_d - xhat[r * c + j] * mean_dh);
                    }
                }
                add_grad(nodes, *x, &dx);
            }
        }
        Op::Conv2d { input, kernel, spec } => {
            let si = nodes[input.0].shape.clone();
            let sk = nodes[kernel.0].shape.clone();
            let (h, w) = (si[1], si[2]);
            let (cout, cin_g, kh, kw) = (sk[0], sk[1], sk[2], sk[3]);
            let (ho, wo) = (node.shape[1], node.shape[2]);
            let Conv2dSpec { stride, pad, groups } = *spec;
            let cout_g = cout / groups;
            let mut dx = nodes[input.0]
                .requires_grad
                .then(|| vec![T::zero(); nodes[input.0].value.len()]);
            let mut dk = nodes[kernel.0]
                .requires_grad
                .then(|| vec![T::zero(); nodes[kernel.0].value.len()]);
            let xv = &nodes[input.0].value;
            let kv = &nodes[kernel.0].value;
            for oc in 0..cout {
                let grp = oc / cout_g;
                let gplane = &g[oc * ho * wo..(oc + 1) * ho * wo];
                for icl in 0..cin_g {
                    let ic = grp * cin_g + icl;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let kidx = ((oc * cin_g + icl) * kh + ky) * kw + kx;
                            let wgt = kv[kidx];
                            let mut acc = T::zero();
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = (ic * h + iy as usize) * w;
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let gv = gplane[oy * wo + ox];
                                    acc += gv * xv[base + ix as usize];
                                    if let Some(dx) = dx.as_mut() {
                                        dx[base + ix as usize] += gv * wgt;
                                    }
                                }
                            }
                            if let Some(dk) = dk.as_mut() {
                                dk[kidx] += acc;
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                add_grad(nodes, *input, &dx);
            }
            if let Some(dk) = dk {
                add_grad(nodes, *kernel, &dk);
            }
        }
        Op::Conv1d { input, kernel, pad } => {
            let si = nodes[input.0].shape.clone();
            let sk = nodes[kernel.0].shape.clone();
            let t = si[0];
            let (cout, cin, k) = (sk[0], sk[1], sk[2]);
            let positions = numel(&si[1..si.len() - 1]);
            let to = node.shape[0];
            let mut dx = nodes[input.0]
                .requires_grad
                .then(|| vec![T::zero(); nodes[input.0].value.len()]);
            let mut dk = nodes[kernel.0]
                .requires_grad
                .then(|| vec![T::zero(); nodes[kernel.0].value.len()]);
            let xv = &nodes[input.0].value;
            let kv = &nodes[kernel.0].value;
            for tp in 0..to {
                for j in 0..k {
                    let ts = tp + j;
                    if ts < *pad || ts - pad >= t {
                        continue;
                    }
                    let ts = ts - pad;
                    for n in 0..positions {
                        let grow = &g[(tp * positions + n) * cout..(tp * positions + n + 1) * cout];
                        let xoff = (ts * positions + n) * cin;
                        for (oc, &gv) in grow.iter().enumerate() {
                            if gv == T::zero() {
                                continue;
                            }
                            for ic in 0..cin {
                                let kidx = (oc * cin + ic) * k + j;
                                if let Some(dx) = dx.as_mut() {
                                    dx[xoff + ic] += gv * kv[kidx];
                                }
                                if let Some(dk) = dk.as_mut() {
                                    dk[kidx] += gv * xv[xoff + ic];
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dx) = dx {
                add_grad(nodes, *input, &dx);
            }
            if let Some(dk) = dk {
                add_grad(nodes, *kernel, &dk);
            }
        }
        Op::Softmax { x } => {
            let c = *node.shape.last().unwrap();
            let y = &node.value;
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..g.len() / c {
                let s = r * c;
                let dot: T = (s..s + c).map(|i| g[i] * y[i]).sum();
                for i in s..s + c {
                    dx[i] = y[i] * (g[i] - dot);
                }
            }
            add_grad(nodes, *x, &dx);
        }
        Op::LogSoftmax { x } => {
            let c = *node.shape.last().unwrap();
            let y = &node.value;
            let mut dx = vec![T::zero(); g.len()];
            for r in 0..g.len() / c {
                let s = r * c;
                let gsum: T = g[s..s + c].iter().copied().sum();
                for i in s..s + c {
                    dx[i] = g[i] - y[i].exp() * gsum;
                }
            }
            add_grad(nodes, *x, &dx);
        }
        Op::Pick { x, index } => {
            let k = nodes[x.0].shape[1];
            if let Some(dx) = grad_buf(nodes, *x) {
                for (b, &i) in index.iter().enumerate() {
                    dx[b * k + i] += g[b];
                }
            }
        }
    }
}
