//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! creation order, which is a topological order. [`Tape::backward`] walks the
//! records once in reverse and accumulates gradients into every node that
//! requires them. The tape is single-threaded (interior `RefCell`); values
//! read out of it are plain tensors and can cross threads.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{bail, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, broadcast_strides, numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryOp {
    Neg,
    Relu,
    Sqrt,
    Exp,
    Ln,
    Square,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: ElementwiseOp,
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: T,
    },
    Shift {
        x: usize,
    },
    Unary {
        kind: UnaryOp,
        x: usize,
    },
    Clamp {
        x: usize,
        lo: T,
        hi: T,
    },
    Reduce {
        kind: ReduceOp,
        x: usize,
        map: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Select {
        x: usize,
        index: usize,
    },
    Stack {
        xs: Vec<usize>,
    },
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Softmax {
        x: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<T>,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        out_ch: usize,
    },
    Deconv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        batch: usize,
        in_ch: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        x: usize,
        k: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { .. } => "elementwise",
            Op::Scale { .. } => "scale",
            Op::Shift { .. } => "shift",
            Op::Unary { .. } => "unary",
            Op::Clamp { .. } => "clamp",
            Op::Reduce { .. } => "reduce",
            Op::Reshape { .. } => "reshape",
            Op::Select { .. } => "select",
            Op::Stack { .. } => "stack",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::Deconv2d { .. } => "deconv2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::AvgPool2d { .. } => "avg_pool2d",
        }
    }
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records operations for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&self, mut tensor: Tensor<T>) -> Var<'_, T> {
        let rg = tensor.requires_grad();
        tensor.zero_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&self, mut tensor: Tensor<T>) -> Var<'_, T> {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn variable(&self, mut tensor: Tensor<T>) -> Var<'_, T> {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    fn value_rc(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`] for `v`, shaped like `v`.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new_unchecked(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    /// Accumulates `d(root)/d(node)` into every reachable node that requires
    /// gradients. Calling twice without [`Tape::zero_grad`] doubles them.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let mut grads: Vec<Option<Vec<T>>> = {
            let nodes = self.nodes.borrow();
            let r = &nodes[root.id];
            if r.value.numel() != 1 {
                bail!(Contract, "backward root must be scalar, got shape {:?}", r.value.shape());
            }
            if !r.requires_grad {
                bail!(Contract, "backward root does not require grad");
            }
            let mut grads = vec![None; root.id + 1];
            grads[root.id] = Some(vec![T::one()]);
            for id in (0..=root.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                for (input, gi) in input_grads(&nodes, id, &g)? {
                    if !nodes[input].requires_grad {
                        continue;
                    }
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                        slot => *slot = Some(gi),
                    }
                }
                grads[id] = Some(g);
            }
            grads
        };
        let mut nodes = self.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(grads.iter_mut()) {
            if let Some(g) = g.take() {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn unary_forward<T: Scalar>(kind: UnaryOp, v: T) -> T {
    match kind {
        UnaryOp::Neg => -v,
        UnaryOp::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        UnaryOp::Sqrt => v.sqrt(),
        UnaryOp::Exp => v.exp(),
        UnaryOp::Ln => v.ln(),
        UnaryOp::Square => v * v,
    }
}

/// Index of each element of `shape` inside the tensor produced by
/// reducing `axes` (keepdim layout).
fn reduce_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let out_strides = broadcast_strides(&kept, shape);
    (kept, offsets(shape, &out_strides))
}

/// Flat offsets produced by walking `shape` in row-major order with the
/// given per-axis strides.
fn offsets(shape: &[usize], st: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= st[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn sum_to<T: Scalar>(full: &[T], map: &[usize], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (&m, &v) in map.iter().zip(full) {
        out[m] += v;
    }
    out
}

fn input_grads<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
    let node = &nodes[id];
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let out = &node.value;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary { kind, a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let oshape = out.shape();
            let same = ta.shape() == oshape && tb.shape() == oshape;
            let (ma, mb) = if same {
                (Vec::new(), Vec::new())
            } else {
                (
                    offsets(oshape, &broadcast_strides(ta.shape(), oshape)),
                    offsets(oshape, &broadcast_strides(tb.shape(), oshape)),
                )
            };
            let at = |i: usize| if same { ta.data()[i] } else { ta.data()[ma[i]] };
            let bt = |i: usize| if same { tb.data()[i] } else { tb.data()[mb[i]] };
            let n = g.len();
            let (ga, gb): (Vec<T>, Vec<T>) = match kind {
                ElementwiseOp::Add => (g.to_vec(), g.to_vec()),
                ElementwiseOp::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                ElementwiseOp::Mul => (
                    (0..n).map(|i| g[i] * bt(i)).collect(),
                    (0..n).map(|i| g[i] * at(i)).collect(),
                ),
                ElementwiseOp::Div => (
                    (0..n).map(|i| g[i] / bt(i)).collect(),
                    (0..n)
                        .map(|i| {
                            let bv = bt(i);
                            -g[i] * at(i) / (bv * bv)
                        })
                        .collect(),
                ),
            };
            if same {
                vec![(*a, ga), (*b, gb)]
            } else {
                vec![
                    (*a, sum_to(&ga, &ma, ta.numel())),
                    (*b, sum_to(&gb, &mb, tb.numel())),
                ]
            }
        }
        Op::Scale { x, factor } => vec![(*x, g.iter().map(|&v| v * *factor).collect())],
        Op::Shift { x } => vec![(*x, g.to_vec())],
        Op::Unary { kind, x } => {
            let xs = val(*x).data();
            let ys = out.data();
            let gx = match kind {
                UnaryOp::Neg => g.iter().map(|&v| -v).collect(),
                UnaryOp::Relu => g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect(),
                UnaryOp::Sqrt => g
                    .iter()
                    .zip(ys)
                    .map(|(&gv, &yv)| gv / (T::lit(2.0) * yv))
                    .collect(),
                UnaryOp::Exp => g.iter().zip(ys).map(|(&gv, &yv)| gv * yv).collect(),
                UnaryOp::Ln => g.iter().zip(xs).map(|(&gv, &xv)| gv / xv).collect(),
                UnaryOp::Square => g
                    .iter()
                    .zip(xs)
                    .map(|(&gv, &xv)| T::lit(2.0) * xv * gv)
                    .collect(),
            };
            vec![(*x, gx)]
        }
        Op::Clamp { x, lo, hi } => {
            let xs = val(*x).data();
            let gx = g
                .iter()
                .zip(xs)
                .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                .collect();
            vec![(*x, gx)]
        }
        Op::Reduce {
            kind,
            x,
            map,
            count,
            argmax,
        } => {
            let n = val(*x).numel();
            let gx = match kind {
                ReduceOp::Sum => map.iter().map(|&m| g[m]).collect(),
                ReduceOp::Mean => {
                    let c = T::from_usize_lossy(*count);
                    map.iter().map(|&m| g[m] / c).collect()
                }
                ReduceOp::Max => {
                    let mut gx = vec![T::zero(); n];
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                    gx
                }
            };
            vec![(*x, gx)]
        }
        Op::Reshape { x } => vec![(*x, g.to_vec())],
        Op::Select { x, index } => {
            let n = val(*x).numel();
            let mut gx = vec![T::zero(); n];
            let chunk = g.len();
            gx[index * chunk..(index + 1) * chunk].copy_from_slice(g);
            vec![(*x, gx)]
        }
        Op::Stack { xs } => {
            let chunk = g.len() / xs.len();
            xs.iter()
                .enumerate()
                .map(|(i, &x)| (x, g[i * chunk..(i + 1) * chunk].to_vec()))
                .collect()
        }
        Op::MatMul { a, b, trans_b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = (ta.shape()[0], ta.shape()[1]);
            let n = out.shape()[1];
            let mut ga = vec![T::zero(); m * k];
            let mut gb = vec![T::zero(); tb.numel()];
            if *trans_b {
                // out = a b^T, b: [n,k]
                kernels::gemm_nn(m, k, n, g, tb.data(), &mut ga);
                kernels::gemm_tn(n, k, m, g, ta.data(), &mut gb);
            } else {
                // b: [k,n]
                kernels::gemm_nt(m, k, n, g, tb.data(), &mut ga);
                kernels::gemm_tn(k, n, m, ta.data(), g, &mut gb);
            }
            vec![(*a, ga), (*b, gb)]
        }
        Op::Softmax {
            x,
            outer,
            axis_len,
            inner,
        } => {
            let y = out.data();
            let mut gx = vec![T::zero(); y.len()];
            for o in 0..*outer {
                for i in 0..*inner {
                    let base = o * axis_len * inner + i;
                    let mut s = T::zero();
                    for a in 0..*axis_len {
                        let p = base + a * inner;
                        s += g[p] * y[p];
                    }
                    for a in 0..*axis_len {
                        let p = base + a * inner;
                        gx[p] = y[p] * (g[p] - s);
                    }
                }
            }
            vec![(*x, gx)]
        }
        Op::NormalizeRows { x, norms } => {
            let y = out.data();
            let d = y.len() / norms.len();
            let mut gx = vec![T::zero(); y.len()];
            for (r, &nrm) in norms.iter().enumerate() {
                if nrm == T::zero() {
                    continue;
                }
                let row = r * d..(r + 1) * d;
                let proj = kernels::dot(&y[row.clone()], &g[row.clone()]);
                for p in row {
                    gx[p] = (g[p] - y[p] * proj) / nrm;
                }
            }
            vec![(*x, gx)]
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            batch,
            out_ch,
        } => {
            let (tx, tw) = (val(*x), val(*w));
            let xs = tx.data();
            let ws = tw.data();
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let in_sz = geom.channels * geom.height * geom.width;
            let out_sz = out_ch * cols_n;
            let mut gx = vec![T::zero(); xs.len()];
            let mut gw = vec![T::zero(); ws.len()];
            let mut cols = vec![T::zero(); rows * cols_n];
            let mut dcols = vec![T::zero(); rows * cols_n];
            let need_x = nodes[*x].requires_grad;
            let need_w = nodes[*w].requires_grad;
            for s in 0..*batch {
                let gs = &g[s * out_sz..(s + 1) * out_sz];
                if need_w {
                    kernels::im2col(&xs[s * in_sz..(s + 1) * in_sz], geom, &mut cols);
                    kernels::gemm_nt(*out_ch, rows, cols_n, gs, &cols, &mut gw);
                }
                if need_x {
                    dcols.fill(T::zero());
                    kernels::gemm_tn(rows, cols_n, *out_ch, ws, gs, &mut dcols);
                    kernels::col2im(&dcols, geom, &mut gx[s * in_sz..(s + 1) * in_sz]);
                }
            }
            let mut res = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                res.push((*b, channel_sums(g, *batch, *out_ch, cols_n)));
            }
            res
        }
        Op::Deconv2d {
            x,
            w,
            b,
            geom,
            batch,
            in_ch,
        } => {
            // geom describes the adjoint convolution: output image -> input.
            let (tx, tw) = (val(*x), val(*w));
            let xs = tx.data();
            let ws = tw.data();
            let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
            let out_sz = geom.channels * geom.height * geom.width;
            let in_sz = in_ch * cols_n;
            let mut gx = vec![T::zero(); xs.len()];
            let mut gw = vec![T::zero(); ws.len()];
            let mut cols = vec![T::zero(); rows * cols_n];
            for s in 0..*batch {
                kernels::im2col(&g[s * out_sz..(s + 1) * out_sz], geom, &mut cols);
                kernels::gemm_nn(*in_ch, cols_n, rows, ws, &cols, &mut gx[s * in_sz..(s + 1) * in_sz]);
                kernels::gemm_nt(*in_ch, rows, cols_n, &xs[s * in_sz..(s + 1) * in_sz], &cols, &mut gw);
            }
            let mut res = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                res.push((*b, channel_sums(g, *batch, geom.channels, geom.height * geom.width)));
            }
            res
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = val(*x).shape();
            let (n, c) = (shape[0], shape[1]);
            let hw: usize = shape[2..].iter().product();
            let gam = val(*gamma).data();
            let count = T::from_usize_lossy(n * hw);
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for p in base..base + hw {
                        sum_g += g[p];
                        sum_gx += g[p] * xhat[p];
                    }
                }
                gb[ch] = sum_g;
                gg[ch] = sum_gx;
                let k = gam[ch] * inv_std[ch];
                for s in 0..n {
                    let base = (s * c + ch) * hw;
                    for p in base..base + hw {
                        gx[p] = if *train {
                            k * (g[p] - sum_g / count - xhat[p] * sum_gx / count)
                        } else {
                            k * g[p]
                        };
                    }
                }
            }
            vec![(*x, gx), (*gamma, gg), (*beta, gb)]
        }
        Op::MaxPool2d { x, argmax } => {
            let mut gx = vec![T::zero(); val(*x).numel()];
            for (o, &src) in argmax.iter().enumerate() {
                gx[src] += g[o];
            }
            vec![(*x, gx)]
        }
        Op::AvgPool2d { x, k } => {
            let shape = val(*x).shape();
            let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let (oh, ow) = (h / k, w / k);
            let planes = numel(&shape[..shape.len() - 2]);
            let inv = T::one() / T::from_usize_lossy(k * k);
            let mut gx = vec![T::zero(); val(*x).numel()];
            for p in 0..planes {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(p * h + y) * w + xx] = g[(p * oh + y / k) * ow + xx / k] * inv;
                    }
                }
            }
            vec![(*x, gx)]
        }
    })
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); ch];
    for s in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (s * ch + c) * plane;
            *o += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance per channel.
    pub var: Vec<T>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor<T> {
        (*self.tape.value_rc(self.id)).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_rc(self.id).shape().to_vec()
    }

    pub fn item(&self) -> Result<T> {
        self.tape.value_rc(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if !std::ptr::eq(self.tape, other.tape) {
            bail!(Contract, "vars belong to different tapes");
        }
        Ok(())
    }

    fn unary_node(&self, value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        self.tape.push(value, op, self.requires_grad())
    }

    pub fn elementwise(&self, kind: ElementwiseOp, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let a = self.tape.value_rc(self.id);
        let b = self.tape.value_rc(other.id);
        let f = |x: T, y: T| match kind {
            ElementwiseOp::Add => x + y,
            ElementwiseOp::Sub => x - y,
            ElementwiseOp::Mul => x * y,
            ElementwiseOp::Div => x / y,
        };
        if kind == ElementwiseOp::Div && b.data().iter().any(|&v| v == T::zero()) {
            bail!(Numeric, "division by exact zero");
        }
        let value = if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new_unchecked(a.shape().to_vec(), data)
        } else {
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let ma = offsets(&shape, &broadcast_strides(a.shape(), &shape));
            let mb = offsets(&shape, &broadcast_strides(b.shape(), &shape));
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(a.data()[i], b.data()[j]))
                .collect();
            Tensor::new_unchecked(shape, data)
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElementwiseOp::Add, other)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElementwiseOp::Sub, other)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElementwiseOp::Mul, other)
    }

    pub fn div(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(ElementwiseOp::Div, other)
    }

    /// Multiplies by a constant tensor that does not take part in
    /// differentiation (masks, dropout keeps).
    pub fn mul_const(&self, mask: Tensor<T>) -> Result<Var<'t, T>> {
        let m = self.tape.constant(mask);
        self.mul(m)
    }

    pub fn scale(&self, factor: T) -> Var<'t, T> {
        let v = self.tape.value_rc(self.id).map(|x| x * factor);
        self.unary_node(v, Op::Scale { x: self.id, factor })
    }

    pub fn add_scalar(&self, c: T) -> Var<'t, T> {
        let v = self.tape.value_rc(self.id).map(|x| x + c);
        self.unary_node(v, Op::Shift { x: self.id })
    }

    fn unary(&self, kind: UnaryOp) -> Result<Var<'t, T>> {
        let v = self.tape.value_rc(self.id).map(|x| unary_forward(kind, x));
        if matches!(kind, UnaryOp::Ln | UnaryOp::Sqrt) {
            v.check_finite(if kind == UnaryOp::Ln { "ln" } else { "sqrt" })?;
        }
        Ok(self.unary_node(v, Op::Unary { kind, x: self.id }))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Neg).expect("neg is total")
    }

    pub fn relu(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Relu).expect("relu is total")
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Square).expect("square is total")
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(UnaryOp::Exp).expect("exp is total")
    }

    pub fn sqrt(&self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn ln(&self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Ln)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Var<'t, T> {
        let v = self.tape.value_rc(self.id).map(|x| x.max(lo).min(hi));
        self.unary_node(v, Op::Clamp { x: self.id, lo, hi })
    }

    /// Reduces over `axes`. With `keepdim` the reduced axes stay as extent 1,
    /// otherwise they are removed.
    pub fn reduce(&self, kind: ReduceOp, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        let x = self.tape.value_rc(self.id);
        let shape = x.shape();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            bail!(Dimension, "axis {bad} out of range for shape {shape:?}");
        }
        let (kept, map) = reduce_map(shape, axes);
        let out_n = numel(&kept);
        let count = if out_n == 0 { 0 } else { x.numel() / out_n };
        if count == 0 {
            bail!(Dimension, "reduction over an empty extent");
        }
        let mut argmax = Vec::new();
        let data = match kind {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = sum_to(x.data(), &map, out_n);
                if kind == ReduceOp::Mean {
                    let c = T::from_usize_lossy(count);
                    acc.iter_mut().for_each(|v| *v /= c);
                }
                acc
            }
            ReduceOp::Max => {
                let mut best = vec![T::neg_infinity(); out_n];
                argmax = vec![usize::MAX; out_n];
                for (i, (&m, &v)) in map.iter().zip(x.data()).enumerate() {
                    if argmax[m] == usize::MAX || v > best[m] {
                        best[m] = v;
                        argmax[m] = i;
                    }
                }
                best
            }
        };
        let out_shape: Vec<usize> = if keepdim {
            kept
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let value = Tensor::new_unchecked(out_shape, data);
        Ok(self.unary_node(
            value,
            Op::Reduce {
                kind,
                x: self.id,
                map,
                count,
                argmax,
            },
        ))
    }

    pub fn sum_all(&self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceOp::Sum, &axes, false).expect("full reduction is valid")
    }

    pub fn mean_all(&self) -> Var<'t, T> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(ReduceOp::Mean, &axes, false).expect("full reduction is valid")
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Sum, axes, keepdim)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Var<'t, T>> {
        self.reduce(ReduceOp::Mean, axes, keepdim)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let v = self.tape.value_rc(self.id).reshape(shape)?;
        Ok(self.unary_node(v, Op::Reshape { x: self.id }))
    }

    /// Slice `index` of the leading axis, with that axis removed.
    pub fn select(&self, index: usize) -> Result<Var<'t, T>> {
        let x = self.tape.value_rc(self.id);
        let shape = x.shape();
        if shape.is_empty() || index >= shape[0] {
            bail!(Dimension, "select({index}) on shape {shape:?}");
        }
        let chunk = x.numel() / shape[0];
        let data = x.data()[index * chunk..(index + 1) * chunk].to_vec();
        let v = Tensor::new_unchecked(shape[1..].to_vec(), data);
        Ok(self.unary_node(v, Op::Select { x: self.id, index }))
    }

    /// Stacks equally shaped vars along a new leading axis.
    pub fn stack(vars: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = vars
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero tensors".into()))?;
        let shape = first.shape();
        let mut data = Vec::with_capacity(numel(&shape) * vars.len());
        let mut rg = false;
        for v in vars {
            first.same_tape(v)?;
            let t = first.tape.value_rc(v.id);
            if t.shape() != shape.as_slice() {
                bail!(Dimension, "stack shape {:?} vs {:?}", t.shape(), shape);
            }
            data.extend_from_slice(t.data());
            rg |= v.requires_grad();
        }
        let mut out_shape = vec![vars.len()];
        out_shape.extend_from_slice(&shape);
        let xs = vars.iter().map(|v| v.id).collect();
        Ok(first
            .tape
            .push(Tensor::new_unchecked(out_shape, data), Op::Stack { xs }, rg))
    }

    fn matmul_impl(&self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let a = self.tape.value_rc(self.id);
        let b = self.tape.value_rc(other.id);
        if a.rank() != 2 || b.rank() != 2 {
            bail!(Dimension, "matmul needs rank-2 operands, got {:?} and {:?}", a.shape(), b.shape());
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (kb, n) = if trans_b {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        if k != kb {
            bail!(Dimension, "matmul inner extents {k} vs {kb}");
        }
        let mut c = vec![T::zero(); m * n];
        if trans_b {
            kernels::gemm_nt(m, n, k, a.data(), b.data(), &mut c);
        } else {
            kernels::gemm_nn(m, n, k, a.data(), b.data(), &mut c);
        }
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            Tensor::new_unchecked(vec![m, n], c),
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.tape.value_rc(self.id);
        let shape = x.shape();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {axis} for shape {shape:?}");
        }
        let outer = numel(&shape[..axis]);
        let axis_len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xs = x.data();
        let mut y = vec![T::zero(); xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..axis_len {
                    mx = mx.max(xs[base + a * inner]);
                }
                let mut s = T::zero();
                for a in 0..axis_len {
                    let e = (xs[base + a * inner] - mx).exp();
                    y[base + a * inner] = e;
                    s += e;
                }
                for a in 0..axis_len {
                    y[base + a * inner] /= s;
                }
            }
        }
        let v = Tensor::new_unchecked(shape.to_vec(), y);
        Ok(self.unary_node(
            v,
            Op::Softmax {
                x: self.id,
                outer,
                axis_len,
                inner,
            },
        ))
    }

    /// Scales every row (last axis) to unit Euclidean norm. Zero rows stay
    /// zero and pass no gradient.
    pub fn normalize_rows(&self) -> Result<Var<'t, T>> {
        let x = self.tape.value_rc(self.id);
        let shape = x.shape();
        if shape.is_empty() {
            bail!(Dimension, "normalize_rows on a scalar");
        }
        let d = shape[shape.len() - 1];
        let xs = x.data();
        let rows = xs.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut y = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let n = kernels::dot(row, row).sqrt();
            norms.push(n);
            if n > T::zero() {
                for (o, &v) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / n;
                }
            }
        }
        let v = Tensor::new_unchecked(shape.to_vec(), y);
        Ok(self.unary_node(v, Op::NormalizeRows { x: self.id, norms }))
    }

    /// 2-D convolution. `self`: `[n,c,h,w]`, `weight`: `[oc,c,kh,kw]`,
    /// `bias`: `[oc]`.
    pub fn conv2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        let x = self.tape.value_rc(self.id);
        let w = self.tape.value_rc(weight.id);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            bail!(Dimension, "conv2d needs [n,c,h,w] and [oc,c,kh,kw], got {xs:?} and {ws:?}");
        }
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if c != ic {
            bail!(Dimension, "conv2d input has {c} channels, kernel expects {ic}");
        }
        let (Some(oh), Some(ow)) = (
            ConvGeom::out_extent(h, kh, stride, pad),
            ConvGeom::out_extent(wd, kw, stride, pad),
        ) else {
            bail!(
                Dimension,
                "conv2d output extent not integral for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, padding {pad}"
            );
        };
        let bias_t = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let bt = self.tape.value_rc(b.id);
                if bt.shape() != [oc] {
                    bail!(Dimension, "conv2d bias shape {:?}, expected [{oc}]", bt.shape());
                }
                Some(bt)
            }
            None => None,
        };
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            stride,
            pad,
            out_h: oh,
            out_w: ow,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_sz = c * h * wd;
        let out_sz = oc * cols_n;
        let mut out = vec![T::zero(); n * out_sz];
        let mut cols = vec![T::zero(); rows * cols_n];
        for s in 0..n {
            kernels::im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &geom, &mut cols);
            let dst = &mut out[s * out_sz..(s + 1) * out_sz];
            if let Some(bt) = &bias_t {
                for (o, chunk) in dst.chunks_exact_mut(cols_n).enumerate() {
                    chunk.fill(bt.data()[o]);
                }
            }
            kernels::gemm_nn(oc, cols_n, rows, w.data(), &cols, dst);
        }
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::new_unchecked(vec![n, oc, oh, ow], out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                batch: n,
                out_ch: oc,
            },
            rg,
        ))
    }

    /// Transposed convolution, the adjoint of [`Var::conv2d`] in its input.
    /// `self`: `[n,ic,h,w]`, `weight`: `[ic,oc,kh,kw]` (the layout of the
    /// convolution it transposes), `bias`: `[oc]`. Output extent is
    /// `(h-1)*stride - 2*pad + kh`.
    pub fn deconv2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&weight)?;
        let x = self.tape.value_rc(self.id);
        let w = self.tape.value_rc(weight.id);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            bail!(Dimension, "deconv2d needs [n,ic,h,w] and [ic,oc,kh,kw], got {xs:?} and {ws:?}");
        }
        let (n, ic, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (wic, oc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if ic != wic {
            bail!(Dimension, "deconv2d input has {ic} channels, kernel expects {wic}");
        }
        if stride == 0 {
            bail!(Dimension, "deconv2d stride must be positive");
        }
        let full_h = (h - 1) * stride + kh;
        let full_w = (wd - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            bail!(Dimension, "deconv2d padding {pad} consumes the whole output");
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let bias_t = match bias {
            Some(b) => {
                self.same_tape(&b)?;
                let bt = self.tape.value_rc(b.id);
                if bt.shape() != [oc] {
                    bail!(Dimension, "deconv2d bias shape {:?}, expected [{oc}]", bt.shape());
                }
                Some(bt)
            }
            None => None,
        };
        let geom = ConvGeom {
            channels: oc,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: wd,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_sz = ic * cols_n;
        let out_sz = oc * oh * ow;
        let mut out = vec![T::zero(); n * out_sz];
        let mut cols = vec![T::zero(); rows * cols_n];
        for s in 0..n {
            cols.fill(T::zero());
            kernels::gemm_tn(rows, cols_n, ic, w.data(), &x.data()[s * in_sz..(s + 1) * in_sz], &mut cols);
            let dst = &mut out[s * out_sz..(s + 1) * out_sz];
            kernels::col2im(&cols, &geom, dst);
            if let Some(bt) = &bias_t {
                for (o, chunk) in dst.chunks_exact_mut(oh * ow).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bt.data()[o]);
                }
            }
        }
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::new_unchecked(vec![n, oc, oh, ow], out),
            Op::Deconv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                batch: n,
                in_ch: ic,
            },
            rg,
        ))
    }

    fn bn_check(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>) -> Result<(Rc<Tensor<T>>, usize)> {
        self.same_tape(gamma)?;
        self.same_tape(beta)?;
        let x = self.tape.value_rc(self.id);
        if x.rank() < 2 {
            bail!(Dimension, "batch norm needs [n,c,...], got {:?}", x.shape());
        }
        let c = x.shape()[1];
        for p in [gamma, beta] {
            if self.tape.value_rc(p.id).shape() != [c] {
                bail!(Dimension, "batch norm parameter shape {:?}, expected [{c}]", p.shape());
            }
        }
        Ok((x, c))
    }

    fn bn_push(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        x: &Tensor<T>,
        mean: &[T],
        inv_std: Vec<T>,
        train: bool,
    ) -> Var<'t, T> {
        let shape = x.shape();
        let (n, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let gam = self.tape.value_rc(gamma.id);
        let bet = self.tape.value_rc(beta.id);
        let mut xhat = vec![T::zero(); x.numel()];
        let mut y = vec![T::zero(); x.numel()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for p in base..base + hw {
                    let xh = (x.data()[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = xh;
                    y[p] = gam.data()[ch] * xh + bet.data()[ch];
                }
            }
        }
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.tape.push(
            Tensor::new_unchecked(shape.to_vec(), y),
            Op::BatchNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
            rg,
        )
    }

    /// Batch normalization with moments taken over every axis except the
    /// channel axis 1: `gamma * (x - E[x]) / sqrt(Var[x] + eps) + beta`.
    pub fn batch_norm_train(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Var<'t, T>, BatchMoments<T>)> {
        let (x, c) = self.bn_check(&gamma, &beta)?;
        let shape = x.shape();
        let n = shape[0];
        let hw: usize = shape[2..].iter().product();
        let count = n * hw;
        if count <= 1 {
            bail!(
                Contract,
                "train-mode batch norm over a single value per channel (shape {shape:?})"
            );
        }
        let cnt = T::from_usize_lossy(count);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for smp in 0..n {
                let base = (smp * c + ch) * hw;
                s += x.data()[base..base + hw].iter().copied().sum::<T>();
            }
            let m = s / cnt;
            let mut v = T::zero();
            for smp in 0..n {
                let base = (smp * c + ch) * hw;
                for &xv in &x.data()[base..base + hw] {
                    v += (xv - m) * (xv - m);
                }
            }
            mean[ch] = m;
            var[ch] = v / cnt;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        if inv_std.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "batch norm with zero variance and eps = 0");
        }
        let out = self.bn_push(gamma, beta, &x, &mean, inv_std, true);
        Ok((out, BatchMoments { mean, var }))
    }

    /// Batch normalization with fixed (running) moments.
    pub fn batch_norm_eval(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var<'t, T>> {
        let (x, c) = self.bn_check(&gamma, &beta)?;
        if mean.len() != c || var.len() != c {
            bail!(Dimension, "running statistics of length {} / {} for {c} channels", mean.len(), var.len());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        if inv_std.iter().any(|v| !v.is_finite()) {
            bail!(Numeric, "batch norm with zero running variance and eps = 0");
        }
        Ok(self.bn_push(gamma, beta, &x, mean, inv_std, false))
    }

    /// Non-overlapping `k`x`k` max pooling over the two trailing axes.
    pub fn max_pool2d(&self, k: usize) -> Result<Var<'t, T>> {
        let x = self.tape.value_rc(self.id);
        let shape = x.shape();
        if shape.len() < 2 || k == 0 {
            bail!(Dimension, "max_pool2d({k}) on shape {shape:?}");
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % k != 0 || w % k != 0 {
            bail!(Dimension, "max_pool2d({k}) needs extents divisible by {k}, got {h}x{w}");
        }
        let (oh, ow) = (h / k, w / k);
        let planes = numel(&shape[..shape.len() - 2]);
        let xs = x.data();
        let mut y = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (0usize, T::neg_infinity());
                    let mut first = true;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (p * h + oy * k + dy) * w + ox * k + dx;
                            if first || xs[idx] > best.1 {
                                best = (idx, xs[idx]);
                                first = false;
                            }
                        }
                    }
                    argmax.push(best.0);
                    y.push(best.1);
                }
            }
        }
        let mut out_shape = shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let v = Tensor::new_unchecked(out_shape, y);
        Ok(self.unary_node(v, Op::MaxPool2d { x: self.id, argmax }))
    }

    /// Non-overlapping `k`x`k` mean pooling over the two trailing axes.
    pub fn avg_pool2d(&self, k: usize) -> Result<Var<'t, T>> {
        let x = self.tape.value_rc(self.id);
        let shape = x.shape();
        if shape.len() < 2 || k == 0 {
            bail!(Dimension, "avg_pool2d({k}) on shape {shape:?}");
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % k != 0 || w % k != 0 {
            bail!(Dimension, "avg_pool2d({k}) needs extents divisible by {k}, got {h}x{w}");
        }
        let (oh, ow) = (h / k, w / k);
        let planes = numel(&shape[..shape.len() - 2]);
        let inv = T::one() / T::from_usize_lossy(k * k);
        let xs = x.data();
        let mut y = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for yy in 0..h {
                for xx in 0..w {
                    y[(p * oh + yy / k) * ow + xx / k] += xs[(p * h + yy) * w + xx];
                }
            }
        }
        y.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.to_vec();
        let r = out_shape.len();
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let v = Tensor::new_unchecked(out_shape, y);
        Ok(self.unary_node(v, Op::AvgPool2d { x: self.id, k }))
    }

    /// Name of the operation that produced this var (diagnostics).
    pub fn op_name(&self) -> &'static str {
        self.tape.nodes.borrow()[self.id].op.name()
    }
}
