use std::f64::consts::PI;

use super::svd::svd3_vjp;
use super::tensor::{bidx, broadcast_shape, reduce_to, Tensor};
use crate::error::{Error, Result};
use crate::tensor3::{svd3, Mat3, Svd3, Vec3};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Adjoints of each input, in order, given the output adjoint.
    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    ClampRange(Var, f64, f64),
    Gelu(Var),
    SumCols(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    GatherRows(Var, Vec<usize>),
    Linear(Var, Var, Var),
    MatMul3(Var, Var),
    Transpose3(Var),
    Det3(Var),
    Diag3(Var),
    Svd3(Var),
    Select(Vec<bool>, Var, Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) | Op::MatMul3(a, b) | Op::Select(_, a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Powf(a, _)
            | Op::ClampMin(a, _)
            | Op::ClampRange(a, _, _)
            | Op::Gelu(a)
            | Op::SumCols(a)
            | Op::Sum(a)
            | Op::Slice(a, _)
            | Op::GatherRows(a, _)
            | Op::Transpose3(a)
            | Op::Det3(a)
            | Op::Diag3(a)
            | Op::Svd3(a) => vec![*a],
            Op::Linear(x, w, b) => vec![*x, *w, *b],
            Op::Concat(vs) | Op::Custom(_, vs) => vs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "mul",
            Op::Binary(Binary::Div, ..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sqrt(..) => "sqrt",
            Op::Powf(..) => "powf",
            Op::ClampMin(..) => "clamp_min",
            Op::ClampRange(..) => "clamp_range",
            Op::Gelu(..) => "gelu",
            Op::SumCols(..) => "sum_cols",
            Op::Sum(..) => "sum",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::GatherRows(..) => "gather_rows",
            Op::Linear(..) => "linear",
            Op::MatMul3(..) => "matmul3",
            Op::Transpose3(..) => "transpose3",
            Op::Det3(..) => "det3",
            Op::Diag3(..) => "diag3",
            Op::Svd3(..) => "svd3",
            Op::Select(..) => "select",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of batched tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of `like`'s shape when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows, like.cols))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu_k() -> f64 {
    (2.0 / PI).sqrt()
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (gelu_k() * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let k = gelu_k();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c = a·b` for row-major `a: [m,k]`, `b: [k,n]` with explicit strides,
/// accumulated into `c` when `beta = 1`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the callers pass slices whose extents cover every index
    // reachable through the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn unpack_svd(row: &[f64]) -> Svd3 {
    Svd3 {
        u: Mat3::from_slice(&row[0..9]),
        sigma: Vec3::new(row[9], row[10], row[11]),
        v: Mat3::from_slice(&row[12..21]),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, cols) = broadcast_shape(ta, tb).unwrap_or_else(|| {
            panic!("cannot broadcast {:?} against {:?}", ta.shape(), tb.shape())
        });
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let x = ta.data[bidx(ta, r, c)];
                let y = tb.data[bidx(tb, r, c)];
                data.push(match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                });
            }
        }
        self.push(Op::Binary(kind, a, b), Tensor::new(rows, cols, data))
    }

    /// Element-wise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(Op::Offset(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(Op::Powf(a, p), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `max(a, lo)`; the adjoint is cut where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).map(|x| if x < lo { lo } else { x });
        self.push(Op::ClampMin(a, lo), v)
    }

    pub fn clamp_range(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::ClampRange(a, lo, hi), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    /// Row sums, `[N, k] -> [N, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::new(
            t.rows,
            1,
            (0..t.rows).map(|r| t.row(r).iter().sum()).collect(),
        );
        self.push(Op::SumCols(a), v)
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::new(rows, cols, data))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice out of range");
        let mut data = Vec::with_capacity(t.rows * len);
        for r in 0..t.rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let v = Tensor::new(t.rows, len, data);
        self.push(Op::Slice(a, start), v)
    }

    /// Output row `i` is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(idx.len(), t.cols, data);
        self.push(Op::GatherRows(a, idx), v)
    }

    /// `x W + b` with `x: [N, in]`, `W: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.cols, tw.rows, "linear input width mismatch");
        assert_eq!(
            (tb.rows, tb.cols),
            (1, tw.cols),
            "linear bias shape mismatch"
        );
        let (n, din, dout) = (tx.rows, tw.rows, tw.cols);
        let mut out = Vec::with_capacity(n * dout);
        for _ in 0..n {
            out.extend_from_slice(&tb.data);
        }
        gemm(
            n,
            din,
            dout,
            &tx.data,
            din as isize,
            1,
            &tw.data,
            dout as isize,
            1,
            1.0,
            &mut out,
        );
        self.push(Op::Linear(x, w, b), Tensor::new(n, dout, out))
    }

    /// Batched 3×3 product.
    pub fn matmul3(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, tb.rows);
        let v = Tensor::from_mat3s(
            &(0..ta.rows)
                .map(|r| ta.mat3(r) * tb.mat3(r))
                .collect::<Vec<_>>(),
        );
        self.push(Op::MatMul3(a, b), v)
    }

    pub fn transpose3(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_mat3s(
            &(0..t.rows)
                .map(|r| t.mat3(r).transpose())
                .collect::<Vec<_>>(),
        );
        self.push(Op::Transpose3(a), v)
    }

    /// `[N, 9] -> [N, 1]`
    pub fn det3(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::new(t.rows, 1, (0..t.rows).map(|r| t.mat3(r).det()).collect());
        self.push(Op::Det3(a), v)
    }

    /// `[N, 3] -> [N, 9]` diagonal matrices.
    pub fn diag3(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_mat3s(
            &(0..t.rows)
                .map(|r| Mat3::diag(t.vec3(r)))
                .collect::<Vec<_>>(),
        );
        self.push(Op::Diag3(a), v)
    }

    /// `[N, 9] -> [N, 21]` packed as `U` (9), `σ` (3), `V` (9).
    pub fn svd3(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut data = Vec::with_capacity(t.rows * 21);
        for r in 0..t.rows {
            let s = svd3(&t.mat3(r))?;
            data.extend_from_slice(&s.u.0);
            data.extend_from_slice(&s.sigma.to_array());
            data.extend_from_slice(&s.v.0);
        }
        let v = Tensor::new(t.rows, 21, data);
        Ok(self.push(Op::Svd3(a), v))
    }

    /// Convenience split of a packed [`Tape::svd3`] result into `(U, σ, V)`.
    pub fn svd3_parts(&mut self, a: Var) -> Result<(Var, Var, Var)> {
        let s = self.svd3(a)?;
        Ok((
            self.slice(s, 0, 9),
            self.slice(s, 9, 3),
            self.slice(s, 12, 9),
        ))
    }

    /// `U diag(s) Vᵀ`
    pub fn usv(&mut self, u: Var, s: Var, v: Var) -> Var {
        let d = self.diag3(s);
        let us = self.matmul3(u, d);
        let vt = self.transpose3(v);
        self.matmul3(us, vt)
    }

    /// Row `r` of the result is row `r` of `a` where `mask[r]`, else of `b`.
    pub fn select(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "select shape mismatch");
        assert_eq!(mask.len(), ta.rows);
        let mut data = Vec::with_capacity(ta.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { ta.row(r) } else { tb.row(r) });
        }
        let v = Tensor::new(ta.rows, ta.cols, data);
        self.push(Op::Select(mask, a, b), v)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: Vec<Var>, output: Tensor) -> Var {
        self.push(Op::Custom(op, inputs), output)
    }

    /// Reverse sweep seeded with the given output adjoints.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            let node = &self.nodes[v.0];
            assert_eq!(node.value.shape(), g.shape(), "seed shape mismatch");
            if !node.needs_grad {
                continue;
            }
            accumulate(&mut grads, *v, g.clone());
            last = last.max(v.0 + 1);
        }
        for idx in (0..last).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let contributions = self.vjp(node, &g)?;
            grads[idx] = Some(g);
            for (input, ga) in contributions {
                if !ga.is_finite() {
                    return Err(Error::AdjointDivergence { op: idx });
                }
                accumulate(&mut grads, input, ga);
            }
        }
        Ok(Gradients { grads })
    }

    /// Backward from a scalar `[1, 1]` output.
    pub fn backward_scalar(&self, loss: Var) -> Result<Gradients> {
        self.backward(&[(loss, Tensor::scalar(1.0))])
    }

    /// Input adjoints of one node, restricted to inputs that need them.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        let unary = |a: Var, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let ta = val(a);
            Tensor::new(
                ta.rows,
                ta.cols,
                g.data.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect(),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (rows, cols) = g.shape();
                if want(*a) {
                    let full = Tensor::new(
                        rows,
                        cols,
                        (0..rows * cols)
                            .map(|i| {
                                let (r, c) = (i / cols, i % cols);
                                let gi = g.data[i];
                                match kind {
                                    Binary::Add | Binary::Sub => gi,
                                    Binary::Mul => gi * tb.data[bidx(tb, r, c)],
                                    Binary::Div => gi / tb.data[bidx(tb, r, c)],
                                }
                            })
                            .collect(),
                    );
                    out.push((*a, reduce_to(&full, ta.rows, ta.cols)));
                }
                if want(*b) {
                    let full = Tensor::new(
                        rows,
                        cols,
                        (0..rows * cols)
                            .map(|i| {
                                let (r, c) = (i / cols, i % cols);
                                let gi = g.data[i];
                                match kind {
                                    Binary::Add => gi,
                                    Binary::Sub => -gi,
                                    Binary::Mul => gi * ta.data[bidx(ta, r, c)],
                                    Binary::Div => {
                                        let y = tb.data[bidx(tb, r, c)];
                                        -gi * ta.data[bidx(ta, r, c)] / (y * y)
                                    }
                                }
                            })
                            .collect(),
                    );
                    out.push((*b, reduce_to(&full, tb.rows, tb.cols)));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scaled(*s))),
            Op::Offset(a) => out.push((*a, g.clone())),
            Op::Log(a) => {
                let x = val(*a);
                out.push((*a, unary(*a, &|i, gi| gi / x.data[i])));
            }
            Op::Exp(a) => out.push((*a, unary(*a, &|i, gi| gi * node.value.data[i]))),
            Op::Sqrt(a) => out.push((*a, unary(*a, &|i, gi| 0.5 * gi / node.value.data[i]))),
            Op::Powf(a, p) => {
                let x = val(*a);
                out.push((*a, unary(*a, &|i, gi| gi * p * x.data[i].powf(p - 1.0))));
            }
            Op::ClampMin(a, lo) => {
                let x = val(*a);
                out.push((
                    *a,
                    unary(*a, &|i, gi| if x.data[i] < *lo { 0.0 } else { gi }),
                ));
            }
            Op::ClampRange(a, lo, hi) => {
                let x = val(*a);
                out.push((
                    *a,
                    unary(*a, &|i, gi| {
                        if x.data[i] < *lo || x.data[i] > *hi {
                            0.0
                        } else {
                            gi
                        }
                    }),
                ));
            }
            Op::Gelu(a) => {
                let x = val(*a);
                out.push((*a, unary(*a, &|i, gi| gi * gelu_grad(x.data[i]))));
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    t.row_mut(r).fill(g.data[r]);
                }
                out.push((*a, t));
            }
            Op::Sum(a) => {
                let x = val(*a);
                out.push((*a, Tensor::filled(x.rows, x.cols, g.item())));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = val(p).cols;
                    if want(p) {
                        let mut data = Vec::with_capacity(g.rows * w);
                        for r in 0..g.rows {
                            data.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        out.push((p, Tensor::new(g.rows, w, data)));
                    }
                    start += w;
                }
            }
            Op::Slice(a, start) => {
                let x = val(*a);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    t.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                out.push((*a, t));
            }
            Op::GatherRows(a, idx) => {
                let x = val(*a);
                let mut t = Tensor::zeros(x.rows, x.cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (d, s) in t.row_mut(i).iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
                out.push((*a, t));
            }
            Op::Linear(x, w, b) => {
                let (tx, tw) = (val(*x), val(*w));
                let (n, din, dout) = (tx.rows, tw.rows, tw.cols);
                if want(*x) {
                    let mut gx = vec![0.0; n * din];
                    gemm(
                        n,
                        dout,
                        din,
                        &g.data,
                        dout as isize,
                        1,
                        &tw.data,
                        1,
                        dout as isize,
                        0.0,
                        &mut gx,
                    );
                    out.push((*x, Tensor::new(n, din, gx)));
                }
                if want(*w) {
                    let mut gw = vec![0.0; din * dout];
                    gemm(
                        din,
                        n,
                        dout,
                        &tx.data,
                        1,
                        din as isize,
                        &g.data,
                        dout as isize,
                        1,
                        0.0,
                        &mut gw,
                    );
                    out.push((*w, Tensor::new(din, dout, gw)));
                }
                if want(*b) {
                    out.push((*b, reduce_to(g, 1, dout)));
                }
            }
            Op::MatMul3(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if want(*a) {
                    let m: Vec<Mat3> = (0..g.rows)
                        .map(|r| g.mat3(r) * tb.mat3(r).transpose())
                        .collect();
                    out.push((*a, Tensor::from_mat3s(&m)));
                }
                if want(*b) {
                    let m: Vec<Mat3> = (0..g.rows)
                        .map(|r| ta.mat3(r).transpose() * g.mat3(r))
                        .collect();
                    out.push((*b, Tensor::from_mat3s(&m)));
                }
            }
            Op::Transpose3(a) => {
                let m: Vec<Mat3> = (0..g.rows).map(|r| g.mat3(r).transpose()).collect();
                out.push((*a, Tensor::from_mat3s(&m)));
            }
            Op::Det3(a) => {
                let x = val(*a);
                let m: Vec<Mat3> = (0..x.rows)
                    .map(|r| x.mat3(r).cofactor() * g.data[r])
                    .collect();
                out.push((*a, Tensor::from_mat3s(&m)));
            }
            Op::Diag3(a) => {
                let v: Vec<Vec3> = (0..g.rows).map(|r| g.mat3(r).diagonal()).collect();
                out.push((*a, Tensor::from_vec3s(&v)));
            }
            Op::Svd3(a) => {
                let m: Vec<Mat3> = (0..g.rows)
                    .map(|r| {
                        let s = unpack_svd(node.value.row(r));
                        let gr = g.row(r);
                        svd3_vjp(
                            &s,
                            &Mat3::from_slice(&gr[0..9]),
                            Vec3::new(gr[9], gr[10], gr[11]),
                            &Mat3::from_slice(&gr[12..21]),
                        )
                    })
                    .collect();
                out.push((*a, Tensor::from_mat3s(&m)));
            }
            Op::Select(mask, a, b) => {
                for (v, keep) in [(*a, true), (*b, false)] {
                    if want(v) {
                        let mut t = g.clone();
                        for (r, &m) in mask.iter().enumerate() {
                            if m != keep {
                                t.row_mut(r).fill(0.0);
                            }
                        }
                        out.push((v, t));
                    }
                }
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.vjp(&ins, &node.value, g)?;
                for (&v, gv) in inputs.iter().zip(gs) {
                    if want(v) {
                        out.push((v, gv));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Name of the op recorded at `index`, for diagnostics.
    pub fn op_name(&self, index: usize) -> &'static str {
        self.nodes[index].op.name()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
