//! Define-by-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in creation order, so a node's parents always have
//! smaller indices. `backward` walks indices from the root downwards, which
//! visits every node after all of its consumers and exactly once.

use std::collections::HashMap;

use super::optim::{ParamId, ParamStore};
use super::tensor::{axis_extents, Tensor};
use super::{Result, TapeError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Linear(Var, Var),
    LeftMatMul(Var, Var),
    WindowMean {
        x: Var,
        axis: usize,
        window: usize,
        dilation: usize,
    },
    SoftmaxRows(Var),
    Softplus(Var),
    Sqrt(Var),
    Log(Var),
    Square(Var),
    ClampMin(Var, f64),
    MomentStd {
        second: Var,
        mu: Var,
    },
    Standardize {
        x: Var,
        mu: Var,
        sigma: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    ZeroMask {
        x: Var,
        mask: Vec<bool>,
    },
    CausalConv {
        x: Var,
        w: Var,
    },
    ArProject {
        h: Var,
        w: Var,
    },
    Reshape(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation graph built forward, differentiated backward.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
    nan_guard: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

// Broadcast index of one operand into the output.
enum BIdx {
    Same,
    Suffix(usize),
    Map(Vec<usize>),
}

impl BIdx {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BIdx::Same => i,
            BIdx::Suffix(n) => i % n,
            BIdx::Map(m) => m[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for k in 0..nd {
        let da = if k + a.len() >= nd { a[k + a.len() - nd] } else { 1 };
        let db = if k + b.len() >= nd { b[k + b.len() - nd] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TapeError::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn broadcast_index(out: &[usize], input: &[usize]) -> BIdx {
    if out == input {
        return BIdx::Same;
    }
    let n_in: usize = input.iter().product();
    let nd = out.len();
    let off = nd - input.len();
    // Trailing-dimension broadcast: input equals the last dims of out.
    if input.iter().enumerate().all(|(k, &d)| d == out[off + k]) {
        return BIdx::Suffix(n_in.max(1));
    }
    let mut strides = vec![0usize; nd];
    let mut s = 1;
    for k in (0..input.len()).rev() {
        strides[off + k] = if input[k] == 1 { 0 } else { s };
        s *= input[k];
    }
    let n_out: usize = out.iter().product();
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; nd];
    for _ in 0..n_out {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for k in (0..nd).rev() {
            idx[k] += 1;
            if idx[k] < out[k] {
                break;
            }
            idx[k] = 0;
        }
    }
    BIdx::Map(map)
}

/// C (m×n) = A (m×k) · B (k×n) + beta · C, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    b_rs: usize,
    b_cs: usize,
    beta: f64,
    c: &mut [f64],
    c_rs: usize,
    c_cs: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if m > 0 && k > 0 {
        assert!((m - 1) * a_rs + (k - 1) * a_cs < a.len());
        assert!((k - 1) * b_rs + (n - 1) * b_cs < b.len());
    }
    assert!((m - 1) * c_rs + (n - 1) * c_cs < c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// New graph; the non-finite guard follows `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            nan_guard: cfg!(debug_assertions),
        }
    }

    pub fn with_nan_guard(mut self, on: bool) -> Self {
        self.nan_guard = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.nan_guard {
            if let Some(index) = value.first_non_finite() {
                return Err(TapeError::NonFinite { op: name, index });
            }
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Constant,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Inserts a parameter once per graph; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            requires_grad: true,
        });
        self.grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Parameter nodes present in this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        make: impl Fn(Var, Var) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let ia = broadcast_index(&out_shape, &sa);
        let ib = broadcast_index(&out_shape, &sb);
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let n: usize = out_shape.iter().product();
        let data = match (&ia, &ib) {
            (BIdx::Same, BIdx::Same) => xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect(),
            _ => (0..n).map(|i| f(xa[ia.at(i)], xb[ib.at(i)])).collect(),
        };
        let rg = self.rg(&[a, b]);
        self.push(name, Tensor::new(out_shape, data), make(a, b), rg)
    }

    /// Element-wise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add, |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub, |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul, |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, Op::Div, |p, q| p / q)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push("add_scalar", t, Op::AddScalar(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x]);
        self.push("scale", t, Op::Scale(x, c), rg)
    }

    /// Standard 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TapeError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; p * r];
        gemm(
            p,
            q,
            r,
            self.value(a).data(),
            q,
            1,
            self.value(b).data(),
            r,
            1,
            0.0,
            &mut out,
            r,
            1,
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![p, r], out), Op::MatMul(a, b), rg)
    }

    /// `x[..., in] · w[out, in]ᵀ -> [..., out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[1] {
            return Err(TapeError::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (fan_out, fan_in) = (sw[0], sw[1]);
        let rows = self.value(x).numel() / fan_in.max(1);
        let mut out = vec![0.0; rows * fan_out];
        gemm(
            rows,
            fan_in,
            fan_out,
            self.value(x).data(),
            fan_in,
            1,
            self.value(w).data(),
            1,
            fan_in,
            0.0,
            &mut out,
            fan_out,
            1,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = fan_out;
        let rg = self.rg(&[x, w]);
        self.push("linear", Tensor::new(shape, out), Op::Linear(x, w), rg)
    }

    /// `a[p, q]` applied to axis 1 of `x[B, q, ...]`, giving `[B, p, ...]`.
    ///
    /// Sums run over `q` in ascending order.
    pub fn left_matmul(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a).to_vec(), self.shape(x).to_vec());
        if sa.len() != 2 || sx.len() < 2 || sa[1] != sx[1] {
            return Err(TapeError::Shape {
                op: "left_matmul",
                lhs: sa,
                rhs: sx,
            });
        }
        let (p, q) = (sa[0], sa[1]);
        let batch = sx[0];
        let rest: usize = sx[2..].iter().product();
        let av = self.value(a).data();
        let xv = self.value(x).data();
        let mut out = vec![0.0; batch * p * rest];
        for b in 0..batch {
            for i in 0..p {
                let dst = &mut out[(b * p + i) * rest..(b * p + i + 1) * rest];
                for j in 0..q {
                    let aij = av[i * q + j];
                    let src = &xv[(b * q + j) * rest..(b * q + j + 1) * rest];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += aij * s;
                    }
                }
            }
        }
        let mut shape = sx;
        shape[1] = p;
        let rg = self.rg(&[a, x]);
        self.push("left_matmul", Tensor::new(shape, out), Op::LeftMatMul(a, x), rg)
    }

    /// Causal (dilated) moving average along `axis`.
    ///
    /// Output position `t` averages `x` at `t, t - dilation, ...,
    /// t - (window - 1) * dilation`, keeping only the taps at index `>= 0`.
    /// Taps are summed oldest first.
    pub fn window_mean(&mut self, x: Var, axis: usize, window: usize, dilation: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TapeError::Axis {
                op: "window_mean",
                axis,
                shape,
            });
        }
        let (_, len, inner) = axis_extents(&shape, axis);
        if window == 0 || dilation == 0 || window * dilation > len {
            return Err(TapeError::EmptyWindow {
                window,
                dilation,
                len,
            });
        }
        let xv = self.value(x).data();
        let mut sums = vec![0.0; xv.len()];
        let block = (len * inner).max(1);
        for (xs, ss) in xv.chunks_exact(block).zip(sums.chunks_exact_mut(block)) {
            for t in 0..len {
                let (done, rest) = ss.split_at_mut(t * inner);
                let cur = &mut rest[..inner];
                if t >= dilation && t / dilation < window {
                    // Still expanding: extending the previous sum by the
                    // newest tap adds in the same order as a fresh loop.
                    let prev = &done[(t - dilation) * inner..(t - dilation + 1) * inner];
                    let new = &xs[t * inner..(t + 1) * inner];
                    for ((c, &p), &v) in cur.iter_mut().zip(prev).zip(new) {
                        *c = p + v;
                    }
                    continue;
                }
                let taps = window.min(t / dilation + 1);
                for j in (0..taps).rev() {
                    let at = (t - j * dilation) * inner;
                    for (c, &v) in cur.iter_mut().zip(&xs[at..at + inner]) {
                        *c += v;
                    }
                }
            }
        }
        let mut out = sums;
        for ss in out.chunks_exact_mut(block) {
            for (t, row) in ss.chunks_exact_mut(inner.max(1)).enumerate() {
                let taps = window.min(t / dilation + 1) as f64;
                row.iter_mut().for_each(|v| *v /= taps);
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            "window_mean",
            Tensor::new(shape, out),
            Op::WindowMean {
                x,
                axis,
                window,
                dilation,
            },
            rg,
        )
    }

    /// Row-wise softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let cols = *t.shape().last().ok_or(TapeError::Shape {
            op: "softmax_rows",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("softmax_rows", Tensor::new(shape, out), Op::SoftmaxRows(x), rg)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(softplus);
        let rg = self.rg(&[x]);
        self.push("softplus", t, Op::Softplus(x), rg)
    }

    fn check_positive(&self, op: &'static str, x: Var) -> Result<()> {
        match self.value(x).data().iter().position(|&v| v.is_nan() || v <= 0.0) {
            Some(index) => Err(TapeError::Domain {
                op,
                index,
                value: self.value(x).data()[index],
            }),
            None => Ok(()),
        }
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.check_positive("sqrt", x)?;
        let t = self.value(x).map(f64::sqrt);
        let rg = self.rg(&[x]);
        self.push("sqrt", t, Op::Sqrt(x), rg)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.check_positive("log", x)?;
        let t = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push("log", t, Op::Log(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push("square", t, Op::Square(x), rg)
    }

    /// `sqrt(max(second - mu^2, 0) + eps)` from first and second moments.
    ///
    /// Fuses the square, subtract, clamp, shift and root into one node with
    /// the same arithmetic, so values match the unfused chain bit for bit.
    pub fn moment_std(&mut self, second: Var, mu: Var, eps: f64) -> Result<Var> {
        let (ss, sm) = (self.shape(second).to_vec(), self.shape(mu).to_vec());
        if ss != sm {
            return Err(TapeError::Shape {
                op: "moment_std",
                lhs: ss,
                rhs: sm,
            });
        }
        let (sv, mv) = (self.value(second).data(), self.value(mu).data());
        let mut out = Vec::with_capacity(sv.len());
        for (i, (&s, &m)) in sv.iter().zip(mv).enumerate() {
            let var = (s - m * m).max(0.0) + eps;
            if var.is_nan() || var <= 0.0 {
                return Err(TapeError::Domain {
                    op: "moment_std",
                    index: i,
                    value: var,
                });
            }
            out.push(var.sqrt());
        }
        let rg = self.rg(&[second, mu]);
        self.push("moment_std", Tensor::new(ss, out), Op::MomentStd { second, mu }, rg)
    }

    /// `(x - mu) / sigma` for three tensors of one shape.
    pub fn standardize(&mut self, x: Var, mu: Var, sigma: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        for other in [mu, sigma] {
            if self.shape(other) != sx.as_slice() {
                return Err(TapeError::Shape {
                    op: "standardize",
                    lhs: sx,
                    rhs: self.shape(other).to_vec(),
                });
            }
        }
        let (xv, mv, sv) = (self.value(x).data(), self.value(mu).data(), self.value(sigma).data());
        let out = xv.iter().zip(mv).zip(sv).map(|((&a, &m), &s)| (a - m) / s).collect();
        let rg = self.rg(&[x, mu, sigma]);
        self.push("standardize", Tensor::new(sx, out), Op::Standardize { x, mu, sigma }, rg)
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(floor));
        let rg = self.rg(&[x]);
        self.push("clamp_min", t, Op::ClampMin(x, floor), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TapeError::Axis {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !same {
                return Err(TapeError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(
            "concat",
            Tensor::new(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TapeError::Axis {
                op: "gather",
                axis,
                shape,
            });
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(TapeError::Index {
                op: "gather",
                index: bad,
                len,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let at = (o * len + i) * inner;
                out.extend_from_slice(&src[at..at + inner]);
            }
        }
        let mut s = shape;
        s[axis] = indices.len();
        let rg = self.rg(&[x]);
        self.push(
            "gather",
            Tensor::new(s, out),
            Op::Gather {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    /// Zeroes entries where `mask` is set and blocks their gradient.
    ///
    /// `mask` covers the trailing elements of `x` and repeats over the
    /// leading ones; its length must divide `x`'s element count.
    pub fn zero_mask(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(x).numel();
        if mask.is_empty() || n % mask.len() != 0 {
            return Err(TapeError::Shape {
                op: "zero_mask",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % mask.len()] { 0.0 } else { v })
            .collect();
        let shape = src.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(
            "zero_mask",
            Tensor::new(shape, data),
            Op::ZeroMask {
                x,
                mask: mask.to_vec(),
            },
            rg,
        )
    }

    /// Causal convolution along the second-to-last axis.
    ///
    /// `x[..., T, c_in]`, `w[k, c_out, c_in]`, output `[..., T, c_out]` with
    /// `y_t = Σ_j w_j · x_{max(t - j, 0)}`: taps before the start repeat the
    /// first position.
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() < 2 || sw.len() != 3 || sx[sx.len() - 1] != sw[2] {
            return Err(TapeError::Shape {
                op: "causal_conv",
                lhs: sx,
                rhs: sw,
            });
        }
        let (k, c_out, c_in) = (sw[0], sw[1], sw[2]);
        let len = sx[sx.len() - 2];
        let outer: usize = sx[..sx.len() - 2].iter().product();
        let rows = outer * len;
        let kc = k * c_out;
        let mut proj = vec![0.0; rows * kc];
        gemm(
            rows,
            c_in,
            kc,
            self.value(x).data(),
            c_in,
            1,
            self.value(w).data(),
            1,
            c_in,
            0.0,
            &mut proj,
            kc,
            1,
        );
        let mut out = vec![0.0; rows * c_out];
        for o in 0..outer {
            for t in 0..len {
                let dst = &mut out[(o * len + t) * c_out..(o * len + t + 1) * c_out];
                for j in 0..k {
                    let s = t.saturating_sub(j);
                    let src = &proj[(o * len + s) * kc + j * c_out..(o * len + s) * kc + (j + 1) * c_out];
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = c_out;
        let rg = self.rg(&[x, w]);
        self.push("causal_conv", Tensor::new(shape, out), Op::CausalConv { x, w }, rg)
    }

    /// Per-horizon auto-regressive projection.
    ///
    /// `h[..., lags, d]` holds the most recent value first; `w[horizons,
    /// lags, d, d]`. Output `[..., horizons, d]` with
    /// `y_i = Σ_j w[i, j] · h_j`.
    pub fn ar_project(&mut self, h: Var, w: Var) -> Result<Var> {
        let (sh, sw) = (self.shape(h).to_vec(), self.shape(w).to_vec());
        if sh.len() < 2 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(TapeError::Shape {
                op: "ar_project",
                lhs: sh,
                rhs: sw,
            });
        }
        let (horizons, lags, d) = (sw[0], sw[1], sw[2]);
        if sh[sh.len() - 2] != lags || sh[sh.len() - 1] != d {
            return Err(TapeError::Shape {
                op: "ar_project",
                lhs: sh,
                rhs: sw,
            });
        }
        let rows: usize = sh[..sh.len() - 2].iter().product();
        let hv = self.value(h).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; rows * horizons * d];
        for i in 0..horizons {
            for j in 0..lags {
                let wij = &wv[(i * lags + j) * d * d..(i * lags + j + 1) * d * d];
                // out[:, i, :] += h[:, j, :] · w_ijᵀ
                gemm(
                    rows,
                    d,
                    d,
                    &hv[j * d..],
                    lags * d,
                    1,
                    wij,
                    1,
                    d,
                    1.0,
                    &mut out[i * d..],
                    horizons * d,
                    1,
                );
            }
        }
        let mut shape = sh;
        let n = shape.len();
        shape[n - 2] = horizons;
        let rg = self.rg(&[h, w]);
        self.push("ar_project", Tensor::new(shape, out), Op::ArProject { h, w }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(TapeError::Shape {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = src.clone().reshaped(shape);
        let rg = self.rg(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Reverse pass from a one-element root.
    ///
    /// Clears gradients of a previous pass first; parameter gradients
    /// accumulate across passes only through [`ParamStore::accumulate`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rshape = self.shape(root).to_vec();
        if rshape.iter().product::<usize>() != 1 {
            return Err(TapeError::NonScalarRoot { shape: rshape });
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for id in (0..=root.0).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(nodes, grads, id, &g);
            grads[id] = Some(g);
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let out = &nodes[id].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[id].op {
        Op::Constant | Op::Leaf | Op::Param => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let ia = broadcast_index(out.shape(), val(*a).shape());
            let ib = broadcast_index(out.shape(), val(*b).shape());
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    ga[ia.at(i)] += gi;
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    gb[ib.at(i)] += sign * gi;
                }
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(nodes[id].op, Op::Div(..));
            let ia = broadcast_index(out.shape(), val(*a).shape());
            let ib = broadcast_index(out.shape(), val(*b).shape());
            let (xa, xb) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(grads, nodes, *a) {
                for (i, &gi) in g.iter().enumerate() {
                    let q = xb[ib.at(i)];
                    ga[ia.at(i)] += if is_div { gi / q } else { gi * q };
                }
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    let (p, q) = (xa[ia.at(i)], xb[ib.at(i)]);
                    gb[ib.at(i)] += if is_div { -gi * p / (q * q) } else { gi * p };
                }
            }
        }
        Op::AddScalar(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
            }
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (p, q, r) = (sa[0], sa[1], sb[1]);
            let (xa, xb) = (val(*a).data(), val(*b).data());
            if let Some(ga) = acc(grads, nodes, *a) {
                // dA = dC · Bᵀ
                gemm(p, r, q, g, r, 1, xb, 1, r, 1.0, ga, q, 1);
            }
            if let Some(gb) = acc(grads, nodes, *b) {
                // dB = Aᵀ · dC
                gemm(q, p, r, xa, 1, q, g, r, 1, 1.0, gb, r, 1);
            }
        }
        Op::Linear(x, w) => {
            let sw = val(*w).shape();
            let (fan_out, fan_in) = (sw[0], sw[1]);
            let rows = val(*x).numel() / fan_in.max(1);
            let (xv, wv) = (val(*x).data(), val(*w).data());
            if let Some(gx) = acc(grads, nodes, *x) {
                gemm(rows, fan_out, fan_in, g, fan_out, 1, wv, fan_in, 1, 1.0, gx, fan_in, 1);
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                gemm(fan_out, rows, fan_in, g, 1, fan_out, xv, fan_in, 1, 1.0, gw, fan_in, 1);
            }
        }
        Op::LeftMatMul(a, x) => {
            let (sa, sx) = (val(*a).shape(), val(*x).shape());
            let (p, q) = (sa[0], sa[1]);
            let batch = sx[0];
            let rest: usize = sx[2..].iter().product();
            let (av, xv) = (val(*a).data(), val(*x).data());
            for b in 0..batch {
                let gy = &g[b * p * rest..(b + 1) * p * rest];
                let xs = &xv[b * q * rest..(b + 1) * q * rest];
                if let Some(ga) = acc(grads, nodes, *a) {
                    // dA += dY_b · X_bᵀ
                    gemm(p, rest, q, gy, rest, 1, xs, 1, rest, 1.0, ga, q, 1);
                }
                if let Some(gx) = acc(grads, nodes, *x) {
                    // dX_b += Aᵀ · dY_b
                    let dst = &mut gx[b * q * rest..(b + 1) * q * rest];
                    gemm(q, p, rest, av, 1, q, gy, rest, 1, 1.0, dst, rest, 1);
                }
            }
        }
        Op::MomentStd { second, mu } => {
            let (sv, mv) = (val(*second).data(), val(*mu).data());
            let live = |i: usize| sv[i] - mv[i] * mv[i] > 0.0;
            if let Some(gs) = acc(grads, nodes, *second) {
                for (i, (d, y)) in gs.iter_mut().zip(out.data()).enumerate() {
                    if live(i) {
                        *d += g[i] / (2.0 * y);
                    }
                }
            }
            if let Some(gm) = acc(grads, nodes, *mu) {
                for (i, (d, y)) in gm.iter_mut().zip(out.data()).enumerate() {
                    if live(i) {
                        *d -= g[i] * mv[i] / y;
                    }
                }
            }
        }
        Op::Standardize { x, mu, sigma } => {
            let sv = val(*sigma).data();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((d, u), s) in gx.iter_mut().zip(g).zip(sv) {
                    *d += u / s;
                }
            }
            if let Some(gm) = acc(grads, nodes, *mu) {
                for ((d, u), s) in gm.iter_mut().zip(g).zip(sv) {
                    *d -= u / s;
                }
            }
            if let Some(gs) = acc(grads, nodes, *sigma) {
                for (((d, u), s), z) in gs.iter_mut().zip(g).zip(sv).zip(out.data()) {
                    *d -= u * z / s;
                }
            }
        }
        Op::WindowMean {
            x,
            axis,
            window,
            dilation,
        } => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let (w, d) = (*window, *dilation);
            if let Some(gx) = acc(grads, nodes, *x) {
                // gx[s] sums g[t] / taps(t) over t = s, s + d, ..., s + (w - 1) d:
                // a trailing running sum per residue class.
                let mut run = vec![0.0; inner];
                for o in 0..outer {
                    let base = o * len * inner;
                    let scaled = |t: usize, i: usize| g[base + t * inner + i] / w.min(t / d + 1) as f64;
                    for r in 0..d.min(len) {
                        run.iter_mut().for_each(|v| *v = 0.0);
                        let count = (len - r).div_ceil(d);
                        for k in (0..count).rev() {
                            let t = r + k * d;
                            for (i, acc) in run.iter_mut().enumerate() {
                                *acc += scaled(t, i);
                                if k + w < count {
                                    *acc -= scaled(t + w * d, i);
                                }
                                gx[base + t * inner + i] += *acc;
                            }
                        }
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let cols = *out.shape().last().unwrap();
            if let Some(gx) = acc(grads, nodes, *x) {
                for ((y, gy), d) in out
                    .data()
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for k in 0..cols {
                        d[k] += y[k] * (gy[k] - dot);
                    }
                }
            }
        }
        Op::Softplus(x) | Op::Sqrt(x) | Op::Log(x) | Op::Square(x) | Op::ClampMin(x, _) => {
            let xv = val(*x).data();
            let yv = out.data();
            let op = &nodes[id].op;
            if let Some(gx) = acc(grads, nodes, *x) {
                for i in 0..g.len() {
                    let local = match op {
                        Op::Softplus(_) => sigmoid(xv[i]),
                        Op::Sqrt(_) => 0.5 / yv[i],
                        Op::Log(_) => 1.0 / xv[i],
                        Op::Square(_) => 2.0 * xv[i],
                        Op::ClampMin(_, floor) => {
                            if xv[i] > *floor {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        _ => unreachable!(),
                    };
                    gx[i] += g[i] * local;
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = axis_extents(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if let Some(gp) = acc(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Gather { x, axis, indices } => {
            let (outer, len, inner) = axis_extents(val(*x).shape(), *axis);
            if let Some(gx) = acc(grads, nodes, *x) {
                let n = indices.len();
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let src = &g[(o * n + k) * inner..(o * n + k + 1) * inner];
                        let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
        Op::ZeroMask { x, mask } => {
            if let Some(gx) = acc(grads, nodes, *x) {
                for (i, (d, s)) in gx.iter_mut().zip(g).enumerate() {
                    if !mask[i % mask.len()] {
                        *d += s;
                    }
                }
            }
        }
        Op::CausalConv { x, w } => {
            let (sx, sw) = (val(*x).shape(), val(*w).shape());
            let (k, c_out, c_in) = (sw[0], sw[1], sw[2]);
            let len = sx[sx.len() - 2];
            let outer: usize = sx[..sx.len() - 2].iter().product();
            let rows = outer * len;
            let kc = k * c_out;
            // Gradient of the per-tap projection.
            let mut dproj = vec![0.0; rows * kc];
            for o in 0..outer {
                for t in 0..len {
                    let gy = &g[(o * len + t) * c_out..(o * len + t + 1) * c_out];
                    for j in 0..k {
                        let s = t.saturating_sub(j);
                        let at = (o * len + s) * kc + j * c_out;
                        dproj[at..at + c_out].iter_mut().zip(gy).for_each(|(d, v)| *d += v);
                    }
                }
            }
            let (xv, wv) = (val(*x).data(), val(*w).data());
            if let Some(gx) = acc(grads, nodes, *x) {
                gemm(rows, kc, c_in, &dproj, kc, 1, wv, c_in, 1, 1.0, gx, c_in, 1);
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                gemm(kc, rows, c_in, &dproj, 1, kc, xv, c_in, 1, 1.0, gw, c_in, 1);
            }
        }
        Op::ArProject { h, w } => {
            let (sh, sw) = (val(*h).shape(), val(*w).shape());
            let (horizons, lags, d) = (sw[0], sw[1], sw[2]);
            let rows: usize = sh[..sh.len() - 2].iter().product();
            let (hv, wv) = (val(*h).data(), val(*w).data());
            if let Some(gh) = acc(grads, nodes, *h) {
                for i in 0..horizons {
                    for j in 0..lags {
                        let wij = &wv[(i * lags + j) * d * d..(i * lags + j + 1) * d * d];
                        // dh_j += dy_i · w_ij
                        gemm(rows, d, d, &g[i * d..], horizons * d, 1, wij, d, 1, 1.0, &mut gh[j * d..], lags * d, 1);
                    }
                }
            }
            if let Some(gw) = acc(grads, nodes, *w) {
                for i in 0..horizons {
                    for j in 0..lags {
                        let at = (i * lags + j) * d * d;
                        // dw_ij += dy_iᵀ · h_j
                        gemm(d, rows, d, &g[i * d..], 1, horizons * d, &hv[j * d..], lags * d, 1, 1.0, &mut gw[at..at + d * d], d, 1);
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = acc(grads, nodes, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}

