//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its vector-Jacobian product. `backward` walks the
//! nodes in reverse order, so the tape is its own topological sort.

use std::collections::BTreeMap;

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-6;

/// Index of each output element into a broadcast input.
#[derive(Clone, Debug)]
enum BMap {
    Same,
    /// Input is a trailing block repeated over the leading dims.
    Tile(usize),
    Table(Vec<usize>),
}

impl BMap {
    #[inline]
    fn idx(&self, i: usize) -> usize {
        match self {
            BMap::Same => i,
            BMap::Tile(n) => i % n,
            BMap::Table(t) => t[i],
        }
    }

    fn build(input: &[usize], out: &[usize]) -> BMap {
        if input == out {
            return BMap::Same;
        }
        let n_in = numel(input);
        // Trailing-suffix broadcast, the common bias-add case.
        let stripped: Vec<usize> = {
            let lead = input.iter().take_while(|&&d| d == 1).count();
            input[lead..].to_vec()
        };
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == stripped[..] {
            return BMap::Tile(n_in.max(1));
        }
        let offset = out.len() - input.len();
        let mut strides = vec![0usize; out.len()];
        let mut s = 1;
        for d in (0..input.len()).rev() {
            strides[offset + d] = if input[d] == 1 { 0 } else { s };
            s *= input[d];
        }
        let total = numel(out);
        let mut table = Vec::with_capacity(total);
        let mut counter = vec![0usize; out.len()];
        for _ in 0..total {
            table.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for d in (0..out.len()).rev() {
                counter[d] += 1;
                if counter[d] < out[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        BMap::Table(table)
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        amap: BMap,
        bmap: BMap,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    AddScalar {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
        trans_b: bool,
    },
    Permute {
        a: Var,
        /// Input flat index for each output flat index.
        map: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Gather {
        a: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        indices: Vec<usize>,
    },
    Expand {
        a: Var,
        map: BMap,
    },
    Softmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        cols: usize,
    },
    Gelu {
        a: Var,
    },
    Sum {
        a: Var,
    },
    ReduceAxis {
        a: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        mean: bool,
    },
    WeightedSqErr {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        cols: usize,
    },
}

/// A recording of tensor operations that can be differentiated once.
///
/// `backward` may run a single time; a second call fails until
/// [`Tape::zero_grad`] clears the gradient buffers.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    ops: Vec<Op>,
    tracked: Vec<bool>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.tracked.push(tracked);
        Var(self.values.len() - 1)
    }

    /// Registers a tensor as a leaf; tracked iff it requires grad.
    pub fn var(&mut self, tensor: Tensor) -> Var {
        let tracked = tensor.is_requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Registers an untracked leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.tracked[v.0]
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Clears every gradient buffer and re-enables `backward`.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.tracked[v.0])
    }

    // ---------------------------------------------------------------
    // elementwise

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            },
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let amap = BMap::build(&sa, &out_shape);
        let bmap = BMap::build(&sb, &out_shape);
        let n = numel(&out_shape);
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        let mut out = Vec::with_capacity(n);
        match (&amap, &bmap) {
            (BMap::Same, BMap::Same) => match kind {
                Binary::Add => out.extend(da.iter().zip(db).map(|(x, y)| x + y)),
                Binary::Sub => out.extend(da.iter().zip(db).map(|(x, y)| x - y)),
                Binary::Mul => out.extend(da.iter().zip(db).map(|(x, y)| x * y)),
            },
            _ => {
                for i in 0..n {
                    let (x, y) = (da[amap.idx(i)], db[bmap.idx(i)]);
                    out.push(match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    });
                }
            }
        }
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            },
            tracked,
        ))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.values[a.0].data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked[a.0];
        self.push(
            Tensor::new(shape, value).expect("same shape"),
            Op::Scale { a, factor },
            tracked,
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.values[a.0].data().iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked[a.0];
        self.push(
            Tensor::new(shape, value).expect("same shape"),
            Op::AddScalar { a },
            tracked,
        )
    }

    // ---------------------------------------------------------------
    // linear algebra

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch = numel(lead);
        let b_shared = sb.len() == 2;
        if !b_shared && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.values[a.0].data(), self.values[b.0].data());
        if b_shared {
            gemm(batch * m, k, n, da, false, db, trans_b, &mut out, 0.0);
        } else {
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let tracked = self.any_tracked(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                trans_b,
            },
            tracked,
        ))
    }

    /// `a[..., m, k] x b[k, n]` (shared right operand) or
    /// `a[..., m, k] x b[..., k, n]` (matching batch dims).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Tape::matmul`] with the right operand transposed in its
    /// last two axes: `b` is `[..., n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::contract("transpose needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&x| x >= nd || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::contract(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let mut in_strides = vec![1usize; nd];
        for d in (0..nd.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let total = numel(&shape);
        let mut map = Vec::with_capacity(total);
        let mut counter = vec![0usize; nd];
        for _ in 0..total {
            map.push(counter.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for d in (0..nd).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let src = self.values[a.0].data();
        let out: Vec<f64> = map.iter().map(|&i| src[i]).collect();
        let tracked = self.tracked[a.0];
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Permute { a, map }, tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[a.0].reshaped(shape)?;
        let tracked = self.tracked[a.0];
        Ok(self.push(value, Op::Reshape { a }, tracked))
    }

    // ---------------------------------------------------------------
    // structural

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!(
                "concat axis {axis} for shape {base:?}"
            )));
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut lens = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let total_len: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (v, &len) in inputs.iter().zip(&lens) {
                let d = self.values[v.0].data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total_len;
        let tracked = self.any_tracked(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                lens,
            },
            tracked,
        ))
    }

    /// Selects `indices` along `axis`; indices may repeat.
    pub fn gather(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "gather axis {axis} for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= axis_len) {
            return Err(Error::Index {
                index: bad,
                len: axis_len,
            });
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let src = self.values[a.0].data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * axis_len + i) * inner;
                out.extend_from_slice(&src[start..start + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = indices.len();
        let tracked = self.tracked[a.0];
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Gather {
                a,
                outer,
                axis_len,
                inner,
                indices: indices.to_vec(),
            },
            tracked,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather(a, axis, &idx)
    }

    /// Broadcasts `a` to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        match broadcast_shape(&sa, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::Shape {
                    op: "expand",
                    lhs: sa,
                    rhs: shape.to_vec(),
                })
            }
        }
        let map = BMap::build(&sa, shape);
        let src = self.values[a.0].data();
        let out: Vec<f64> = (0..numel(shape)).map(|i| src[map.idx(i)]).collect();
        let tracked = self.tracked[a.0];
        Ok(self.push(
            Tensor::new(shape.to_vec(), out)?,
            Op::Expand { a, map },
            tracked,
        ))
    }

    // ---------------------------------------------------------------
    // nonlinearities and normalization

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::contract("softmax of 0-d tensor"))?;
        let src = self.values[a.0].data();
        let mut out = vec![0.0; src.len()];
        for (row, o) in src.chunks(cols).zip(out.chunks_mut(cols)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (x, y) in row.iter().zip(o.iter_mut()) {
                *y = (x - max).exp();
                sum += *y;
            }
            let inv = 1.0 / sum;
            o.iter_mut().for_each(|y| *y *= inv);
        }
        let tracked = self.tracked[a.0];
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a, cols }, tracked))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::contract("layer_norm of 0-d tensor"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.values[x.0].data();
        let (g, b) = (self.values[gamma.0].data(), self.values[beta.0].data());
        let rows = src.len() / cols;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let tracked = self.any_tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                cols,
            },
            tracked,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.values[a.0].data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let tracked = self.tracked[a.0];
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Gelu { a },
            tracked,
        )
    }

    // ---------------------------------------------------------------
    // reductions and losses

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().sum();
        let tracked = self.tracked[a.0];
        self.push(Tensor::scalar(s), Op::Sum { a }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "reduce axis {axis} for shape {shape:?}"
            )));
        }
        let outer = numel(&shape[..axis]);
        let axis_len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let src = self.values[a.0].data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..axis_len {
                let row = &src[(o * axis_len + l) * inner..(o * axis_len + l + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        if mean && axis_len > 0 {
            let inv = 1.0 / axis_len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let tracked = self.tracked[a.0];
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::ReduceAxis {
                a,
                outer,
                axis_len,
                inner,
                mean,
            },
            tracked,
        ))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// `sum_r weights[r] * ||pred[r] - target[r]||^2` where rows run over
    /// all but the last axis. Rows with zero weight are skipped entirely,
    /// so they contribute exactly nothing to value or gradient.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Var, weights: &[f64]) -> Result<Var> {
        let sp = self.shape(pred).to_vec();
        if self.shape(target) != sp.as_slice() {
            return Err(Error::Shape {
                op: "weighted_sq_err",
                lhs: sp,
                rhs: self.shape(target).to_vec(),
            });
        }
        let cols = *sp.last().unwrap_or(&1);
        let rows = numel(&sp) / cols.max(1);
        if weights.len() != rows {
            return Err(Error::Shape {
                op: "weighted_sq_err",
                lhs: sp,
                rhs: vec![weights.len()],
            });
        }
        let (p, t) = (self.values[pred.0].data(), self.values[target.0].data());
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for c in 0..cols {
                let e = p[r * cols + c] - t[r * cols + c];
                acc += e * e;
            }
            total += w * acc;
        }
        let tracked = self.any_tracked(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSqErr {
                pred,
                target,
                weights: weights.to_vec(),
                cols,
            },
            tracked,
        ))
    }

    /// Mean softmax cross-entropy of `logits [N, C]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let cols = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Index {
                index: bad,
                len: cols,
            });
        }
        let src = self.values[logits.0].data();
        let mut probs = vec![0.0; src.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[label];
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
        }
        let n = labels.len().max(1) as f64;
        let tracked = self.tracked[logits.0];
        Ok(self.push(
            Tensor::scalar(loss / n),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                cols,
            },
            tracked,
        ))
    }

    // ---------------------------------------------------------------
    // backward

    /// Populates gradients of the scalar `loss` for every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call zero_grad first",
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.backward_done = true;
        if !self.tracked[loss.0] {
            self.fill_leaf_grads();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.tracked[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        self.fill_leaf_grads();
        Ok(())
    }

    fn fill_leaf_grads(&mut self) {
        for i in 0..self.values.len() {
            if self.tracked[i] && matches!(self.ops[i], Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![0.0; self.values[i].len()]);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let Tape {
            values,
            grads,
            ops,
            tracked,
            ..
        } = self;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !tracked[v.0] {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; values[v.0].len()]);
            f(buf);
        };
        match &ops[i] {
            Op::Leaf => {}
            Op::Binary {
                kind,
                a,
                b,
                amap,
                bmap,
            } => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                acc(*a, &mut |ga| match kind {
                    Binary::Add | Binary::Sub => {
                        if let BMap::Same = amap {
                            ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        } else {
                            for (k, gk) in g.iter().enumerate() {
                                ga[amap.idx(k)] += gk;
                            }
                        }
                    }
                    Binary::Mul => {
                        for (k, gk) in g.iter().enumerate() {
                            ga[amap.idx(k)] += gk * vb[bmap.idx(k)];
                        }
                    }
                });
                acc(*b, &mut |gb| match kind {
                    Binary::Add => {
                        for (k, gk) in g.iter().enumerate() {
                            gb[bmap.idx(k)] += gk;
                        }
                    }
                    Binary::Sub => {
                        for (k, gk) in g.iter().enumerate() {
                            gb[bmap.idx(k)] -= gk;
                        }
                    }
                    Binary::Mul => {
                        for (k, gk) in g.iter().enumerate() {
                            gb[bmap.idx(k)] += gk * va[amap.idx(k)];
                        }
                    }
                });
            }
            Op::Scale { a, factor } => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
            }),
            Op::AddScalar { a } => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                trans_b,
            } => {
                let (m, k, n, batch) = (*m, *k, *n, *batch);
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                // dA = dC . B^T  (or dC . B when B was used transposed)
                acc(*a, &mut |ga| {
                    if *b_shared {
                        gemm(batch * m, n, k, g, false, vb, !trans_b, ga, 1.0);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                false,
                                &vb[bi * k * n..(bi + 1) * k * n],
                                !trans_b,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                1.0,
                            );
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    let rows = if *b_shared { batch * m } else { m };
                    let reps = if *b_shared { 1 } else { batch };
                    for bi in 0..reps {
                        let ab = &va[bi * rows * k..(bi + 1) * rows * k];
                        let gc = &g[bi * rows * n..(bi + 1) * rows * n];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dC^T . A
                            gemm_t_lhs(n, rows, k, gc, ab, out);
                        } else {
                            // dB[k,n] = A^T . dC
                            gemm_t_lhs(k, rows, n, ab, gc, out);
                        }
                    }
                });
            }
            Op::Permute { a, map } => acc(*a, &mut |ga| {
                for (o, &src) in map.iter().enumerate() {
                    ga[src] += g[o];
                }
            }),
            Op::Reshape { a } => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }),
            Op::Concat {
                inputs,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (v, &len) in inputs.iter().zip(lens) {
                    acc(*v, &mut |gv| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gv[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather {
                a,
                outer,
                axis_len,
                inner,
                indices,
            } => acc(*a, &mut |ga| {
                let n = indices.len();
                for o in 0..*outer {
                    for (j, &idx) in indices.iter().enumerate() {
                        let src = &g[(o * n + j) * inner..(o * n + j + 1) * inner];
                        let d0 = (o * axis_len + idx) * inner;
                        ga[d0..d0 + inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }),
            Op::Expand { a, map } => acc(*a, &mut |ga| {
                for (k, gk) in g.iter().enumerate() {
                    ga[map.idx(k)] += gk;
                }
            }),
            Op::Softmax { a, cols } => {
                let y = values[i].data();
                acc(*a, &mut |ga| {
                    for ((yr, gr), dr) in y.chunks(*cols).zip(g.chunks(*cols)).zip(ga.chunks_mut(*cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..*cols {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                cols,
            } => {
                let cols = *cols;
                let gam = values[gamma.0].data();
                acc(*x, &mut |gx| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let row = r * cols..(r + 1) * cols;
                        let (gr, hr) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            mean_d += d;
                            mean_dh += d * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        let out = &mut gx[row];
                        for c in 0..cols {
                            let d = gr[c] * gam[c];
                            out[c] += rs * (d - mean_d - hr[c] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(cols) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Gelu { a } => {
                let va = values[a.0].data();
                acc(*a, &mut |ga| {
                    for ((d, x), gk) in ga.iter_mut().zip(va).zip(g) {
                        *d += gk * gelu_grad(*x);
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |ga| {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }),
            Op::ReduceAxis {
                a,
                outer,
                axis_len,
                inner,
                mean,
            } => {
                let scale = if *mean { 1.0 / *axis_len as f64 } else { 1.0 };
                acc(*a, &mut |ga| {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..*axis_len {
                            let d0 = (o * axis_len + l) * inner;
                            ga[d0..d0 + inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y * scale);
                        }
                    }
                });
            }
            Op::WeightedSqErr {
                pred,
                target,
                weights,
                cols,
            } => {
                let (p, t) = (values[pred.0].data(), values[target.0].data());
                let cols = *cols;
                let fill = |sign: f64| {
                    move |gp: &mut [f64]| {
                        for (r, &w) in weights.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let s = sign * 2.0 * w * g[0];
                            for c in 0..cols {
                                let k = r * cols + c;
                                gp[k] += s * (p[k] - t[k]);
                            }
                        }
                    }
                };
                acc(*pred, &mut fill(1.0));
                acc(*target, &mut fill(-1.0));
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                cols,
            } => {
                let scale = g[0] / labels.len().max(1) as f64;
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..*cols {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                        }
                    }
                });
            }
        }
    }

    // ---------------------------------------------------------------
    // parameter binding

    /// Registers every tensor of `params` as a tracked leaf.
    pub fn bind(&mut self, params: &ParamStore) -> Bindings {
        let mut map = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = self.var(t.clone().requires_grad());
            map.insert(name.to_string(), v);
        }
        Bindings { map }
    }

    /// Registers every tensor of `params` as an untracked constant.
    pub fn bind_frozen(&mut self, params: &ParamStore) -> Bindings {
        let mut map = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = self.constant(t.clone());
            map.insert(name.to_string(), v);
        }
        Bindings { map }
    }

    /// Gradients of bound parameters, keyed by name.
    pub fn param_grads(&self, binds: &Bindings) -> BTreeMap<String, Tensor> {
        binds
            .map
            .iter()
            .map(|(name, &v)| {
                let g = self
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.values[v.0].len()]);
                let t = Tensor::new(self.shape(v).to_vec(), g).expect("grad matches value shape");
                (name.clone(), t)
            })
            .collect()
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Keeps only tensors whose name satisfies `keep`.
    pub fn retain(&mut self, mut keep: impl FnMut(&str) -> bool) {
        self.tensors.retain(|k, _| keep(k));
    }
}

/// Parameter name to tape node lookup produced by [`Tape::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    map: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// `c = a . b (+ beta * c)` with `a` logically `[m, k]` and `b` logically
/// `[k, n]`. `b_trans` means `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices hold at least m*k, k*n and m*n elements and the
    // strides describe those row-major (or transposed) layouts exactly.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[p, q] += sum_r lhs[r, p] * rhs[r, q]` for row-major `lhs [rows, p]`
/// and `rhs [rows, q]`.
fn gemm_t_lhs(p: usize, rows: usize, q: usize, lhs: &[f64], rhs: &[f64], c: &mut [f64]) {
    gemm(p, rows, q, lhs, true, rhs, false, c, 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a_data: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 1.0).collect();
        let i3 = tape.constant(Tensor::eye(3));
        let a = tape.constant(t(&[3, 3], &a_data));
        let c = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(c).data(), a_data.as_slice());
    }

    #[test]
    fn uniform_softmax() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(a).unwrap();
        for v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        match tape.add(a, b).unwrap_err() {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(m, m), Err(Error::Shape { .. })));
    }

    #[test]
    fn gather_out_of_range() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.gather(a, 1, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::Index { index: 3, len: 3 }));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[3], &[1.0, -2.0, 5.0]).requires_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_gradient_is_quarter() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[4], &[1.0, 2.0, 3.0, 4.0]).requires_grad());
        let m = tape.mean(x);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn square_gradient_by_hand() {
        // d/dx sum(x*x) at x = 3 is 6
        let mut tape = Tape::new();
        let x = tape.var(t(&[1], &[3.0]).requires_grad());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]).requires_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn unreached_leaves_get_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]).requires_grad());
        let y = tape.var(t(&[3], &[1.0, 2.0, 3.0]).requires_grad());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(y).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn weighted_sq_err_skips_zero_weight_rows() {
        let mut tape = Tape::new();
        let p = tape.var(t(&[2, 2], &[1.0, 1.0, f64::INFINITY, 0.0]).requires_grad());
        let q = tape.constant(t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]));
        let l = tape.weighted_sq_err(p, q, &[0.5, 0.0]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 1.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_both_sides() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert_eq!(
            tape.value(c).data(),
            &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]
        );
    }
}
