//! Dense `f64` tensors and a dynamic reverse-mode differentiation tape.
//!
//! Values live in the [`Tape`] arena and are addressed by [`Var`] handles.
//! Every operation appends one node holding its output together with what the
//! backward rule needs. [`Tape::backward`] walks the nodes once in reverse
//! order and accumulates (sums) gradients, so a tensor consumed at several
//! sites ends up holding the total derivative over all of them.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;

/// Additive bias for disallowed attention logits. Finite so that backward
/// never sees `inf - inf`.
pub const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// `rows × cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Same data, new shape. Errors unless the element counts agree.
    pub fn reshaped(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        layout: MatMulLayout,
    },
    Transpose(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        pad: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(Var),
}

#[derive(Clone, Copy, Debug)]
struct MatMulLayout {
    groups: usize,
    m: usize,
    k: usize,
    n: usize,
    a_stride: usize,
    b_stride: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. One tape per forward pass; confined to one thread.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    dropout_seed: u64,
    dropout_calls: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Dropout masks are drawn from stream `k` of `seed` for the `k`-th
    /// dropout call on this tape, so replaying the same forward pass on a
    /// fresh tape with the same seed reproduces every mask.
    pub fn with_dropout_seed(seed: u64) -> Self {
        Self {
            dropout_seed: seed,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect
    /// to `v`, or `None` if `v` does not influence it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let value = Tensor {
            shape: x.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x[..., n] + bias[n]`, broadcasting over the leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = *xv.shape.last().unwrap_or(&1);
        if bv.shape.len() != 1 || bv.shape[0] != n {
            return Err(Error::shape("add_bias", &xv.shape, &bv.shape));
        }
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&bv.data) {
                *o += b;
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x + c` for a constant `c` of the same shape (no gradient to `c`).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape != c.shape {
            return Err(Error::shape("add_const", &xv.shape, &c.shape));
        }
        let data = xv.data.iter().zip(&c.data).map(|(p, q)| p + q).collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::AddConst(x), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * factor).collect(),
        };
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// equal, or absent on one side, in which case that side is broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (&av.shape, &bv.shape);
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batch, a_stride, b_stride) = if ba == bb {
            (ba.to_vec(), m * k, k * n)
        } else if bb.is_empty() {
            (ba.to_vec(), m * k, 0)
        } else if ba.is_empty() {
            (bb.to_vec(), 0, k * n)
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let groups: usize = batch.iter().product();
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            gemm_nn(
                &av.data[g * a_stride..g * a_stride + m * k],
                &bv.data[g * b_stride..g * b_stride + k * n],
                &mut out[g * m * n..(g + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend_from_slice(&[m, n]);
        let layout = MatMulLayout {
            groups,
            m,
            k,
            n,
            a_stride,
            b_stride,
        };
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul { a, b, layout },
            &[a, b],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let nd = xv.shape.len();
        if nd < 2 {
            return Err(Error::shape("transpose", &xv.shape, &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        let (shape, data) = permute_data(&xv.data, &xv.shape, &axes);
        Ok(self.push(Tensor { shape, data }, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != xv.data.len() {
            return Err(Error::shape("reshape", &xv.shape, shape));
        }
        let value = Tensor {
            shape: shape.to_vec(),
            data: xv.data.clone(),
        };
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; xv.shape.len()];
        if axes.len() != xv.shape.len()
            || axes
                .iter()
                .any(|&a| a >= seen.len() || core::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape("permute", &xv.shape, axes));
        }
        let (shape, data) = permute_data(&xv.data, &xv.shape, axes);
        Ok(self.push(Tensor { shape, data }, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape.last().unwrap_or(&1);
        let mut data = xv.data.clone();
        for row in data.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalizes over the last axis (population variance), then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = *xv.shape.last().unwrap_or(&1);
        if gv.shape != [n] || bv.shape != [n] {
            let other = if gv.shape != [n] {
                &gv.shape
            } else {
                &bv.shape
            };
            return Err(Error::shape("layer_norm", &xv.shape, other));
        }
        let rows = xv.data.len() / n;
        let mut xhat = vec![0.0; xv.data.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.data.len()];
        for r in 0..rows {
            let row = &xv.data[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / math::sqrt(var + eps);
            rstd[r] = s;
            for j in 0..n {
                let h = (row[j] - mean) * s;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let value = Tensor {
            shape: xv.shape.clone(),
            data: out,
        };
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv
                .data
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
        };
        self.push(value, Op::Relu(x), &[x])
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`. Identity (the
    /// same handle is returned) when `training` is false or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let mut rng = Rng::with_stream(self.dropout_seed, self.dropout_calls);
        self.dropout_calls += 1;
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.data.len())
            .map(|_| if rng.uniform() >= p { keep } else { 0.0 })
            .collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Gathers rows of `table[V, d]`; the result has shape `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape.len() != 2 {
            return Err(Error::shape("embedding", &tv.shape, lead));
        }
        let (vocab, d) = (tv.shape[0], tv.shape[1]);
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", lead, &[ids.len()]));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, size: vocab });
            }
            data.extend_from_slice(&tv.data[id * d..(id + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor { shape, data },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Label-smoothed cross-entropy averaged over non-pad positions.
    ///
    /// The target distribution puts `1 - smoothing` on the true class and
    /// spreads `smoothing` uniformly over all `V` classes. `logits` has shape
    /// `[..., V]` with one row per entry of `targets`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad: usize,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = *lv.shape.last().unwrap_or(&1);
        if lv.data.len() != targets.len() * vocab {
            return Err(Error::shape("cross_entropy", &lv.shape, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let mut probs = lv.data.clone();
        let mut total = 0.0;
        let mut count = 0;
        for (row, &t) in probs.chunks_exact_mut(vocab).zip(targets) {
            if t >= vocab {
                return Err(Error::Vocab { id: t, size: vocab });
            }
            if t == pad {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            let mut sum_logp = 0.0;
            for v in row.iter() {
                sum_logp += v - lse;
            }
            let nll = lse - row[t];
            total += (1.0 - smoothing) * nll - smoothing / vocab as f64 * sum_logp;
            count += 1;
            for v in row.iter_mut() {
                *v = math::exp(*v - lse);
            }
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                pad,
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Clears gradients left by any
    /// earlier sweep on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Take the op out so the node arena can be borrowed while inputs are
        // updated; it is restored at the end.
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, |d| add_into(d, g));
                self.accumulate(*b, |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.data.clone();
                let av = self.nodes[a.0].value.data.clone();
                self.accumulate(*a, |d| {
                    for ((o, gi), y) in d.iter_mut().zip(g).zip(&bv) {
                        *o += gi * y;
                    }
                });
                self.accumulate(*b, |d| {
                    for ((o, gi), x) in d.iter_mut().zip(g).zip(&av) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                self.accumulate(*x, |d| add_into(d, g));
                self.accumulate(*b, |d| {
                    let n = d.len();
                    for row in g.chunks_exact(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::AddConst(x) => self.accumulate(*x, |d| add_into(d, g)),
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(*x, |d| {
                    for (o, gi) in d.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                });
            }
            Op::MatMul { a, b, layout } => {
                let l = *layout;
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bv = if a == b {
                        self.nodes[b.0].value.data.clone()
                    } else {
                        core::mem::take(&mut self.nodes[b.0].value.data)
                    };
                    self.accumulate(a, |d| {
                        for grp in 0..l.groups {
                            let da = &mut d[grp * l.a_stride..grp * l.a_stride + l.m * l.k];
                            gemm_nt(
                                &g[grp * l.m * l.n..(grp + 1) * l.m * l.n],
                                &bv[grp * l.b_stride..grp * l.b_stride + l.k * l.n],
                                da,
                                l.m,
                                l.n,
                                l.k,
                            );
                        }
                    });
                    if a != b {
                        self.nodes[b.0].value.data = bv;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = if a == b {
                        self.nodes[a.0].value.data.clone()
                    } else {
                        core::mem::take(&mut self.nodes[a.0].value.data)
                    };
                    self.accumulate(b, |d| {
                        for grp in 0..l.groups {
                            let db = &mut d[grp * l.b_stride..grp * l.b_stride + l.k * l.n];
                            gemm_tn(
                                &av[grp * l.a_stride..grp * l.a_stride + l.m * l.k],
                                &g[grp * l.m * l.n..(grp + 1) * l.m * l.n],
                                db,
                                l.m,
                                l.k,
                                l.n,
                            );
                        }
                    });
                    if a != b {
                        self.nodes[a.0].value.data = av;
                    }
                }
            }
            Op::Transpose(x) => {
                let shape = self.nodes[i].value.shape.clone();
                let nd = shape.len();
                let mut axes: Vec<usize> = (0..nd).collect();
                axes.swap(nd - 2, nd - 1);
                let (_, back) = permute_data(g, &shape, &axes);
                self.accumulate(*x, |d| add_into(d, &back));
            }
            Op::Reshape(x) => self.accumulate(*x, |d| add_into(d, g)),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(g, &self.nodes[i].value.shape, &inverse);
                self.accumulate(*x, |d| add_into(d, &back));
            }
            Op::Softmax(x) => {
                let y = core::mem::take(&mut self.nodes[i].value.data);
                let n = *self.nodes[i].value.shape.last().unwrap_or(&1);
                self.accumulate(*x, |d| {
                    for ((dr, yr), gr) in d
                        .chunks_exact_mut(n)
                        .zip(y.chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
                self.nodes[i].value.data = y;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = rstd.len();
                let width = xhat.len() / n.max(1);
                let gv = self.nodes[gain.0].value.data.clone();
                self.accumulate(*x, |d| {
                    for r in 0..n {
                        let xh = &xhat[r * width..(r + 1) * width];
                        let gr = &g[r * width..(r + 1) * width];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..width {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= width as f64;
                        mean_dxh_xh /= width as f64;
                        for j in 0..width {
                            let dxh = gr[j] * gv[j];
                            d[r * width + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                self.accumulate(*gain, |d| {
                    for (gr, xr) in g.chunks_exact(width).zip(xhat.chunks_exact(width)) {
                        for j in 0..width {
                            d[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.accumulate(*bias, |d| {
                    for gr in g.chunks_exact(width) {
                        add_into(d, gr);
                    }
                });
            }
            Op::Relu(x) => {
                let y = core::mem::take(&mut self.nodes[i].value.data);
                self.accumulate(*x, |d| {
                    for ((o, gi), yi) in d.iter_mut().zip(g).zip(&y) {
                        if *yi > 0.0 {
                            *o += gi;
                        }
                    }
                });
                self.nodes[i].value.data = y;
            }
            Op::Dropout { x, mask } => self.accumulate(*x, |d| {
                for ((o, gi), m) in d.iter_mut().zip(g).zip(mask) {
                    *o += gi * m;
                }
            }),
            Op::Embedding { table, ids } => {
                let width = *self.nodes[i].value.shape.last().unwrap_or(&1);
                self.accumulate(*table, |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(
                            &mut d[id * width..(id + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                pad,
                probs,
                count,
            } => {
                let vocab = probs.len() / targets.len().max(1);
                let scale = g[0] / *count as f64;
                let uniform = smoothing / vocab as f64;
                self.accumulate(*logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        let row = &probs[r * vocab..(r + 1) * vocab];
                        let dr = &mut d[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            let mut q = uniform;
                            if j == t {
                                q += 1.0 - smoothing;
                            }
                            dr[j] += scale * (row[j] - q);
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = g[0];
                self.accumulate(*x, |d| {
                    for o in d.iter_mut() {
                        *o += s;
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// In-place max-shifted softmax of one slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = math::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let mut strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        // odometer increment over the output index
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
