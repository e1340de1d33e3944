//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and, while
//! recording, the rule needed to push gradients back to its inputs.
//! `backward` walks the nodes in reverse insertion order, which is a valid
//! topological order because inputs always precede outputs.

use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    MatMul(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
    leaf_grad: bool,
}

/// Operation recorder. Values may borrow parameter storage for `'a`, so
/// binding a parameter does not copy it.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    recording: bool,
    bound: HashMap<usize, Var>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of a `requires_grad` leaf; `None` when the leaf was not reached.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, zero-filled if the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.sizes[var.0]])
    }
}

impl<'a> Tape<'a> {
    /// A tape that records gradient rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            bound: HashMap::new(),
        }
    }

    /// A tape that only evaluates; `backward` yields nothing useful.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, requires_grad: bool) -> Var {
        let g = requires_grad && self.recording;
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            needs_grad: g,
            leaf_grad: g,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            needs_grad,
            leaf_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` onto the tape, honouring its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), Cow::Owned(t.data().to_vec()), t.requires_grad())
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push_leaf(shape, Cow::Owned(t.into_data()), false)
    }

    /// Borrows `t` without copying; gradient flows iff `t.requires_grad()`.
    pub fn borrow(&mut self, t: &'a Tensor) -> Var {
        self.push_leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), t.requires_grad())
    }

    /// Binds parameter `key` once per tape; later calls return the same node.
    pub fn param(&mut self, key: usize, t: &'a Tensor) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.borrow(t);
        self.bound.insert(key, v);
        v
    }

    /// Parameters bound through [`Tape::param`], sorted by key.
    pub fn bound_params(&self) -> Vec<(usize, Var)> {
        let mut out: Vec<_> = self.bound.iter().map(|(&k, &v)| (k, v)).collect();
        out.sort_unstable();
        out
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("tape node shape is valid")
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let val = self.value(v);
        if val.len() != 1 {
            return Err(TensorError::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape(v)
            )));
        }
        Ok(val[0])
    }

    // ---- elementwise -------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::Shape {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = if sa == sb {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, sa);
            let mb = broadcast_map(&out_shape, sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Ok((out_shape, data))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, d, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, d, Op::Sub(a, b), &[a, b]))
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, d, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let s = self.shape(x).to_vec();
        let d = self.value(x).iter().map(|v| v * c).collect();
        self.push(s, d, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let d = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(s, d, Op::Relu(x), &[x])
    }

    /// Inverted dropout. Identity when `rng` is `None` (eval) or `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(TensorError::Contract(format!("dropout rate {rate} must be < 1")));
        }
        let keep = 1.0 - rate;
        let shape = self.shape(x).to_vec();
        let mask: Vec<f64> = (0..numel(&shape))
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product over the last two dimensions, broadcasting leading ones.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(err)?;
        let map_a = broadcast_map(&batch, ba);
        let map_b = broadcast_map(&batch, bb);
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = vec![0.0; map_a.len() * m * n];
        for (bi, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
            mm_acc(
                &va[ia * m * k..(ia + 1) * m * k],
                &vb[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        Ok(self.push(shape, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x);
        if shape.contains(&0) || numel(shape) != numel(from) {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: from.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let d = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), d, Op::Reshape(x), &[x]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(TensorError::Contract(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let map = permute_map(&shape, axes);
        let v = self.value(x);
        let out: Vec<f64> = map.iter().map(|&i| v[i]).collect();
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.push(out_shape, out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Axis { axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    /// Rows of `table` (shape `(V, d)`) selected by `ids`; output `(ids.len(), d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || ids.is_empty() {
            return Err(TensorError::Contract(format!(
                "embedding needs a (V, d) table and at least one id, got {ts:?}"
            )));
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Contract(format!(
                "id {bad} out of range for vocabulary {v}"
            )));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    // ---- normalisation -----------------------------------------------

    fn check_axis(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(TensorError::Axis { axis, rank: s.len() });
        }
        Ok((numel(&s[..axis]), s[axis], numel(&s[axis + 1..])))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis)?;
        let v = self.value(x);
        if v.iter().any(|e| !e.is_finite()) {
            return Err(TensorError::NonFinite("softmax"));
        }
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| v[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (v[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[idx(l)] /= sum;
                }
            }
        }
        let s = self.shape(x).to_vec();
        Ok(self.push(s, out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis)?;
        let v = self.value(x);
        if v.iter().any(|e| !e.is_finite()) {
            return Err(TensorError::NonFinite("log_softmax"));
        }
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| v[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|l| (v[idx(l)] - max).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[idx(l)] = v[idx(l)] - lse;
                }
            }
        }
        let s = self.shape(x).to_vec();
        Ok(self.push(s, out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalises over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or(TensorError::Axis { axis: 0, rank: 0 })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let v = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = vec![0.0; v.len()];
        for (row, o) in v.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, rstd) = moments(row, eps);
            for j in 0..d {
                o[j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        Ok(self.push(s, out, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    // ---- reductions and losses ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![s], Op::MeanAll(x), &[x])
    }

    /// Sums over `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.check_axis(x, axis)?;
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v[(o * len + l) * inner + i];
                }
            }
        }
        let mut s = self.shape(x).to_vec();
        s.remove(axis);
        Ok(self.push(s, out, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1);
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (shape `(rows, classes)`). `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = s[1];
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Contract("cross_entropy with no targets".into()));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(TensorError::Contract(format!(
                "target {bad} out of range for {c} classes"
            )));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (row, t) in v.chunks(c).zip(targets) {
            if let Some(t) = *t {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite("cross_entropy"));
        }
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.leaf_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            sizes: self.nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn backprop(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(*a) {
                    let ga = reduce_to(g, &node.shape, self.shape(*a));
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let mut gb = reduce_to(g, &node.shape, self.shape(*b));
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !needs(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod: Vec<f64> = if self.shape(other) == node.shape.as_slice() {
                        g.iter().zip(ov.iter()).map(|(x, y)| x * y).collect()
                    } else {
                        let m = broadcast_map(&node.shape, self.shape(other));
                        g.iter().zip(&m).map(|(x, &j)| x * ov[j]).collect()
                    };
                    let r = reduce_to(&prod, &node.shape, self.shape(this));
                    accumulate(grads, this, r);
                }
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                accumulate(
                    grads,
                    *x,
                    g.iter()
                        .zip(xv.iter())
                        .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::MatMul(a, b) => self.matmul_backward(node, *a, *b, g, grads),
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = self.check_axis(*x, *axis).expect("validated in forward");
                let y = &node.value;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| y[idx(l)] * g[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = self.check_axis(*x, *axis).expect("validated in forward");
                let y = &node.value;
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let gs: f64 = (0..len).map(|l| g[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = g[idx(l)] - y[idx(l)].exp() * gs;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *node.shape.last().expect("rank >= 1");
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; d];
                let mut db = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for ((row, go), dxo) in xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                    let (mean, rstd) = moments(row, *eps);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = go[j] * gv[j];
                        dg[j] += go[j] * xhat[j];
                        db[j] += go[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dxo[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if needs(*gain) {
                    accumulate(grads, *gain, dg);
                }
                if needs(*bias) {
                    accumulate(grads, *bias, db);
                }
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Permute { x, axes } => {
                let map = permute_map(self.shape(*x), axes);
                let mut dx = vec![0.0; g.len()];
                for (o, &i) in map.iter().enumerate() {
                    dx[i] = g[o];
                }
                accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = self.check_axis(*x, *axis).expect("validated in forward");
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, count } => {
                let c = self.shape(*logits)[1];
                let v = self.value(*logits);
                let scale = g[0] / *count as f64;
                let mut dx = vec![0.0; v.len()];
                for ((row, t), drow) in v.chunks(c).zip(targets).zip(dx.chunks_mut(c)) {
                    let Some(t) = *t else { continue };
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
                    for j in 0..c {
                        drow[j] = (row[j] - max).exp() / sum * scale;
                    }
                    drow[t] -= scale;
                }
                accumulate(grads, *logits, dx);
            }
        }
    }

    fn matmul_backward(&self, node: &Node<'a>, a: Var, b: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = &node.shape[..node.shape.len() - 2];
        let map_a = broadcast_map(batch, &sa[..sa.len() - 2]);
        let map_b = broadcast_map(batch, &sb[..sb.len() - 2]);
        let va = self.value(a);
        let vb = self.value(b);
        let need_a = self.nodes[a.0].needs_grad;
        let need_b = self.nodes[b.0].needs_grad;
        let mut da = if need_a { vec![0.0; va.len()] } else { Vec::new() };
        let mut db = if need_b { vec![0.0; vb.len()] } else { Vec::new() };
        for (bi, (&ia, &ib)) in map_a.iter().zip(&map_b).enumerate() {
            let gc = &g[bi * m * n..(bi + 1) * m * n];
            let am = &va[ia * m * k..(ia + 1) * m * k];
            let bm = &vb[ib * k * n..(ib + 1) * k * n];
            if need_a {
                // dA[i,p] += sum_j dC[i,j] B[p,j]
                let dam = &mut da[ia * m * k..(ia + 1) * m * k];
                for i in 0..m {
                    let grow = &gc[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bm[p * n..(p + 1) * n];
                        dam[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            if need_b {
                // dB[p,j] += sum_i A[i,p] dC[i,j]
                let dbm = &mut db[ib * k * n..(ib + 1) * k * n];
                for i in 0..m {
                    let grow = &gc[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = am[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let drow = &mut dbm[p * n..(p + 1) * n];
                        drow.iter_mut().zip(grow).for_each(|(d, x)| *d += aip * x);
                    }
                }
            }
        }
        if need_a {
            accumulate(grads, a, da);
        }
        if need_b {
            accumulate(grads, b, db);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// C[m,n] += A[m,k] B[k,n]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            crow.iter_mut().zip(brow).for_each(|(c, b)| *c += aip * b);
        }
    }
}

/// Numpy-style broadcast of two shapes, right-aligned.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast source in `input`.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let r = out.len();
    let in_strides = strides(input);
    let mut eff = vec![0; r];
    for i in 0..input.len() {
        let o = i + r - input.len();
        eff[o] = if input[i] == 1 { 0 } else { in_strides[i] };
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0; r];
    let mut off = 0;
    for _ in 0..total {
        map.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// Sums `g` (laid out as `from`) down to the broadcast source shape `to`.
fn reduce_to(g: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return g.to_vec();
    }
    let map = broadcast_map(from, to);
    let mut out = vec![0.0; numel(to)];
    for (v, &j) in g.iter().zip(&map) {
        out[j] += v;
    }
    out
}

/// For every flat output index of the permuted tensor, the source flat index.
fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| st[a]).collect();
    let r = out_shape.len();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0; r];
    let mut off = 0;
    for _ in 0..total {
        map.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}
