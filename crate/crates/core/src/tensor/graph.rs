use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, groups: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f32 },
    AddScalar { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Exp { a: Var },
    LogSigmoid { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32>, count: usize },
    Concat { inputs: Vec<Var>, outer: usize, widths: Vec<usize> },
    Slice { a: Var, outer: usize, width: usize, start: usize, len: usize },
    Gather { a: Var, index: Vec<usize> },
    Reshape { a: Var },
    ExpandRows { a: Var, times: usize },
    MaskedMeanPool { a: Var, weights: Vec<f32>, batch: usize, len: usize },
    Sum { a: Var },
    Mean { a: Var },
    RowCosine { a: Var, b: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A gradient tape. Nodes are appended in evaluation order, so the node list
/// is already topologically sorted for the backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(
            value.data().iter().all(|v| !v.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Identity in the forward pass; blocks gradient flow in the backward pass.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if bsh.len() != 2 {
            return Err(Error::usage(format!("matmul rhs must be 2-D, got {bsh:?}")));
        }
        let k = *ash.last().unwrap();
        if k != bsh[0] {
            return Err(Error::usage(format!("matmul shapes {ash:?} x {bsh:?}")));
        }
        let n = bsh[1];
        let m = self.value(a).numel() / k;
        let mut out_shape = ash.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Batched product of `[G, m, k]` with `[G, k, n]` (or `[G, n, k]` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
            return Err(Error::usage(format!("batch_matmul shapes {ash:?} x {bsh:?}")));
        }
        let (groups, m, k) = (ash[0], ash[1], ash[2]);
        let (bk, n) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
        if bk != k {
            return Err(Error::usage(format!("batch_matmul shapes {ash:?} x {bsh:?}")));
        }
        let mut out = vec![0.0; groups * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for g in 0..groups {
                let aa = &ad[g * m * k..(g + 1) * m * k];
                let bb = &bd[g * k * n..(g + 1) * k * n];
                let oo = &mut out[g * m * n..(g + 1) * m * n];
                if trans_b {
                    matmul_nt(aa, bb, oo, m, k, n);
                } else {
                    matmul_nn(aa, bb, oo, m, k, n);
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        let op = Op::BatchMatMul { a, b, groups, m, k, n, trans_b };
        Ok(self.push(Tensor::from_parts(vec![groups, m, n], out), op, ng))
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        let nb = self.value(b).numel();
        let suffix = bsh.len() <= ash.len() && ash[ash.len() - bsh.len()..] == *bsh;
        if suffix || nb == 1 {
            Ok(())
        } else {
            Err(Error::usage(format!("{what}: cannot broadcast {bsh:?} onto {ash:?}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check_broadcast(a, b, what)?;
        let (av, bv) = (self.value(a), self.value(b));
        let nb = bv.numel();
        let bd = bv.data();
        let out = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), out))
    }

    /// `a + b`, where `b` may broadcast over `a`'s leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::Scale { a, c }, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, Op::AddScalar { a }, |x| x + c)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu { a }, |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh { a }, f32::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid { a }, sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp { a }, f32::exp)
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid { a }, |x| {
            x.min(0.0) - (-x.abs()).exp().ln_1p()
        })
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f32::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[at(j)]);
                }
                let mut denom = 0.0f64;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    denom += e as f64;
                }
                let inv = (1.0 / denom) as f32;
                for j in 0..len {
                    out[at(j)] *= inv;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax { a, outer, len, inner },
            ng,
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::usage(format!(
                "layer_norm params must be [{d}], got {:?} / {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).numel() / d;
        let (xd, gd, bd) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut out = vec![0.0f32; xd.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd.push(rs as f32);
            for j in 0..d {
                let xhat = ((row[j] as f64 - mean) * rs) as f32;
                out[r * d + j] = xhat * gd[j] + bd[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, rstd },
            ng,
        ))
    }

    /// Row lookup into a `[vocab, d]` table; output `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tsh = self.shape(table);
        if tsh.len() != 2 {
            return Err(Error::usage("embedding table must be 2-D"));
        }
        let (vocab, d) = (tsh[0], tsh[1]);
        if ids.is_empty() {
            return Err(Error::usage("embedding lookup with no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::usage(format!("token id {bad} outside table of {vocab} rows")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            ng,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[positions, vocab]`). `None` targets are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap();
        let rows = self.value(logits).numel() / v;
        if rows != targets.len() {
            return Err(Error::usage(format!(
                "cross_entropy: {rows} positions but {} targets",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::usage(format!("target {bad} outside vocab of {v}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::usage("cross_entropy with no target positions"));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; ld.len()];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &ld[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let denom: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
            let log_denom = denom.ln();
            for j in 0..v {
                probs[r * v + j] = (((row[j] - max) as f64).exp() / denom) as f32;
            }
            total += log_denom - (row[t] - max) as f64;
        }
        let loss = (total / count as f64) as f32;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            ng,
        ))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::usage("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::usage(format!("concat axis {axis} out of range")));
        }
        let outer: usize = first[..axis].iter().product();
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::usage(format!("concat shape mismatch {first:?} vs {s:?}")));
            }
            total_axis += s[axis];
            widths.push(self.value(v).numel() / outer);
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total_axis;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat { inputs: inputs.to_vec(), outer, widths },
            ng,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::usage(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let width = shape[axis] * inner;
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * width + start * inner;
            out.extend_from_slice(&ad[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(oshape, out),
            Op::Slice { a, outer, width, start: start * inner, len: len * inner },
            ng,
        ))
    }

    /// Axis permutation (`out.shape[i] = a.shape[axes[i]]`).
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::usage(format!("bad permutation {axes:?} for rank {rank}")));
        }
        let mut strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let oshape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let ostrides: Vec<usize> = axes.iter().map(|&x| strides[x]).collect();
        let n = self.value(a).numel();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..n {
            index.push(src);
            for d in (0..rank).rev() {
                counter[d] += 1;
                src += ostrides[d];
                if counter[d] < oshape[d] {
                    break;
                }
                src -= ostrides[d] * oshape[d];
                counter[d] = 0;
            }
        }
        Ok(self.gather_flat(a, oshape, index))
    }

    /// Rows `index` of `a` viewed as `[rows, last]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let d = *shape.last().unwrap();
        let n = self.value(a).numel() / d;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::usage(format!("row {bad} out of range ({n} rows)")));
        }
        if rows.is_empty() {
            return Err(Error::usage("gather_rows with no rows"));
        }
        let index = rows
            .iter()
            .flat_map(|&r| r * d..(r + 1) * d)
            .collect();
        Ok(self.gather_flat(a, vec![rows.len(), d], index))
    }

    fn gather_flat(&mut self, a: Var, shape: Vec<usize>, index: Vec<usize>) -> Var {
        let ad = self.value(a).data();
        let out = index.iter().map(|&i| ad[i]).collect();
        let ng = self.ng(a);
        self.push(Tensor::from_parts(shape, out), Op::Gather { a, index }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape { a }, ng))
    }

    /// `[B, d] -> [B * times, d]`, each row repeated `times` times consecutively.
    pub fn expand_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 || times == 0 {
            return Err(Error::usage(format!("expand_rows on {shape:?} x{times}")));
        }
        let (b, d) = (shape[0], shape[1]);
        let ad = self.value(a).data();
        let mut out = Vec::with_capacity(b * times * d);
        for r in 0..b {
            for _ in 0..times {
                out.extend_from_slice(&ad[r * d..(r + 1) * d]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![b * times, d], out),
            Op::ExpandRows { a, times },
            ng,
        ))
    }

    /// Masked mean over the sequence axis of `[B, T, d]`; `mask` has `B*T`
    /// entries, nonzero for real tokens. Output `[B, d]`.
    pub fn masked_mean_pool(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
            return Err(Error::usage(format!("mean_pool on {shape:?} with mask of {}", mask.len())));
        }
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let mut weights = vec![0.0f32; b * t];
        for r in 0..b {
            let n = mask[r * t..(r + 1) * t].iter().filter(|&&m| m).count();
            if n == 0 {
                return Err(Error::usage(format!("mean_pool: row {r} is fully masked")));
            }
            for j in 0..t {
                if mask[r * t + j] {
                    weights[r * t + j] = 1.0 / n as f32;
                }
            }
        }
        let ad = self.value(a).data();
        let mut out = vec![0.0f32; b * d];
        for r in 0..b {
            let mut acc = vec![0.0f64; d];
            for j in 0..t {
                let w = weights[r * t + j] as f64;
                if w != 0.0 {
                    let row = &ad[(r * t + j) * d..(r * t + j + 1) * d];
                    for (s, &x) in acc.iter_mut().zip(row) {
                        *s += w * x as f64;
                    }
                }
            }
            for (o, s) in out[r * d..(r + 1) * d].iter_mut().zip(acc) {
                *o = s as f32;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![b, d], out),
            Op::MaskedMeanPool { a, weights, batch: b, len: t },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s as f32), Op::Sum { a }, ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: f64 = av.data().iter().map(|&x| x as f64).sum();
        let m = s / av.numel() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(m as f32), Op::Mean { a }, ng)
    }

    /// Row-wise cosine similarity of two `[N, d]` tensors; output `[N]`.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash != bsh || ash.len() != 2 {
            return Err(Error::usage(format!("row_cosine shapes {ash:?} vs {bsh:?}")));
        }
        let (n, d) = (ash[0], ash[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let (x, y) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
            let (dot, nx, ny) = cos_parts(x, y);
            if nx == 0.0 || ny == 0.0 {
                return Err(Error::usage("cosine similarity of a zero-norm vector"));
            }
            out.push((dot / (nx * ny)) as f32);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_parts(vec![n], out), Op::RowCosine { a, b }, ng))
    }

    /// Reverse sweep from a one-element `loss`. Gradients of leaves are kept
    /// and readable through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(gout);
                continue;
            }
            self.backprop_node(i, &gout, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f32])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |ga| matmul_nt(gout, val(b), ga, m, n, k));
                acc(b, &mut |gb| matmul_tn(val(a), gout, gb, m, k, n));
            }
            &Op::BatchMatMul { a, b, groups, m, k, n, trans_b } => {
                let (ad, bd) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for g in 0..groups {
                        let go = &gout[g * m * n..(g + 1) * m * n];
                        let bb = &bd[g * k * n..(g + 1) * k * n];
                        let gg = &mut ga[g * m * k..(g + 1) * m * k];
                        if trans_b {
                            matmul_nn(go, bb, gg, m, n, k);
                        } else {
                            matmul_nt(go, bb, gg, m, n, k);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for g in 0..groups {
                        let go = &gout[g * m * n..(g + 1) * m * n];
                        let aa = &ad[g * m * k..(g + 1) * m * k];
                        let gg = &mut gb[g * k * n..(g + 1) * k * n];
                        if trans_b {
                            matmul_tn(go, aa, gg, m, n, k);
                        } else {
                            matmul_tn(aa, go, gg, m, k, n);
                        }
                    }
                });
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                acc(a, &mut |ga| {
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += o;
                    }
                });
                acc(b, &mut |gb| {
                    let nb = gb.len();
                    for (j, &o) in gout.iter().enumerate() {
                        gb[j % nb] += sign * o;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (val(a), val(b));
                let nb = bd.len();
                acc(a, &mut |ga| {
                    for (j, g) in ga.iter_mut().enumerate() {
                        *g += gout[j] * bd[j % nb];
                    }
                });
                acc(b, &mut |gb| {
                    for (j, &o) in gout.iter().enumerate() {
                        gb[j % nb] += o * ad[j];
                    }
                });
            }
            &Op::Scale { a, c } => acc(a, &mut |ga| {
                for (g, &o) in ga.iter_mut().zip(gout) {
                    *g += c * o;
                }
            }),
            &Op::AddScalar { a } | &Op::Reshape { a } => acc(a, &mut |ga| {
                for (g, &o) in ga.iter_mut().zip(gout) {
                    *g += o;
                }
            }),
            &Op::Gelu { a } => {
                let ad = val(a);
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        let x = ad[j];
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                        ga[j] += gout[j] * d;
                    }
                })
            }
            &Op::Tanh { a } => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gout[j] * (1.0 - y[j] * y[j]);
                    }
                })
            }
            &Op::Sigmoid { a } => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gout[j] * y[j] * (1.0 - y[j]);
                    }
                })
            }
            &Op::Exp { a } => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gout[j] * y[j];
                    }
                })
            }
            &Op::LogSigmoid { a } => {
                let ad = val(a);
                acc(a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += gout[j] * sigmoid(-ad[j]);
                    }
                })
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let mut s = 0.0f64;
                            for j in 0..len {
                                s += (gout[at(j)] * y[at(j)]) as f64;
                            }
                            let s = s as f32;
                            for j in 0..len {
                                ga[at(j)] += y[at(j)] * (gout[at(j)] - s);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = nodes[gamma.0].value.numel();
                let rows = rstd.len();
                let (xd, gd) = (val(x), val(gamma));
                let xhat_row = |r: usize, out: &mut [f32]| {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    for j in 0..d {
                        out[j] = ((row[j] as f64 - mean) * rstd[r] as f64) as f32;
                    }
                };
                let mut xhat = vec![0.0f32; d];
                acc(gamma, &mut |gg| {
                    for r in 0..rows {
                        xhat_row(r, &mut xhat);
                        for j in 0..d {
                            gg[j] += gout[r * d + j] * xhat[j];
                        }
                    }
                });
                acc(beta, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += gout[r * d + j];
                        }
                    }
                });
                acc(x, &mut |gx| {
                    let mut dxhat = vec![0.0f32; d];
                    for r in 0..rows {
                        xhat_row(r, &mut xhat);
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..d {
                            dxhat[j] = gout[r * d + j] * gd[j];
                            m1 += dxhat[j] as f64;
                            m2 += (dxhat[j] * xhat[j]) as f64;
                        }
                        let (m1, m2) = ((m1 / d as f64) as f32, (m2 / d as f64) as f32);
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += gout[r * d + j];
                        }
                    }
                })
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = probs.len() / targets.len();
                let scale = gout[0] / *count as f32;
                acc(*logits, &mut |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            gl[r * v + j] += scale * probs[r * v + j];
                        }
                        gl[r * v + t] -= scale;
                    }
                })
            }
            Op::Concat { inputs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    acc(v, &mut |gv| {
                        for o in 0..*outer {
                            for j in 0..w {
                                gv[o * w + j] += gout[o * row + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice { a, outer, width, start, len } => acc(a, &mut |ga| {
                for o in 0..outer {
                    for j in 0..len {
                        ga[o * width + start + j] += gout[o * len + j];
                    }
                }
            }),
            Op::Gather { a, index } => acc(*a, &mut |ga| {
                for (j, &src) in index.iter().enumerate() {
                    ga[src] += gout[j];
                }
            }),
            &Op::ExpandRows { a, times } => {
                let d = nodes[a.0].value.shape()[1];
                acc(a, &mut |ga| {
                    let b = ga.len() / d;
                    for r in 0..b {
                        for t in 0..times {
                            let src = &gout[(r * times + t) * d..(r * times + t + 1) * d];
                            for j in 0..d {
                                ga[r * d + j] += src[j];
                            }
                        }
                    }
                })
            }
            Op::MaskedMeanPool { a, weights, batch, len } => {
                let d = nodes[a.0].value.shape()[2];
                acc(*a, &mut |ga| {
                    for r in 0..*batch {
                        for j in 0..*len {
                            let w = weights[r * len + j];
                            if w != 0.0 {
                                for c in 0..d {
                                    ga[(r * len + j) * d + c] += w * gout[r * d + c];
                                }
                            }
                        }
                    }
                })
            }
            &Op::Sum { a } => acc(a, &mut |ga| {
                for g in ga.iter_mut() {
                    *g += gout[0];
                }
            }),
            &Op::Mean { a } => acc(a, &mut |ga| {
                let s = gout[0] / ga.len() as f32;
                for g in ga.iter_mut() {
                    *g += s;
                }
            }),
            &Op::RowCosine { a, b } => {
                let (ad, bd) = (val(a), val(b));
                let d = nodes[a.0].value.shape()[1];
                let n = gout.len();
                let mut parts = Vec::with_capacity(n);
                for r in 0..n {
                    let (x, y) = (&ad[r * d..(r + 1) * d], &bd[r * d..(r + 1) * d]);
                    parts.push(cos_parts(x, y));
                }
                // d cos / dx = y / (|x||y|) - cos * x / |x|^2
                let grad_side = |p: &[f32], q: &[f32], gp: &mut [f32], own: fn(&(f64, f64, f64)) -> f64| {
                    for r in 0..n {
                        let (dot, nx, ny) = parts[r];
                        let cos = dot / (nx * ny);
                        let np = own(&parts[r]);
                        let c1 = gout[r] as f64 / (nx * ny);
                        let c2 = gout[r] as f64 * cos / (np * np);
                        for j in 0..d {
                            gp[r * d + j] +=
                                (c1 * q[r * d + j] as f64 - c2 * p[r * d + j] as f64) as f32;
                        }
                    }
                };
                acc(a, &mut |ga| grad_side(ad, bd, ga, |p| p.1));
                acc(b, &mut |gb| grad_side(bd, ad, gb, |p| p.2));
            }
        }
    }
}

fn cos_parts(x: &[f32], y: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut nx = 0.0f64;
    let mut ny = 0.0f64;
    for (&a, &b) in x.iter().zip(y) {
        dot += a as f64 * b as f64;
        nx += a as f64 * a as f64;
        ny += b as f64 * b as f64;
    }
    (dot, nx.sqrt(), ny.sqrt())
}
