//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough
//! context to replay the adjoint. Nodes are only ever appended, so the tape
//! is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use crate::error::{contract, Error, Result};
use crate::tensor::{
    axis_split, matmul_nt_raw, matmul_raw, matmul_tn_raw, softmax_raw, transpose_raw, Layout,
    ResizePlan, Tensor,
};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Transpose(Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    AvgPool2 {
        x: Var,
        h: usize,
        w: usize,
        c: usize,
    },
    Standardize {
        x: Var,
        inv_std: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    RowSumNormalize {
        x: Var,
        sums: Vec<f64>,
    },
    Sum(Var),
    KlDiv {
        target: Tensor,
        student: Var,
        floor: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if one reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.value(v).shape().to_vec(), g.clone()))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        if self.backward_done {
            return Err(Error::Backward("graph already differentiated; reset before recording".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Adds an input tensor. `requires_grad` marks it as a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg)
    }

    /// `x[n×c_in] · wᵀ + b` with `w: [c_out×c_in]`, `b: [c_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, cin) = self.value(x).dims2("linear")?;
        let (cout, cin2) = self.value(w).dims2("linear")?;
        if cin != cin2 {
            return Err(self.mismatch("linear", x, w));
        }
        let mut out = matmul_nt_raw(self.value(x).data(), self.value(w).data(), n, cin, cout);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(self.mismatch("linear bias", w, b));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(cout) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push("linear", Tensor::from_parts(vec![n, cout], out), Op::Linear { x, w, b }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose2()?;
        let rg = self.any_grad(&[a]);
        self.push("transpose", t, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .map_err(|_| self.mismatch("add", a, b))?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", t, Op::Add(a, b), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| self.mismatch("hadamard", a, b))?;
        let rg = self.any_grad(&[a, b]);
        self.push("hadamard", t, Op::Hadamard(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x * s);
        let rg = self.any_grad(&[a]);
        self.push("scale", t, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.any_grad(&[a]);
        self.push("relu", t, Op::Relu(a), rg)
    }

    /// Numerically stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(contract("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let out = softmax_raw(self.value(x).data(), outer, len, inner);
        let rg = self.any_grad(&[x]);
        self.push(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        )
    }

    /// Shape reinterpretation; the result shares storage with `x`.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push("reshape", t, Op::Reshape(x), rg)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| contract("concat", "no operands"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(contract("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(self.mismatch("concat", first, p));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        let parts = parts.iter().copied().zip(lens).collect();
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts,
                outer,
                inner,
            },
            rg,
        )
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize_bilinear(&mut self, x: Var, layout: Layout, oh: usize, ow: usize) -> Result<Var> {
        let plan = ResizePlan::new(layout, self.shape(x), oh, ow)?;
        if (plan.h, plan.w) == (oh, ow) {
            // Equal sizes are an exact identity.
            return Ok(x);
        }
        let out = Tensor::from_parts(plan.out_shape(), plan.forward(self.value(x).data()));
        let rg = self.any_grad(&[x]);
        self.push("bilinear_resize", out, Op::Resize { x, plan }, rg)
    }

    /// 2×2 average pooling of a `[h, w, c]` map.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3("avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(contract("downsample", format!("odd spatial extent {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; oh * ow * c];
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let at = |yy: usize, xi: usize| src[(yy * w + xi) * c + ch];
                    out[(y * ow + xx) * c + ch] = 0.25
                        * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
                }
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            "avg_pool2",
            Tensor::from_parts(vec![oh, ow, c], out),
            Op::AvgPool2 { x, h, w, c },
            rg,
        )
    }

    /// Zero-mean, unit-variance rows of a `[n, c]` matrix.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.value(x).dims2("standardize_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut inv_std = Vec::with_capacity(n);
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.any_grad(&[x]);
        self.push(
            "standardize_rows",
            Tensor::from_parts(vec![n, c], out),
            Op::Standardize { x, inv_std },
            rg,
        )
    }

    /// Unit-L2 rows; an all-zero row maps to an all-zero row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2("normalize_rows")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut norms = Vec::with_capacity(n);
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (d, v) in dst.iter_mut().zip(row) {
                    *d = v / norm;
                }
            }
            norms.push(norm);
        }
        let rg = self.any_grad(&[x]);
        self.push(
            "normalize_rows",
            Tensor::from_parts(vec![n, c], out),
            Op::NormalizeRows { x, norms },
            rg,
        )
    }

    /// Divides every row of a `[n, c]` matrix by its sum.
    pub fn row_sum_normalize(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.value(x).dims2("row_sum_normalize")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c];
        let mut sums = Vec::with_capacity(n);
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(contract("row_sum_normalize", "row sums to zero"));
            }
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v / s;
            }
            sums.push(s);
        }
        let rg = self.any_grad(&[x]);
        self.push(
            "row_sum_normalize",
            Tensor::from_parts(vec![n, c], out),
            Op::RowSumNormalize { x, sums },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ p·ln(p / max(q, floor))` against a constant target `p`, with `0·ln 0 = 0`.
    pub fn kl_div(&mut self, target: &Tensor, student: Var, floor: f64) -> Result<Var> {
        if target.numel() != self.value(student).numel() {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                lhs: target.shape().to_vec(),
                rhs: self.shape(student).to_vec(),
            });
        }
        if target.data().iter().any(|&p| p < 0.0) {
            return Err(contract("kl_div", "negative target probability"));
        }
        let q = self.value(student).data();
        let loss: f64 = target
            .data()
            .iter()
            .zip(q)
            .filter(|(&p, _)| p > 0.0)
            .map(|(&p, &qi)| p * (p.ln() - qi.max(floor).ln()))
            .sum();
        let rg = self.any_grad(&[student]);
        self.push(
            "kl_div",
            Tensor::scalar(loss),
            Op::KlDiv {
                target: target.clone(),
                student,
                floor,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.value(logits).dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(contract("cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if labels.iter().any(|&l| l >= k) {
            return Err(contract("cross_entropy", "label out of range"));
        }
        let z = self.value(logits).data();
        let mut total = 0.0;
        for (row, &label) in z.chunks(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let rg = self.any_grad(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Populates gradients of the scalar `loss` for every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Backward("loss does not depend on any differentiable leaf".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let mut pending: Vec<(Var, Vec<f64>)> = Vec::new();
        {
            let node = &self.nodes[id];
            let val = |v: Var| self.nodes[v.0].value.data();
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    if needs(*a) {
                        pending.push((*a, matmul_nt_raw(g, val(*b), m, n, k)));
                    }
                    if needs(*b) {
                        pending.push((*b, matmul_tn_raw(val(*a), g, m, k, n)));
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let cout = self.shape(*w)[0];
                    if needs(*x) {
                        pending.push((*x, matmul_raw(g, val(*w), n, cout, cin)));
                    }
                    if needs(*w) {
                        pending.push((*w, matmul_tn_raw(g, val(*x), n, cout, cin)));
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let mut gb = vec![0.0; cout];
                            for row in g.chunks(cout) {
                                gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                            }
                            pending.push((*b, gb));
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    pending.push((*a, transpose_raw(g, c, r)));
                }
                Op::Add(a, b) => {
                    pending.push((*a, g.to_vec()));
                    pending.push((*b, g.to_vec()));
                }
                Op::Hadamard(a, b) => {
                    if needs(*a) {
                        pending.push((*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect()));
                    }
                    if needs(*b) {
                        pending.push((*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect()));
                    }
                }
                Op::Scale(a, s) => pending.push((*a, g.iter().map(|v| v * s).collect())),
                Op::Relu(a) => {
                    let gx = g
                        .iter()
                        .zip(val(*a))
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                        .collect();
                    pending.push((*a, gx));
                }
                Op::Softmax {
                    x,
                    outer,
                    len,
                    inner,
                } => {
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..*outer {
                        for r in 0..*inner {
                            let idx = |k: usize| (o * len + k) * inner + r;
                            let dot: f64 = (0..*len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..*len {
                                gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
                Op::Reshape(x) => pending.push((*x, g.to_vec())),
                Op::Concat {
                    parts,
                    outer,
                    inner,
                } => {
                    let total: usize = parts.iter().map(|(_, l)| l).sum();
                    let mut offset = 0;
                    for &(p, len) in parts {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + len * inner]);
                        }
                        offset += len;
                        pending.push((p, gp));
                    }
                }
                Op::Resize { x, plan } => pending.push((*x, plan.backward(g))),
                Op::AvgPool2 { x, h, w, c } => {
                    let (ow, c) = (w / 2, *c);
                    let mut gx = vec![0.0; h * w * c];
                    for y in 0..*h {
                        for xx in 0..*w {
                            for ch in 0..c {
                                gx[(y * w + xx) * c + ch] = 0.25 * g[((y / 2) * ow + xx / 2) * c + ch];
                            }
                        }
                    }
                    pending.push((*x, gx));
                }
                Op::Standardize { x, inv_std } => {
                    let c = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for (i, is) in inv_std.iter().enumerate() {
                        let rows = i * c..(i + 1) * c;
                        let (gr, yr) = (&g[rows.clone()], &y[rows.clone()]);
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for ((d, gv), yv) in gx[rows].iter_mut().zip(gr).zip(yr) {
                            *d = is * (gv - mg - yv * mgy);
                        }
                    }
                    pending.push((*x, gx));
                }
                Op::NormalizeRows { x, norms } => {
                    let c = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for (i, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let rows = i * c..(i + 1) * c;
                        let (gr, yr) = (&g[rows.clone()], &y[rows.clone()]);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in gx[rows].iter_mut().zip(gr).zip(yr) {
                            *d = (gv - yv * dot) / norm;
                        }
                    }
                    pending.push((*x, gx));
                }
                Op::RowSumNormalize { x, sums } => {
                    let c = self.shape(*x)[1];
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for (i, &s) in sums.iter().enumerate() {
                        let rows = i * c..(i + 1) * c;
                        let (gr, yr) = (&g[rows.clone()], &y[rows.clone()]);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, gv) in gx[rows].iter_mut().zip(gr) {
                            *d = (gv - dot) / s;
                        }
                    }
                    pending.push((*x, gx));
                }
                Op::Sum(x) => pending.push((*x, vec![g[0]; self.value(*x).numel()])),
                Op::KlDiv {
                    target,
                    student,
                    floor,
                } => {
                    let gx = target
                        .data()
                        .iter()
                        .zip(val(*student))
                        .map(|(&p, &q)| if p > 0.0 && q > *floor { -g[0] * p / q } else { 0.0 })
                        .collect();
                    pending.push((*student, gx));
                }
                Op::CrossEntropy { logits, labels } => {
                    let k = self.shape(*logits)[1];
                    let n = labels.len() as f64;
                    let z = val(*logits);
                    let mut gx = vec![0.0; z.len()];
                    for ((row, dst), &label) in z.chunks(k).zip(gx.chunks_mut(k)).zip(labels) {
                        let p = crate::tensor::softmax_slice(row);
                        for (j, (d, pj)) in dst.iter_mut().zip(p).enumerate() {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            *d = g[0] * (pj - onehot) / n;
                        }
                    }
                    pending.push((*logits, gx));
                }
            }
        }
        for (v, gv) in pending {
            self.accumulate(v, gv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0)).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn(&[4], |i| i as f64 * 0.5 - 1.0);
        let x = g.param(xt.clone()).unwrap();
        let sq = g.hadamard(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(x).unwrap().max_abs_diff(&xt) < 1e-15);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2])).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2])).unwrap();
        assert!(g.backward(x).is_err());
        let c = g.constant(Tensor::ones(&[2])).unwrap();
        let s = g.sum(c).unwrap();
        assert!(g.backward(s).is_err());
        let d = g.detach(x).unwrap();
        let s = g.sum(d).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2])).unwrap();
        assert!(matches!(g.scale(x, f64::INFINITY), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_identity_and_basis() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2)).unwrap();
        let m = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        let col = g.constant(Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap()).unwrap();
        let p = g.matmul(row, col).unwrap();
        assert_eq!(g.value(p).data(), &[5.0]);
        assert!(matches!(g.matmul(row, row), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(vec![2], vec![2f64.ln(), 0.0]).unwrap()).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-15);
        // Huge but finite logits must not overflow.
        let x = g.constant(Tensor::new(vec![2], vec![1000.0, 999.0]).unwrap()).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).sum() - 1.0).abs() < 1e-12);
        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap()).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let ones = g.constant(Tensor::ones(&[3])).unwrap();
        let h = g.hadamard(x, ones).unwrap();
        assert_eq!(g.value(h), g.value(x));

        let a = g.constant(Tensor::zeros(&[4, 2, 3])).unwrap();
        let b = g.constant(Tensor::ones(&[1, 2, 3])).unwrap();
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[5, 2, 3]);
        let bad = g.constant(Tensor::ones(&[1, 3, 3])).unwrap();
        assert!(g.concat(&[a, bad], 0).is_err());
        assert!(g.hadamard(a, b).is_err());
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[3, 2], |i| i as f64)).unwrap();
        let w = g.constant(Tensor::eye(2)).unwrap();
        let zero = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.linear(x, w, Some(zero)).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let x0 = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b = g.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap()).unwrap();
        let y = g.linear(x0, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn normalize_rows_zero_rule() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap()).unwrap();
        let y = g.normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8, 0.0, 0.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(&gx.data()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn resize_identity_is_same_var() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[2, 4, 4], |i| i as f64)).unwrap();
        let y = g.resize_bilinear(x, Layout::Chw, 4, 4).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let c = g.constant(Tensor::full(&[1, 3, 5], 3.5)).unwrap();
        let y = g.resize_bilinear(c, Layout::Chw, 7, 2).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));
        assert!(g.resize_bilinear(c, Layout::Chw, 0, 2).is_err());
    }

    #[test]
    fn kl_examples() {
        let mut g = Graph::new();
        let p = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let q = g.param(Tensor::new(vec![2], vec![0.5, 0.5]).unwrap()).unwrap();
        let kl = g.kl_div(&p, q, 1e-12).unwrap();
        assert!((g.value(kl).item().unwrap() - 2f64.ln()).abs() < 1e-15);
        let same = g.kl_div(&Tensor::new(vec![2], vec![0.5, 0.5]).unwrap(), q, 1e-12).unwrap();
        assert_eq!(g.value(same).item().unwrap(), 0.0);
    }
}
