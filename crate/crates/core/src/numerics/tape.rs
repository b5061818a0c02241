//! Reverse-mode autodiff over whole-tensor operations.
//!
//! Every op appends one node to the tape; nodes only reference earlier nodes,
//! so the tape is topologically ordered by construction. `backward` walks it in
//! reverse and accumulates into the `grad` buffer of every leaf that requires
//! a gradient. Leaf gradients accumulate across repeated `backward` calls until
//! `zero_grad` is called; intermediate gradients are never retained.

use super::kernels::{self, attend_row};
use super::tensor::{Real, Tensor};
use crate::error::{LvrError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One row of a `stack_rows` result.
#[derive(Clone, Debug)]
pub enum RowSrc<S> {
    /// Row `.1` of a 2-D node.
    Var(Var, usize),
    /// A constant vector; receives no gradient.
    Const(Vec<S>),
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddRow(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log1mExp(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Attention { q: Var, k: Var, v: Var, heads: usize, seg_start: Vec<usize>, probs: Vec<Vec<S>> },
    StackRows(Vec<Option<(Var, usize)>>),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Clamp { x: Var, lo: S, hi: S },
    Minimum(Var, Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its gradient is kept iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        self.nodes.push(Node { value: tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: &Tensor<S>) -> Var {
        let mut t = Tensor::new(tensor.shape.clone(), tensor.data.clone()).expect("valid tensor");
        t.requires_grad = true;
        self.leaf(t)
    }

    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        t.grad = None;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !data.iter().all(|x| x.is_finite()) {
            return Err(LvrError::Numeric(format!("non-finite forward of {name}")));
        }
        let requires_grad = inputs.iter().any(|&i| self.rg(i));
        let value = Tensor { shape, data, grad: None, requires_grad };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.value(v).shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(LvrError::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (&self.value(a).shape, &self.value(b).shape);
        if sa != sb {
            return Err(LvrError::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(LvrError::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::matmul_acc(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape.clone();
        self.push(name, shape, data, op, &[a, b])
    }

    fn map(&mut self, x: Var, name: &'static str, op: Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let data = self.value(x).data.iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape.clone();
        self.push(name, shape, data, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "minimum", Op::Minimum(a, b), |x, y| if y < x { y } else { x })
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        self.map(x, "scale", Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.map(x, "add_scalar", Op::AddScalar(x), |v| v + c)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "gelu", Op::Gelu(x), kernels::gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, "sigmoid", Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, "exp", Op::Exp(x), S::exp)
    }

    /// log(1 − eˣ) for x < 0.
    pub fn log1m_exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, "log1m_exp", Op::Log1mExp(x), |v| (-v.exp()).ln_1p())
    }

    /// Elementwise clamp; gradient passes only strictly inside the bounds.
    pub fn clamp(&mut self, x: Var, lo: S, hi: S) -> Result<Var> {
        self.map(x, "clamp", Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// x[m×n] + bias[n] broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(bias).len() != n {
            return Err(LvrError::dim("add_row", format!("bias len {} vs cols {n}", self.value(bias).len())));
        }
        let b = &self.value(bias).data;
        let mut data = self.value(x).data.clone();
        for r in 0..m {
            for (o, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = self.value(x).shape.clone();
        self.push("add_row", shape, data, Op::AddRow(x, bias), &[x, bias])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(LvrError::dim("layer_norm", "gain/bias width"));
        }
        let mut xhat = self.value(x).data.clone();
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            inv_std.push(kernels::normalize_row(&mut xhat[r * n..(r + 1) * n]));
        }
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let mut out = xhat.clone();
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = out[r * n + c] * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape.clone();
        self.push("layer_norm", shape, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Multi-head causal self-attention. Position `i` attends to keys
    /// `seg_start[i] ..= i`, which yields block-diagonal masks for packed rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg_start: Vec<usize>) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (l, d) = self.dims2(q, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(LvrError::dim("attention", format!("d={d} not divisible by heads={heads}")));
        }
        if seg_start.len() != l || seg_start.iter().enumerate().any(|(i, &s)| s > i) {
            return Err(LvrError::dim("attention", "segment starts inconsistent with length"));
        }
        let (qd, kd, vd) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let mut out = vec![S::zero(); l * d];
        let mut probs = Vec::with_capacity(l);
        for i in 0..l {
            let s = seg_start[i];
            let n_keys = i + 1 - s;
            let mut p = vec![S::zero(); heads * n_keys];
            attend_row(
                &qd[i * d..(i + 1) * d],
                &kd[s * d..(i + 1) * d],
                &vd[s * d..(i + 1) * d],
                n_keys,
                heads,
                &mut out[i * d..(i + 1) * d],
                Some(&mut p),
            );
            probs.push(p);
        }
        self.push("attention", vec![l, d], out, Op::Attention { q, k, v, heads, seg_start, probs }, &[q, k, v])
    }

    /// Builds a matrix from individual rows of other nodes and constants.
    pub fn stack_rows(&mut self, rows: Vec<RowSrc<S>>) -> Result<Var> {
        let mut width = None;
        let mut data = Vec::new();
        let mut refs = Vec::with_capacity(rows.len());
        let mut inputs = Vec::new();
        for src in &rows {
            let row: &[S] = match src {
                RowSrc::Var(v, r) => {
                    let t = self.value(*v);
                    if *r >= t.rows() {
                        return Err(LvrError::dim("stack_rows", format!("row {r} of {:?}", t.shape)));
                    }
                    refs.push(Some((*v, *r)));
                    inputs.push(*v);
                    t.row(*r)
                }
                RowSrc::Const(c) => {
                    refs.push(None);
                    c
                }
            };
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(LvrError::dim("stack_rows", format!("row width {} vs {w}", row.len())))
                }
                _ => {}
            }
            data.extend_from_slice(row);
        }
        let shape = vec![rows.len(), width.unwrap_or(0)];
        self.push("stack_rows", shape, data, Op::StackRows(refs), &inputs)
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "log_softmax")?;
        let xs = &self.value(x).data;
        if !xs.iter().all(|v| v.is_finite()) {
            return Err(LvrError::Numeric("log_softmax input".into()));
        }
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            kernels::log_softmax_row(&xs[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.value(x).shape.clone();
        self.push("log_softmax", shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Gathers flat-indexed entries into a 1-D tensor.
    pub fn pick(&mut self, x: Var, flat_idx: Vec<usize>) -> Result<Var> {
        let xs = &self.value(x).data;
        if let Some(&bad) = flat_idx.iter().find(|&&i| i >= xs.len()) {
            return Err(LvrError::dim("pick", format!("index {bad} out of {}", xs.len())));
        }
        let data = flat_idx.iter().map(|&i| xs[i]).collect();
        self.push("pick", vec![flat_idx.len()], data, Op::Pick(x, flat_idx), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().copied().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(LvrError::Contract("mean of an empty tensor".into()));
        }
        let s = self.value(x).data.iter().copied().sum::<S>() / S::of(n as f64);
        self.push("mean", vec![], vec![s], Op::Mean(x), &[x])
    }

    /// (1/T)·Σ_t ‖a_t − b_t‖²: averaged over rows, summed over columns.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let (t, _) = self.dims2(a, "mse")?;
        if t == 0 {
            return Err(LvrError::Contract("mse over zero rows".into()));
        }
        let s: S = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push("mse", vec![], vec![s / S::of(t as f64)], Op::Mse(a, b), &[a, b])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(LvrError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(LvrError::Numeric("backward gradient".into()));
                }
                let node = &mut self.nodes[i].value;
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].value.requires_grad;
        // Lazily allocated gradient slot for input `v`.
        fn slot<'a, S: Real>(grads: &'a mut [Option<Vec<S>>], v: Var, len: usize) -> &'a mut Vec<S> {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
        }
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "matmul").unwrap();
                let n = self.value(*b).cols();
                if rg(*a) {
                    let ga = slot(grads, *a, m * k);
                    kernels::matmul_bt_acc(g, &self.value(*b).data, ga, m, n, k);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, k * n);
                    kernels::matmul_at_acc(&self.value(*a).data, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if rg(*a) {
                    slot(grads, *a, g.len()).iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    if neg {
                        gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x);
                    } else {
                        gb.iter_mut().zip(g).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                // Ties route the gradient to `a`.
                if rg(*a) {
                    let ga = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        if av[j] <= bv[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        if bv[j] < av[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(o, &v)| *o += v * *c);
                }
            }
            Op::AddScalar(x) => {
                if rg(*x) {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                if rg(*x) {
                    slot(grads, *x, g.len()).iter_mut().zip(g).for_each(|(o, &v)| *o += v);
                }
                if rg(*b) {
                    let gb = slot(grads, *b, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
            }
            Op::Gelu(x) | Op::Sigmoid(x) | Op::Exp(x) | Op::Log1mExp(x) | Op::Clamp { x, .. } => {
                if !rg(*x) {
                    return;
                }
                let xv = &self.value(*x).data;
                let yv = &node.value.data;
                let gx = slot(grads, *x, g.len());
                for j in 0..g.len() {
                    let d = match &node.op {
                        Op::Gelu(_) => kernels::gelu_grad(xv[j]),
                        Op::Sigmoid(_) => yv[j] * (S::one() - yv[j]),
                        Op::Exp(_) => yv[j],
                        // d/dx log(1 − eˣ) = −eˣ / (1 − eˣ) = −1 / (e^{−x} − 1)
                        Op::Log1mExp(_) => -S::one() / (-xv[j]).exp_m1(),
                        Op::Clamp { lo, hi, .. } => {
                            if xv[j] > *lo && xv[j] < *hi {
                                S::one()
                            } else {
                                S::zero()
                            }
                        }
                        _ => unreachable!(),
                    };
                    gx[j] += g[j] * d;
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = self.value(*gain).len();
                let gv = &self.value(*gain).data;
                if rg(*gain) {
                    let gg = slot(grads, *gain, n);
                    for (row, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += row[c] * xr[c];
                        }
                    }
                }
                if rg(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                }
                if rg(*x) {
                    let gx = slot(grads, *x, g.len());
                    let nf = S::of(n as f64);
                    let mut dxhat = vec![S::zero(); n];
                    for (r, (row, xr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for c in 0..n {
                            dxhat[c] = row[c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xr[c];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        for c in 0..n {
                            gx[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, seg_start, probs } => {
                let d = self.value(*q).cols();
                let dh = d / heads;
                let scale = S::one() / S::of(dh as f64).sqrt();
                let (qd, kd, vd) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                let l = seg_start.len();
                let mut gq = vec![S::zero(); l * d];
                let mut gk = vec![S::zero(); l * d];
                let mut gv = vec![S::zero(); l * d];
                for i in 0..l {
                    let s = seg_start[i];
                    let n_keys = i + 1 - s;
                    let p = &probs[i];
                    let go = &g[i * d..(i + 1) * d];
                    for h in 0..*heads {
                        let ph = &p[h * n_keys..(h + 1) * n_keys];
                        let goh = &go[h * dh..(h + 1) * dh];
                        let mut da = vec![S::zero(); n_keys];
                        let mut weighted = S::zero();
                        for (jj, j) in (s..=i).enumerate() {
                            let vj = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                            da[jj] = kernels::dot(goh, vj);
                            weighted += ph[jj] * da[jj];
                            let gvj = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                            for (o, &x) in gvj.iter_mut().zip(goh) {
                                *o += ph[jj] * x;
                            }
                        }
                        let qi = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                        for (jj, j) in (s..=i).enumerate() {
                            let ds = ph[jj] * (da[jj] - weighted) * scale;
                            if ds == S::zero() {
                                continue;
                            }
                            let kj = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                            for c in 0..dh {
                                gq[i * d + h * dh + c] += ds * kj[c];
                                gk[j * d + h * dh + c] += ds * qi[c];
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if rg(var) {
                        slot(grads, var, l * d).iter_mut().zip(&buf).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            Op::StackRows(refs) => {
                let w = node.value.cols();
                for (r, src) in refs.iter().enumerate() {
                    if let Some((v, row)) = src {
                        if rg(*v) {
                            let n = len(*v);
                            let gv = slot(grads, *v, n);
                            gv[row * w..(row + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(o, &x)| *o += x);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if !rg(*x) {
                    return;
                }
                let n = node.value.cols();
                let y = &node.value.data;
                let gx = slot(grads, *x, g.len());
                for r in 0..g.len() / n {
                    let gs: S = g[r * n..(r + 1) * n].iter().copied().sum();
                    for c in 0..n {
                        gx[r * n + c] += g[r * n + c] - y[r * n + c].exp() * gs;
                    }
                }
            }
            Op::Pick(x, idx) => {
                if rg(*x) {
                    let gx = slot(grads, *x, len(*x));
                    for (j, &fi) in idx.iter().enumerate() {
                        gx[fi] += g[j];
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if rg(*x) {
                    let n = len(*x);
                    let c = if matches!(node.op, Op::Mean(_)) { g[0] / S::of(n as f64) } else { g[0] };
                    slot(grads, *x, n).iter_mut().for_each(|o| *o += c);
                }
            }
            Op::Mse(a, b) => {
                let t = self.value(*a).rows();
                let c = S::of(2.0) * g[0] / S::of(t as f64);
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if rg(*a) {
                    let ga = slot(grads, *a, av.len());
                    for j in 0..av.len() {
                        ga[j] += c * (av[j] - bv[j]);
                    }
                }
                if rg(*b) {
                    let gb = slot(grads, *b, bv.len());
                    for j in 0..bv.len() {
                        gb[j] -= c * (av[j] - bv[j]);
                    }
                }
            }
        }
    }
}
