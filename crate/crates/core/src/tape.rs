//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because inputs always precede outputs.

use crate::tensor::{gemm, log_softmax_row, softmax_row, MatView, Real, Result, Tensor, TensorError};

/// Additive pre-softmax mask for future positions.
pub const CAUSAL_MASK: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    /// a · bᵀ
    MatMulT { a: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, factor: T },
    Gelu(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Gather { table: Var, ids: Vec<usize> },
    GatherCols { x: Var, cols: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Softmax { x: Var, inv_tau: T },
    LogSoftmax { x: Var, inv_tau: T },
    CausalSoftmax(Var),
    RmsNorm { x: Var, gain: Var, eps: T },
    RowNormalize(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Masked, max-stabilized softmax of an `l×l` score block, row by row.
fn causal_softmax_into<T: Real>(scores: &[T], l: usize, out: &mut [T]) {
    let mask = T::of(CAUSAL_MASK);
    let mut masked = vec![T::zero(); l];
    for i in 0..l {
        let row = &scores[i * l..(i + 1) * l];
        for (j, m) in masked.iter_mut().enumerate() {
            *m = if j > i { row[j] + mask } else { row[j] };
        }
        softmax_row(&masked, T::one(), &mut out[i * l..(i + 1) * l]);
    }
}

/// dS = P ⊙ (dP − rowsum(dP ⊙ P)), in place over `dp`.
fn softmax_backward_rows<T: Real>(p: &[T], dp: &mut [T], cols: usize) {
    for (pr, dr) in p.chunks(cols).zip(dp.chunks_mut(cols)) {
        let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
        for (d, &pv) in dr.iter_mut().zip(pr) {
            *d = pv * (*d - dot);
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    /// Drop every node so the tape can record the next step.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last `backward`, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::Invalid(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            MatView::row_major(k),
            self.value(b).data(),
            MatView::row_major(n),
            T::zero(),
            &mut out,
            MatView::row_major(n),
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, &[a, b]))
    }

    /// `[m×k]·[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(mismatch("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            MatView::row_major(k),
            self.value(b).data(),
            MatView::row_major(k).t(),
            T::zero(),
            &mut out,
            MatView::row_major(n),
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT { a, b }, &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a vector to every row of `x` (bias broadcast).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).numel() != c {
            return Err(mismatch("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| T::of(gelu_fwd(v.f64()))).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v.ln()).collect()).expect("same shape");
        self.push(out, Op::Log(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "gather")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, bound: v });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Picks `cols.len() / rows` entries from every row of a matrix;
    /// `cols` is laid out row-major.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "gather_cols")?;
        if cols.is_empty() || !cols.len().is_multiple_of(r) {
            return Err(TensorError::Invalid(format!(
                "gather_cols: {} indices do not split over {r} rows",
                cols.len()
            )));
        }
        let per = cols.len() / r;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(cols.len());
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfRange { index: j, bound: c });
            }
            out.push(src[(i / per) * c + j]);
        }
        let out = Tensor::new(vec![r, per], out)?;
        Ok(self.push(out, Op::GatherCols { x, cols: cols.to_vec() }, &[x]))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "select_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, bound: r });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![rows.len(), c], out)?;
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Softmax of `x / temperature` over the last dimension.
    pub fn softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        let out = crate::tensor::softmax(self.value(x), temperature)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                inv_tau: T::one() / temperature,
            },
            &[x],
        ))
    }

    /// `log softmax(x / temperature)` over the last dimension.
    pub fn log_softmax(&mut self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(TensorError::NonPositiveTemperature(temperature.f64()));
        }
        let src = self.value(x);
        let c = src.cols();
        let mut out = Tensor::zeros(src.shape().to_vec());
        for (s, d) in src.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            log_softmax_row(s, temperature, d);
        }
        Ok(self.push(
            out,
            Op::LogSoftmax {
                x,
                inv_tau: T::one() / temperature,
            },
            &[x],
        ))
    }

    /// Row softmax of a square score matrix with future positions masked.
    pub fn causal_softmax(&mut self, scores: Var) -> Result<Var> {
        let (l, l2) = self.matrix_dims(scores, "causal_softmax")?;
        if l != l2 {
            return Err(mismatch("causal_softmax", &[l], &[l2]));
        }
        let mut out = vec![T::zero(); l * l];
        causal_softmax_into(self.value(scores).data(), l, &mut out);
        Ok(self.push(Tensor::new(vec![l, l], out)?, Op::CausalSoftmax(scores), &[scores]))
    }

    /// `x / sqrt(mean(x²) + eps) * gain` per row.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).numel() != c {
            return Err(mismatch("rms_norm", self.shape(x), self.shape(gain)));
        }
        let g = self.value(gain).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(c as f64);
            let inv = T::one() / (ms + eps).sqrt();
            for (v, &gv) in row.iter_mut().zip(&g) {
                *v = *v * inv * gv;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, eps }, &[x, gain]))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm.f64() < 1e-12 {
                return Err(TensorError::DegenerateRow { row: r, norm: norm.f64() });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(self.push(out, Op::RowNormalize(x), &[x]))
    }

    /// Multi-head causal self-attention over `[L×d]` queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (l, d) = self.matrix_dims(q, "attention")?;
        for other in [k, v] {
            if self.shape(other) != [l, d] {
                return Err(mismatch("attention", &[l, d], self.shape(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("attention: {heads} heads do not divide width {d}")));
        }
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let mut probs = vec![T::zero(); heads * l * l];
        let mut scores = vec![T::zero(); l * l];
        let mut out = vec![T::zero(); l * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for h in 0..heads {
            let head = MatView::at(h * hd, d);
            gemm(l, hd, l, scale, qd, head, kd, head.t(), T::zero(), &mut scores, MatView::row_major(l));
            let p = &mut probs[h * l * l..(h + 1) * l * l];
            causal_softmax_into(&scores, l, p);
            gemm(l, l, hd, T::one(), p, MatView::row_major(l), vd, head, T::zero(), &mut out, head);
        }
        let out = Tensor::new(vec![l, d], out)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v]))
    }

    /// Populates gradients of every `requires_grad` ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::DeadTape);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.wants(v) {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).cols();
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(a, &mut |ga| {
                    gemm(m, n, k, T::one(), g, MatView::row_major(n), bd, MatView::row_major(n).t(), T::one(), ga, MatView::row_major(k))
                });
                acc(b, &mut |gb| {
                    gemm(k, m, n, T::one(), ad, MatView::row_major(k).t(), g, MatView::row_major(n), T::one(), gb, MatView::row_major(n))
                });
            }
            &Op::MatMulT { a, b } => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).rows();
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(a, &mut |ga| {
                    gemm(m, n, k, T::one(), g, MatView::row_major(n), bd, MatView::row_major(k), T::one(), ga, MatView::row_major(k))
                });
                acc(b, &mut |gb| {
                    gemm(n, m, k, T::one(), g, MatView::row_major(n).t(), ad, MatView::row_major(k), T::one(), gb, MatView::row_major(k))
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, &x)| *o -= x));
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                acc(a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o += x * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(ad) {
                        *o += x * y;
                    }
                });
            }
            &Op::AddRow { x, row } => {
                acc(x, &mut |gx| add_into(gx, g));
                let c = self.value(row).numel();
                acc(row, &mut |gr| {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            &Op::Scale { x, factor } => {
                acc(x, &mut |gx| gx.iter_mut().zip(g).for_each(|(o, &v)| *o += v * factor));
            }
            &Op::Gelu(x) => {
                let xd = self.value(x).data();
                acc(x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gv * T::of(gelu_grad(xv.f64()));
                    }
                });
            }
            &Op::Log(x) => {
                let xd = self.value(x).data();
                acc(x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(xd) {
                        *o += gv / xv;
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(x) => {
                let share = g[0] / T::of(self.value(x).numel() as f64);
                acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += share));
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::GatherCols { x, cols } => {
                let (r, c) = dims(self.value(*x));
                let per = cols.len() / r;
                acc(*x, &mut |gx| {
                    for (i, &j) in cols.iter().enumerate() {
                        gx[(i / per) * c + j] += g[i];
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let c = self.value(*x).cols();
                acc(*x, &mut |gx| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            &Op::Softmax { x, inv_tau } => {
                let s = node.value.data();
                let c = node.value.cols();
                let mut d = g.to_vec();
                softmax_backward_rows(s, &mut d, c);
                acc(x, &mut |gx| gx.iter_mut().zip(&d).for_each(|(o, &v)| *o += v * inv_tau));
            }
            &Op::LogSoftmax { x, inv_tau } => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(x, &mut |gx| {
                    for ((gr, yr), orow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let total: T = gr.iter().copied().sum();
                        for ((o, &gv), &yv) in orow.iter_mut().zip(gr).zip(yr) {
                            *o += (gv - yv.exp() * total) * inv_tau;
                        }
                    }
                });
            }
            &Op::CausalSoftmax(x) => {
                let c = node.value.cols();
                let mut d = g.to_vec();
                softmax_backward_rows(node.value.data(), &mut d, c);
                acc(x, &mut |gx| add_into(gx, &d));
            }
            &Op::RmsNorm { x, gain, eps } => {
                let c = self.value(x).cols();
                let xd = self.value(x).data();
                let gd = self.value(gain).data();
                let inv_rms: Vec<T> = xd
                    .chunks(c)
                    .map(|row| T::one() / (row.iter().map(|&v| v * v).sum::<T>() / T::of(c as f64) + eps).sqrt())
                    .collect();
                acc(x, &mut |gx| {
                    for (r, ((xr, gr), orow)) in xd.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let inv = inv_rms[r];
                        let dot: T = xr.iter().zip(gr).zip(gd).map(|((&xv, &gv), &w)| xv * gv * w).sum();
                        let coef = inv * inv * inv * dot / T::of(c as f64);
                        for (((o, &xv), &gv), &w) in orow.iter_mut().zip(xr).zip(gr).zip(gd) {
                            *o += inv * w * gv - coef * xv;
                        }
                    }
                });
                acc(gain, &mut |gg| {
                    for (r, (xr, gr)) in xd.chunks(c).zip(g.chunks(c)).enumerate() {
                        for ((o, &xv), &gv) in gg.iter_mut().zip(xr).zip(gr) {
                            *o += gv * xv * inv_rms[r];
                        }
                    }
                });
            }
            &Op::RowNormalize(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let xd = self.value(x).data();
                acc(x, &mut |gx| {
                    for (((yr, gr), xr), orow) in y.chunks(c).zip(g.chunks(c)).zip(xd.chunks(c)).zip(gx.chunks_mut(c)) {
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in orow.iter_mut().zip(yr).zip(gr) {
                            *o += (gv - yv * dot) / norm;
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (l, d) = dims(self.value(q));
                let hd = d / heads;
                let scale = T::of(1.0 / (hd as f64).sqrt());
                let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
                let sq = MatView::row_major(l);
                let mut ds_all = vec![T::zero(); heads * l * l];
                for h in 0..heads {
                    let head = MatView::at(h * hd, d);
                    let p = &probs[h * l * l..(h + 1) * l * l];
                    let ds = &mut ds_all[h * l * l..(h + 1) * l * l];
                    // dP = dO·Vᵀ
                    gemm(l, hd, l, T::one(), g, head, vd, head.t(), T::zero(), ds, sq);
                    softmax_backward_rows(p, ds, l);
                }
                acc(v, &mut |gv| {
                    for h in 0..heads {
                        let head = MatView::at(h * hd, d);
                        let p = &probs[h * l * l..(h + 1) * l * l];
                        gemm(l, l, hd, T::one(), p, sq.t(), g, head, T::one(), gv, head);
                    }
                });
                acc(q, &mut |gq| {
                    for h in 0..heads {
                        let head = MatView::at(h * hd, d);
                        let ds = &ds_all[h * l * l..(h + 1) * l * l];
                        gemm(l, l, hd, scale, ds, sq, kd, head, T::one(), gq, head);
                    }
                });
                acc(k, &mut |gk| {
                    for h in 0..heads {
                        let head = MatView::at(h * hd, d);
                        let ds = &ds_all[h * l * l..(h + 1) * l * l];
                        gemm(l, l, hd, scale, ds, sq.t(), qd, head, T::one(), gk, head);
                    }
                });
            }
        }
    }
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}
