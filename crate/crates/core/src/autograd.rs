//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! borrowed from their owning stores (one slice per *group*), so building a
//! graph never copies weights. [`Tape::backward`] accumulates parameter
//! gradients into a [`Gradients`] buffer and returns the gradients of any
//! inputs that were registered with `requires_grad`.

use std::collections::HashMap;

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Address of a parameter: the store it lives in and its slot there.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub group: usize,
    pub index: usize,
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Input,
    Param(ParamRef),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Matrix, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, weights: Vec<f64> },
    EmbeddingMean { table: Var, tokens: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
    Sum(Var),
}

struct Node {
    /// `None` for parameters, whose value lives in the borrowed store.
    value: Option<Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients, laid out like the stores they belong to.
#[derive(Debug, Clone)]
pub struct Gradients {
    groups: Vec<Vec<Option<Matrix>>>,
}

impl Gradients {
    /// `sizes[g]` is the number of parameters in group `g`.
    pub fn new(sizes: &[usize]) -> Self {
        Self { groups: sizes.iter().map(|&n| vec![None; n]).collect() }
    }

    pub fn get(&self, p: ParamRef) -> Option<&Matrix> {
        self.groups.get(p.group)?.get(p.index)?.as_ref()
    }

    pub fn group(&self, g: usize) -> &[Option<Matrix>] {
        &self.groups[g]
    }

    fn accumulate(&mut self, p: ParamRef, g: &Matrix) {
        match &mut self.groups[p.group][p.index] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: &Gradients) {
        for (mine, theirs) in self.groups.iter_mut().zip(&other.groups) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                match (a.as_mut(), b) {
                    (Some(acc), Some(g)) => acc.add_assign(g),
                    (None, Some(g)) => *a = Some(g.clone()),
                    _ => {}
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.groups.iter_mut().flatten().flatten() {
            g.scale_assign(factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.groups.iter().flatten().flatten().map(Matrix::sum_squares).sum::<f64>().sqrt()
    }
}

/// Gradients of the inputs registered with `requires_grad`.
#[derive(Debug, Default)]
pub struct InputGrads {
    grads: HashMap<Var, Matrix>,
}

impl InputGrads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(&v)
    }
}

pub struct Tape<'p> {
    groups: Vec<&'p [Matrix]>,
    trainable: Vec<bool>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamRef, Var>,
}

impl<'p> Tape<'p> {
    pub fn new(groups: Vec<&'p [Matrix]>) -> Self {
        let trainable = vec![true; groups.len()];
        Self { groups, trainable, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    /// Parameters of a frozen group are read but never receive gradients.
    pub fn freeze_group(&mut self, group: usize) {
        self.trainable[group] = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(p)) => &self.groups[p.group][p.index],
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.input(value, false)
    }

    pub fn param(&mut self, p: ParamRef) -> Var {
        if let Some(&v) = self.param_vars.get(&p) {
            return v;
        }
        let needs_grad = self.trainable[p.group];
        self.nodes.push(Node { value: None, op: Op::Param(p), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(p, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, trans_b: false }, ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(false, self.value(b), true);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul { a, b, trans_b: true }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "bias must be a single row");
        let mut value = self.value(a).clone();
        let bias = bias.data().to_vec();
        for r in 0..value.rows() {
            for (v, b) in value.row_mut(r).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddRow(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, factor), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(value, Op::AddScalar(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(value, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    /// Row-wise softmax. The mask is either one flag per column, shared by all
    /// rows, or a full row-major `rows x cols` grid. Masked entries get weight
    /// exactly 0; a row with no valid entry is all zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let value = softmax_rows(self.value(a), mask);
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 x n` gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut value = normed.clone();
        for r in 0..rows {
            for ((v, gi), bi) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *v = *v * gi + bi;
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, normed, inv_std }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::hcat(&mats).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&v| self.ng(v));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "column slice out of range");
        let mut value = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&v| self.value(v).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows: column counts differ");
            data.extend_from_slice(m.data());
        }
        let value = Matrix::from_vec(rows, cols, data).expect("sizes checked");
        let ng = parts.iter().any(|&v| self.ng(v));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "row slice out of range");
        let cols = xv.cols();
        let value =
            Matrix::from_vec(len, cols, xv.data()[start * cols..(start + len) * cols].to_vec())
                .expect("sizes checked");
        let ng = self.ng(x);
        self.push(value, Op::SliceRows { x, start }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).select_rows(idx);
        let ng = self.ng(x);
        self.push(value, Op::GatherRows { x, idx: idx.to_vec() }, ng)
    }

    /// Places row `i` of `x` at row `idx[i]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(rows, xv.cols());
        for (i, &target) in idx.iter().enumerate() {
            value.row_mut(target).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(value, Op::ScatterRows { x, idx: idx.to_vec() }, ng)
    }

    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Var {
        let mut value = self.value(x).clone();
        for (r, &w) in weights.iter().enumerate() {
            for v in value.row_mut(r) {
                *v *= w;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::ScaleRows { x, weights: weights.to_vec() }, ng)
    }

    /// Row `i` is the mean of the embedding-table rows listed in `tokens[i]`.
    pub fn embedding_mean(&mut self, table: Var, tokens: &[Vec<usize>]) -> Var {
        let tv = self.value(table);
        let mut value = Matrix::zeros(tokens.len(), tv.cols());
        for (r, ids) in tokens.iter().enumerate() {
            assert!(!ids.is_empty(), "embedding_mean needs at least one token per row");
            let inv = 1.0 / ids.len() as f64;
            let out = value.row_mut(r);
            for &t in ids {
                for (o, e) in out.iter_mut().zip(tv.row(t)) {
                    *o += e;
                }
            }
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let ng = self.ng(table);
        self.push(value, Op::EmbeddingMean { table, tokens: tokens.to_vec() }, ng)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per logit row");
        let probs = softmax_rows(lv, None);
        let loss: f64 = targets.iter().enumerate().map(|(r, &t)| -log_softmax_at(lv.row(r), t)).sum();
        let ng = self.ng(logits);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients into
    /// `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> InputGrads {
        let mut node_grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        node_grads.resize_with(loss.0 + 1, || None);
        let lv = self.value(loss);
        node_grads[loss.0] = Some(Matrix::filled(lv.rows(), lv.cols(), 1.0));
        let mut inputs = InputGrads::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut send = |v: Var, contrib: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut node_grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Input => {
                    inputs.grads.insert(Var(i), g);
                }
                Op::Param(p) => grads.accumulate(*p, &g),
                Op::MatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        send(*a, g.matmul_t(false, bv, !trans_b));
                    }
                    if self.ng(*b) {
                        let gb = if *trans_b { g.matmul_t(true, av, false) } else { av.matmul_t(true, &g, false) };
                        send(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        send(*a, g.zip_map(bv, |x, y| x * y));
                    }
                    if self.ng(*b) {
                        send(*b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::AddRow(a, b) => {
                    send(*b, g.col_sums());
                    send(*a, g);
                }
                Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
                Op::AddScalar(a) => send(*a, g),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    send(*a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    send(*a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)));
                }
                Op::Relu(a) => {
                    let y = node.value.as_ref().expect("value");
                    send(*a, g.zip_map(y, |gi, yi| if yi > 0.0 { gi } else { 0.0 }));
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yi), gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    send(*a, ga);
                }
                Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                    let gam = self.value(*gamma).data();
                    if self.ng(*gamma) {
                        send(*gamma, g.zip_map(normed, |a, b| a * b).col_sums());
                    }
                    if self.ng(*beta) {
                        send(*beta, g.col_sums());
                    }
                    if self.ng(*x) {
                        let cols = g.cols();
                        let mut gx = Matrix::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            let dn: Vec<f64> = g.row(r).iter().zip(gam).map(|(a, b)| a * b).collect();
                            let nr = normed.row(r);
                            let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                            let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            for ((o, d), n) in gx.row_mut(r).iter_mut().zip(&dn).zip(nr) {
                                *o = inv_std[r] * (d - mean_dn - n * mean_dn_n);
                            }
                        }
                        send(*x, gx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let mut gp = Matrix::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            send(p, gp);
                        }
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(*x, gx);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        if self.ng(p) {
                            let gp = Matrix::from_vec(h, cols, g.data()[off * cols..(off + h) * cols].to_vec())
                                .expect("sizes checked");
                            send(p, gp);
                        }
                        off += h;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    let cols = xv.cols();
                    gx.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                    send(*x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*x, gx);
                }
                Op::ScatterRows { x, idx } => send(*x, g.select_rows(idx)),
                Op::ScaleRows { x, weights } => {
                    let mut gx = g;
                    for (r, &w) in weights.iter().enumerate() {
                        for v in gx.row_mut(r) {
                            *v *= w;
                        }
                    }
                    send(*x, gx);
                }
                Op::EmbeddingMean { table, tokens } => {
                    let tv = self.value(*table);
                    let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                    for (r, ids) in tokens.iter().enumerate() {
                        let inv = 1.0 / ids.len() as f64;
                        for &t in ids {
                            for (o, v) in gt.row_mut(t).iter_mut().zip(g.row(r)) {
                                *o += v * inv;
                            }
                        }
                    }
                    send(*table, gt);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g.get(0, 0);
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let v = gl.get(r, t);
                        gl.set(r, t, v - 1.0);
                    }
                    gl.scale_assign(scale);
                    send(*logits, gl);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    send(*a, Matrix::filled(av.rows(), av.cols(), g.get(0, 0)));
                }
            }
        }
        inputs
    }
}

/// Row-wise softmax with an optional column mask (see [`Tape::softmax_rows`]).
pub fn softmax_rows(x: &Matrix, mask: Option<&[bool]>) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let cols = x.cols();
    if let Some(m) = mask {
        assert!(m.len() == cols || m.len() == x.len(), "mask length {} fits neither {} columns nor the grid", m.len(), cols);
    }
    for r in 0..x.rows() {
        let row = x.row(r);
        let valid = |c: usize| mask.is_none_or(|m| if m.len() == cols { m[c] } else { m[r * cols + c] });
        let max = (0..row.len()).filter(|&c| valid(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut total = 0.0;
        let o = out.row_mut(r);
        for c in 0..row.len() {
            if valid(c) {
                let e = (row[c] - max).exp();
                o[c] = e;
                total += e;
            }
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    out
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}
