//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value is a 2-D matrix: batched vectors are `[batch, width]`, a scalar
//! is `[1, 1]`. Operations append nodes to a [`Graph`]; [`Graph::backward`]
//! walks the nodes in reverse creation order and accumulates gradients.

use std::collections::HashMap;

use ndarray::{s, Axis};

use super::params::{Matrix, ParamId, ParameterStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Maximum(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Mean(Vec<Var>),
    WeightedSum { weights: Var, items: Vec<Var> },
    Sum(Var),
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Gather { table: Var, rows: Vec<usize> },
    GatherMean { table: Var, bags: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Matrix },
    MulConst(Var, Matrix),
    SelectRows { take_first: Vec<bool>, a: Var, b: Var },
}

#[derive(Debug)]
struct Node {
    value: Option<Matrix>,
    param: Option<ParamId>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
pub struct Graph<'a> {
    store: Option<&'a ParameterStore>,
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(m: &Matrix) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

impl<'a> Graph<'a> {
    /// A graph without parameters (inputs and constants only).
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn with_params(store: &'a ParameterStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(m), _) => m,
            (None, Some(p)) => self
                .store
                .expect("parameter node without a store")
                .get(p),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a parameter from the store. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        assert!(self.store.is_some(), "Graph::param on a graph without a store");
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::shape(
                "matmul",
                format!("{} by {}", shape_str(va), shape_str(vb)),
            ));
        }
        let out = va.dot(vb);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::shape(
                op,
                format!("{} vs {}", shape_str(va), shape_str(vb)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let mut out = self.value(a).clone();
        out.zip_mut_with(self.value(b), |x, &y| {
            if y > *x {
                *x = y
            }
        });
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Maximum(a, b), rg))
    }

    /// `x + row`, with `row` of shape `[1, cols]` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != vx.ncols() {
            return Err(Error::shape(
                "add_row",
                format!("{} plus row {}", shape_str(vx), shape_str(vr)),
            ));
        }
        let out = vx + vr;
        let rg = self.requires(x) || self.requires(row);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    /// `x * col`, with `col` of shape `[rows, 1]` broadcast over the columns of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (vx, vc) = (self.value(x), self.value(col));
        if vc.ncols() != 1 || vc.nrows() != vx.nrows() {
            return Err(Error::shape(
                "mul_col",
                format!("{} times column {}", shape_str(vx), shape_str(vc)),
            ));
        }
        let out = vx * vc;
        let rg = self.requires(x) || self.requires(col);
        Ok(self.push(out, Op::MulCol(x, col), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        let rg = self.requires(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| 1.0 - v);
        let rg = self.requires(x);
        self.push(out, Op::OneMinus(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(f64::tanh);
        let rg = self.requires(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        let rg = self.requires(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.requires(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis (each row).
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x), None);
        let rg = self.requires(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Row softmax restricted to entries where `valid` is nonzero; masked
    /// entries get probability exactly 0. Every row needs one valid entry.
    pub fn masked_softmax(&mut self, x: Var, valid: &Matrix) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != valid.dim() {
            return Err(Error::shape(
                "masked_softmax",
                format!("{} with mask {}", shape_str(vx), shape_str(valid)),
            ));
        }
        if valid.rows().into_iter().any(|r| r.iter().all(|&m| m == 0.0)) {
            return Err(Error::InvalidInput(
                "masked_softmax: a row has no valid entries".into(),
            ));
        }
        let out = softmax_rows(vx, Some(valid));
        let rg = self.requires(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let rows = self.value(parts[0]).nrows();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).nrows() != rows) {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts {} and {}", rows, self.value(*bad).nrows()),
            ));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let cols = self.value(parts[0]).ncols();
        if let Some(bad) = parts.iter().find(|&&p| self.value(p).ncols() != cols) {
            return Err(Error::shape(
                "concat_rows",
                format!("column counts {} and {}", cols, self.value(*bad).ncols()),
            ));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start >= end || end > vx.ncols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {}", shape_str(vx)),
            ));
        }
        let out = vx.slice(s![.., start..end]).to_owned();
        let rg = self.requires(x);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let vx = self.value(x);
        if start >= end || end > vx.nrows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {}", shape_str(vx)),
            ));
        }
        let out = vx.slice(s![start..end, ..]).to_owned();
        let rg = self.requires(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    /// Elementwise mean of equally shaped inputs.
    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::shape("mean", "no inputs"));
        }
        for &it in &items[1..] {
            self.same_shape("mean", items[0], it)?;
        }
        let mut out = self.value(items[0]).clone();
        for &it in &items[1..] {
            out += self.value(it);
        }
        out /= items.len() as f64;
        let rg = items.iter().any(|&p| self.requires(p));
        Ok(self.push(out, Op::Mean(items.to_vec()), rg))
    }

    /// `sum_i weights[:, i] * items[i]` with `weights: [rows, n]` and every
    /// item `[rows, cols]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let vw = self.value(weights);
        if items.is_empty() || vw.ncols() != items.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {} for {} items", shape_str(vw), items.len()),
            ));
        }
        let first = self.value(items[0]).dim();
        if first.0 != vw.nrows() {
            return Err(Error::shape(
                "weighted_sum",
                format!("weights {} for items {}x{}", shape_str(vw), first.0, first.1),
            ));
        }
        for &it in &items[1..] {
            self.same_shape("weighted_sum", items[0], it)?;
        }
        let mut out = Matrix::zeros(first);
        for (i, &it) in items.iter().enumerate() {
            let w = vw.column(i).insert_axis(Axis(1));
            out += &(&w * self.value(it));
        }
        let rg = self.requires(weights) || items.iter().any(|&p| self.requires(p));
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all entries, `[1, 1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(x).sum());
        let rg = self.requires(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Mean over rows, `[1, cols]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let out = vx.sum_axis(Axis(0)).insert_axis(Axis(0)) / vx.nrows() as f64;
        let rg = self.requires(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    /// Column-wise maximum over rows, `[1, cols]`. Ties go to the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut argmax = vec![0usize; vx.ncols()];
        let mut out = Matrix::zeros((1, vx.ncols()));
        for (c, col) in vx.columns().into_iter().enumerate() {
            let mut best = 0;
            for (r, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = r;
                }
            }
            argmax[c] = best;
            out[[0, c]] = col[best];
        }
        let rg = self.requires(x);
        self.push(out, Op::MaxRows { x, argmax }, rg)
    }

    /// Embedding lookup: one output row per index.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vt.nrows()) {
            return Err(Error::shape(
                "gather",
                format!("row {bad} of table {}", shape_str(vt)),
            ));
        }
        let mut out = Matrix::zeros((rows.len(), vt.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&vt.row(r));
        }
        let rg = self.requires(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean embedding per bag: output row `b` is the mean of the table rows
    /// listed in `bags[b]`. Bags must be nonempty.
    pub fn gather_mean(&mut self, table: Var, bags: &[Vec<usize>]) -> Result<Var> {
        let vt = self.value(table);
        let mut out = Matrix::zeros((bags.len(), vt.ncols()));
        for (b, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                return Err(Error::shape("gather_mean", format!("bag {b} is empty")));
            }
            let mut row = out.row_mut(b);
            for &r in bag {
                if r >= vt.nrows() {
                    return Err(Error::shape(
                        "gather_mean",
                        format!("row {r} of table {}", shape_str(vt)),
                    ));
                }
                row += &vt.row(r);
            }
            row /= bag.len() as f64;
        }
        let rg = self.requires(table);
        Ok(self.push(
            out,
            Op::GatherMean {
                table,
                bags: bags.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted sum over rows of `-ln softmax(logits)[row, target]`, `[1, 1]`.
    /// Rows with weight 0 (padding) contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if targets.len() != vl.nrows() || weights.len() != vl.nrows() {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {} with {} targets and {} weights",
                    shape_str(vl),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vl.ncols()) {
            return Err(Error::shape(
                "cross_entropy",
                format!("target {bad} with {} classes", vl.ncols()),
            ));
        }
        let probs = softmax_rows(vl, None);
        let mut loss = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != 0.0 {
                loss -= w * log_softmax_at(vl.row(r), t);
            }
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Elementwise product with a fixed matrix (masks, dropout).
    pub fn mul_const(&mut self, x: Var, factor: Matrix) -> Result<Var> {
        let vx = self.value(x);
        if vx.dim() != factor.dim() {
            return Err(Error::shape(
                "mul_const",
                format!("{} vs {}", shape_str(vx), shape_str(&factor)),
            ));
        }
        let out = vx * &factor;
        let rg = self.requires(x);
        Ok(self.push(out, Op::MulConst(x, factor), rg))
    }

    /// Row `r` comes from `a` when `take_first[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, take_first: &[bool], a: Var, b: Var) -> Result<Var> {
        self.same_shape("select_rows", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if take_first.len() != va.nrows() {
            return Err(Error::shape(
                "select_rows",
                format!("{} flags for {}", take_first.len(), shape_str(va)),
            ));
        }
        let mut out = vb.clone();
        for (r, &first) in take_first.iter().enumerate() {
            if first {
                out.row_mut(r).assign(&va.row(r));
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            out,
            Op::SelectRows {
                take_first: take_first.to_vec(),
                a,
                b,
            },
            rg,
        ))
    }

    /// Reverse-mode pass from a `[1, 1]` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let dims = self.dims(loss);
        if dims != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be 1x1, got {}x{}", dims.0, dims.1),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = || self.nodes[i].value.as_ref().expect("op node value");
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let ga = g.dot(&self.value(*b).t());
                    self.accumulate(grads, *a, ga);
                }
                if self.requires(*b) {
                    let gb = self.value(*a).t().dot(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.requires(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Maximum(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(&mut gb).and(va).and(vb).for_each(|ga, gb, &x, &y| {
                    if y > x {
                        *ga = 0.0;
                    } else {
                        *gb = 0.0;
                    }
                });
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires(*row) {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MulCol(x, col) => {
                if self.requires(*x) {
                    self.accumulate(grads, *x, g * self.value(*col));
                }
                if self.requires(*col) {
                    let gc = (g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Scale(x, f) => self.accumulate(grads, *x, g * *f),
            Op::OneMinus(x) => self.accumulate(grads, *x, -g),
            Op::Tanh(x) => {
                let y = out();
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let y = out();
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let y = out();
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &yv| {
                    if yv <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let y = out();
                let dot = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let gx = y * &(g - &dot);
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.requires(p) {
                        let gp = g.slice(s![.., start..start + w]).to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.value(p).nrows();
                    if self.requires(p) {
                        let gp = g.slice(s![start..start + h, ..]).to_owned();
                        self.accumulate(grads, p, gp);
                    }
                    start += h;
                }
            }
            Op::SliceCols(x, start) => {
                let mut gx = Matrix::zeros(self.dims(*x));
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows(x, start) => {
                let mut gx = Matrix::zeros(self.dims(*x));
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(items) => {
                let gi = g / items.len() as f64;
                for &it in items {
                    self.accumulate(grads, it, gi.clone());
                }
            }
            Op::WeightedSum { weights, items } => {
                let vw = self.value(*weights);
                let mut gw = Matrix::zeros(vw.dim());
                for (k, &it) in items.iter().enumerate() {
                    let w = vw.column(k).insert_axis(Axis(1));
                    if self.requires(it) {
                        self.accumulate(grads, it, g * &w);
                    }
                    if self.requires(*weights) {
                        let col = (g * self.value(it)).sum_axis(Axis(1));
                        gw.column_mut(k).assign(&col);
                    }
                }
                if self.requires(*weights) {
                    self.accumulate(grads, *weights, gw);
                }
            }
            Op::Sum(x) => {
                let gx = Matrix::from_elem(self.dims(*x), g[[0, 0]]);
                self.accumulate(grads, *x, gx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.dims(*x);
                let row = g / rows as f64;
                let gx = row.broadcast((rows, cols)).expect("row broadcast").to_owned();
                self.accumulate(grads, *x, gx);
            }
            Op::MaxRows { x, argmax } => {
                let mut gx = Matrix::zeros(self.dims(*x));
                for (c, &r) in argmax.iter().enumerate() {
                    gx[[r, c]] = g[[0, c]];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { table, rows } => {
                let mut gt = Matrix::zeros(self.dims(*table));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = gt.row_mut(r);
                    dst += &g.row(i);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::GatherMean { table, bags } => {
                let mut gt = Matrix::zeros(self.dims(*table));
                for (b, bag) in bags.iter().enumerate() {
                    let share = &g.row(b) / bag.len() as f64;
                    for &r in bag {
                        let mut dst = gt.row_mut(r);
                        dst += &share;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut gl = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let mut row = gl.row_mut(r);
                    if w == 0.0 {
                        row.fill(0.0);
                    } else {
                        row[t] -= 1.0;
                        row *= w * scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::MulConst(x, factor) => self.accumulate(grads, *x, g * factor),
            Op::SelectRows { take_first, a, b } => {
                let mut ga = g.clone();
                let mut gb = g.clone();
                for (r, &first) in take_first.iter().enumerate() {
                    if first {
                        gb.row_mut(r).fill(0.0);
                    } else {
                        ga.row_mut(r).fill(0.0);
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; `None` when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter bound into the graph that the loss reaches.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_ref().map(|g| (p, g)))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted row softmax; entries with `valid == 0` get 0.
pub fn softmax_rows(x: &Matrix, valid: Option<&Matrix>) -> Matrix {
    let mut out = x.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let keep = |c: usize| valid.is_none_or(|m| m[[r, c]] != 0.0);
        let max = row
            .iter()
            .enumerate()
            .filter(|&(c, _)| keep(c))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (c, v) in row.iter_mut().enumerate() {
            *v = if keep(c) { (*v - max).exp() } else { 0.0 };
            total += *v;
        }
        row /= total;
    }
    out
}

/// `ln softmax(row)[target]`, computed stably.
pub fn log_softmax_at(row: ndarray::ArrayView1<f64>, target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row[target] - lse
}
