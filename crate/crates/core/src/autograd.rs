//! Define-by-run reverse-mode differentiation.
//!
//! Every operation executed through a [`Tape`] appends a node holding its
//! output value and enough saved state to apply the local vector-Jacobian
//! product. Nodes can only reference earlier nodes, so the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dot, matmul_into, matmul_t_into, matmul_tn_into, Tensor};

/// Variance floor used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One row of a sampled-softmax objective: output row `row` is scored
/// against `candidates` (the first `positives` of which are targets), each
/// logit shifted down by the matching entry of `offsets`.
#[derive(Clone, Debug)]
pub struct CandidateRow {
    pub row: usize,
    pub candidates: Vec<usize>,
    pub offsets: Vec<f64>,
    pub positives: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Affine(usize, f64),
    MulConst(usize, Tensor),
    Sigmoid(usize),
    Tanh(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    SelectRows {
        x: usize,
        rows: Vec<usize>,
    },
    RepeatRows(usize),
    Sum(usize),
    SampledSoftmax {
        out: usize,
        table: usize,
        rows: Vec<CandidateRow>,
        probs: Vec<Vec<f64>>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    slot: Option<usize>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded value that requires grad.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of parameter leaves, keyed by parameter slot.
    pub fn params(&self) -> &BTreeMap<usize, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<usize, Tensor> {
        self.params
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            slot: None,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn leaf(&self, value: Arc<Tensor>, requires_grad: bool, slot: Option<usize>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            slot,
        });
        Var(nodes.len() - 1)
    }

    /// Trainable parameter living in slot `slot` of a parameter store.
    pub fn param(&self, slot: usize, value: Arc<Tensor>) -> Var {
        self.leaf(value, true, Some(slot))
    }

    /// Free leaf; with `requires_grad` its gradient is reported by
    /// [`Gradients::wrt`].
    pub fn input(&self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf(Arc::new(value), requires_grad, None)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn val(&self, v: Var) -> Arc<Tensor> {
        self.value(v)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul(&self.val(b))?;
        self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0], "matmul")
    }

    /// `a · bᵀ`; with `b` stored as `[out × in]` this is a linear layer.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).matmul_t(&self.val(b))?;
        self.push(out, Op::MatMulT(a.0, b.0), &[a.0, b.0], "matmul_t")
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = self.val(x).transpose();
        self.push(out, Op::Transpose(x.0), &[x.0], "transpose")
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshape(shape)?;
        self.push(out, Op::Reshape(x.0), &[x.0], "reshape")
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a.0, b.0), &[a.0, b.0], "add")
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0], "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0], "mul")
    }

    /// Adds `row` (any tensor with `cols(x)` elements) to every row of `x`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.val(x), self.val(row));
        if tr.len() != tx.cols() {
            return Err(Error::shape("add_row", tx.shape(), tr.shape()));
        }
        let mut out = (*tx).clone();
        let c = tx.cols();
        for r in 0..tx.rows() {
            for (o, b) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x.0, row.0), &[x.0, row.0], "add_row")
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.val(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x.0, scale), &[x.0], "affine")
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.affine(x, c, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 1.0)
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&self, x: Var, c: Tensor) -> Result<Var> {
        let tx = self.val(x);
        if tx.shape() != c.shape() {
            return Err(Error::shape("mul_const", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::MulConst(x.0, c), &[x.0], "mul_const")
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        let out = self.val(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x.0), &[x.0], "sigmoid")
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        let out = self.val(x).map(f64::tanh);
        self.push(out, Op::Tanh(x.0), &[x.0], "tanh")
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self, x: Var) -> Result<Var> {
        let out = softmax_rows(&self.val(x), false)?;
        self.push(out, Op::Softmax(x.0), &[x.0], "softmax_rows")
    }

    /// Row-wise softmax of a square matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax_rows(&self, x: Var) -> Result<Var> {
        let out = softmax_rows(&self.val(x), true)?;
        self.push(out, Op::Softmax(x.0), &[x.0], "causal_softmax_rows")
    }

    /// Normalizes each row to zero mean and unit variance (population
    /// variance plus [`LAYER_NORM_EPS`]), then applies `gain ⊙ x + bias`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.val(x), self.val(gain), self.val(bias));
        let d = tx.cols();
        if tg.len() != d || tb.len() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let (xhat, inv_std) = normalize_rows(&tx);
        let mut out = xhat.clone();
        for r in 0..tx.rows() {
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(tg.data()).zip(tb.data()) {
                *o = *o * g + b;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
            "layer_norm",
        )
    }

    /// Concatenates along the column axis; all parts must have equal rows.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let rows = vals
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?
            .rows();
        if let Some(bad) = vals.iter().find(|v| v.rows() != rows) {
            return Err(Error::shape("concat_cols", vals[0].shape(), bad.shape()));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push(out, Op::ConcatCols(ids.clone()), &ids, "concat_cols")
    }

    /// Stacks parts vertically; all parts must have equal columns.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.val(p)).collect();
        let cols = vals
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?
            .cols();
        if let Some(bad) = vals.iter().find(|v| v.cols() != cols) {
            return Err(Error::shape("concat_rows", vals[0].shape(), bad.shape()));
        }
        let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
        let rows = data.len() / cols;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let out = Tensor::from_parts(vec![rows, cols], data);
        self.push(out, Op::ConcatRows(ids.clone()), &ids, "concat_rows")
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.val(x);
        if len == 0 || start + len > tx.cols() {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![tx.rows(), len], data);
        self.push(out, Op::SliceCols { x: x.0, start }, &[x.0], "slice_cols")
    }

    /// Gathers rows by index (embedding lookup); indices may repeat.
    pub fn select_rows(&self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.val(x);
        if rows.is_empty() {
            return Err(Error::InvalidArgument("select_rows with no indices".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= tx.rows()) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * tx.cols());
        for &r in rows {
            data.extend_from_slice(tx.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), tx.cols()], data);
        self.push(
            out,
            Op::SelectRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            &[x.0],
            "select_rows",
        )
    }

    pub fn row(&self, x: Var, r: usize) -> Result<Var> {
        self.select_rows(x, &[r])
    }

    /// Tiles a single row `n` times into an `[n × cols]` matrix.
    pub fn repeat_rows(&self, x: Var, n: usize) -> Result<Var> {
        let tx = self.val(x);
        if tx.rows() != 1 || n == 0 {
            return Err(Error::shape("repeat_rows", tx.shape(), &[n]));
        }
        let out = Tensor::from_parts(vec![n, tx.cols()], tx.data().repeat(n));
        self.push(out, Op::RepeatRows(x.0), &[x.0], "repeat_rows")
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0], "sum")
    }

    /// Mean over rows of the cross-entropy of a softmax over candidate
    /// logits `out[row] · table[c] - offset_c`, where each row's loss is
    /// the average negative log-probability of its positives.
    pub fn sampled_softmax_xent(&self, out: Var, table: Var, rows: Vec<CandidateRow>) -> Result<Var> {
        let (to, tt) = (self.val(out), self.val(table));
        if to.cols() != tt.cols() {
            return Err(Error::shape("sampled_softmax_xent", to.shape(), tt.shape()));
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("sampled softmax over no rows".into()));
        }
        let mut probs = Vec::with_capacity(rows.len());
        let mut total = 0.0;
        for cr in &rows {
            if cr.row >= to.rows()
                || cr.positives == 0
                || cr.positives > cr.candidates.len()
                || cr.offsets.len() != cr.candidates.len()
                || cr.candidates.iter().any(|&c| c >= tt.rows())
            {
                return Err(Error::InvalidArgument(format!(
                    "malformed candidate row {} ({} candidates, {} positives)",
                    cr.row,
                    cr.candidates.len(),
                    cr.positives
                )));
            }
            let o = to.row(cr.row);
            let logits: Vec<f64> = cr
                .candidates
                .iter()
                .zip(&cr.offsets)
                .map(|(&c, off)| dot(o, tt.row(c)) - off)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            let log_denom = denom.ln() + max;
            let nll: f64 = logits[..cr.positives].iter().map(|z| log_denom - z).sum::<f64>()
                / cr.positives as f64;
            total += nll;
            probs.push(exps.into_iter().map(|e| e / denom).collect());
        }
        let loss = total / rows.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SampledSoftmax {
                out: out.0,
                table: table.0,
                rows,
                probs,
            },
            &[out.0, table.0],
            "sampled_softmax_xent",
        )
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one
    /// backward pass.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Backward(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let n = loss.0 + 1;
        if loss.0 >= nodes.len() {
            return Err(Error::Backward("loss is not on this tape".into()));
        }
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(
            nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        ));

        for i in (0..n).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            propagate(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate().take(n) {
            if let (Some(slot), Some(g)) = (node.slot, grads[i].as_ref()) {
                params
                    .entry(slot)
                    .and_modify(|acc: &mut Tensor| acc.add_assign(g))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

/// Accumulates into the gradient slot of node `i`, allocating zeros on
/// first touch.
fn grad_mut<'a>(nodes: &[Node], grads: &'a mut [Option<Tensor>], i: usize) -> Option<&'a mut Tensor> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| Tensor::zeros(nodes[i].value.shape())))
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
            if let Some(ga) = grad_mut(nodes, grads, *a) {
                // dA = G · Bᵀ
                matmul_t_into(g.data(), tb.data(), ga.data_mut(), m, n, k);
            }
            if let Some(gb) = grad_mut(nodes, grads, *b) {
                // dB = Aᵀ · G
                matmul_tn_into(ta.data(), g.data(), gb.data_mut(), m, k, n);
            }
        }
        Op::MatMulT(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
            if let Some(ga) = grad_mut(nodes, grads, *a) {
                // dA = G · B
                matmul_into(g.data(), tb.data(), ga.data_mut(), m, n, k);
            }
            if let Some(gb) = grad_mut(nodes, grads, *b) {
                // dB = Gᵀ · A
                matmul_tn_into(g.data(), ta.data(), gb.data_mut(), m, n, k);
            }
        }
        Op::Transpose(x) => {
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                gx.add_assign(&g.transpose());
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for (a, b) in gx.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = grad_mut(nodes, grads, *a) {
                ga.add_assign(g);
            }
            if let Some(gb) = grad_mut(nodes, grads, *b) {
                gb.add_assign(g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_mut(nodes, grads, *a) {
                ga.add_assign(g);
            }
            if let Some(gb) = grad_mut(nodes, grads, *b) {
                for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                    *x -= y;
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = grad_mut(nodes, grads, *a) {
                for ((x, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                    *x += gv * bv;
                }
            }
            if let Some(gb) = grad_mut(nodes, grads, *b) {
                for ((x, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    *x += gv * av;
                }
            }
        }
        Op::AddRow(x, row) => {
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                gx.add_assign(g);
            }
            if let Some(gr) = grad_mut(nodes, grads, *row) {
                let c = g.cols();
                for r in 0..g.rows() {
                    for (a, b) in gr.data_mut().iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *a += b;
                    }
                }
            }
        }
        Op::Affine(x, scale) => {
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for (a, b) in gx.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
        Op::MulConst(x, c) => {
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for ((a, b), m) in gx.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                    *a += b * m;
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.clone();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for ((a, b), s) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *a += b * s * (1.0 - s);
                }
            }
        }
        Op::Tanh(x) => {
            let y = node.value.clone();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for ((a, b), t) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *a += b * (1.0 - t * t);
                }
            }
        }
        Op::Softmax(x) => {
            let y = node.value.clone();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                let c = y.cols();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let inner = dot(yr, gr);
                    for ((a, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *a += yv * (gv - inner);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let tg = nodes[*gain].value.clone();
            let d = xhat.cols();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for r in 0..xhat.rows() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    for ((dh, gv), gain) in dxhat.iter_mut().zip(gr).zip(tg.data()) {
                        *dh = gv * gain;
                    }
                    let xr = xhat.row(r);
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx = dot(&dxhat, xr);
                    let k = inv_std[r] / d as f64;
                    for ((a, dh), xh) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xr) {
                        *a += k * (d as f64 * dh - sum_d - xh * sum_dx);
                    }
                }
            }
            if let Some(gg) = grad_mut(nodes, grads, *gain) {
                for r in 0..xhat.rows() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    for ((a, gv), xh) in gg.data_mut().iter_mut().zip(gr).zip(xhat.row(r)) {
                        *a += gv * xh;
                    }
                }
            }
            if let Some(gb) = grad_mut(nodes, grads, *bias) {
                for r in 0..xhat.rows() {
                    for (a, gv) in gb.data_mut().iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += gv;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = grad_mut(nodes, grads, p) {
                    for r in 0..g.rows() {
                        let src = &g.data()[r * total + offset..r * total + offset + w];
                        for (a, b) in gp.row_mut(r).iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if let Some(gp) = grad_mut(nodes, grads, p) {
                    for (a, b) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                        *a += b;
                    }
                }
                offset += len;
            }
        }
        Op::SliceCols { x, start } => {
            let w = g.cols();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for r in 0..g.rows() {
                    let dst = &mut gx.row_mut(r)[*start..start + w];
                    for (a, b) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                        *a += b;
                    }
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let c = g.cols();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for (k, &r) in rows.iter().enumerate() {
                    let src = &g.data()[k * c..(k + 1) * c];
                    for (a, b) in gx.row_mut(r).iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        Op::RepeatRows(x) => {
            let c = g.cols();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for r in 0..g.rows() {
                    for (a, b) in gx.data_mut().iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *a += b;
                    }
                }
            }
        }
        Op::Sum(x) => {
            let s = g.item();
            if let Some(gx) = grad_mut(nodes, grads, *x) {
                for a in gx.data_mut() {
                    *a += s;
                }
            }
        }
        Op::SampledSoftmax {
            out,
            table,
            rows,
            probs,
        } => {
            let scale = g.item() / rows.len() as f64;
            let (to, tt) = (nodes[*out].value.clone(), nodes[*table].value.clone());
            let d = to.cols();
            let want_out = nodes[*out].requires_grad;
            let want_table = nodes[*table].requires_grad;
            let mut g_out = if want_out { Some(Tensor::zeros(to.shape())) } else { None };
            let mut g_table = if want_table { Some(Tensor::zeros(tt.shape())) } else { None };
            for (cr, p) in rows.iter().zip(probs) {
                let inv_pos = 1.0 / cr.positives as f64;
                let o = to.row(cr.row);
                for (k, (&c, &pk)) in cr.candidates.iter().zip(p).enumerate() {
                    let dz = scale * (pk - if k < cr.positives { inv_pos } else { 0.0 });
                    if dz == 0.0 {
                        continue;
                    }
                    if let Some(go) = g_out.as_mut() {
                        for (a, v) in go.data_mut()[cr.row * d..(cr.row + 1) * d].iter_mut().zip(tt.row(c)) {
                            *a += dz * v;
                        }
                    }
                    if let Some(gt) = g_table.as_mut() {
                        for (a, v) in gt.row_mut(c).iter_mut().zip(o) {
                            *a += dz * v;
                        }
                    }
                }
            }
            if let (Some(src), Some(dst)) = (g_out, grad_mut(nodes, grads, *out)) {
                dst.add_assign(&src);
            }
            if let (Some(src), Some(dst)) = (g_table, grad_mut(nodes, grads, *table)) {
                dst.add_assign(&src);
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Plain row-wise softmax; `causal` masks entries above the diagonal.
pub fn softmax_rows(x: &Tensor, causal: bool) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    if causal && rows != cols {
        return Err(Error::shape("causal_softmax_rows", x.shape(), &[rows, rows]));
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let visible = if causal { r + 1 } else { cols };
        let src = &x.row(r)[..visible];
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out.row_mut(r)[..visible];
        let mut sum = 0.0;
        for (o, v) in dst.iter_mut().zip(src) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in dst.iter_mut() {
            *o /= sum;
        }
    }
    if x.shape().len() != 2 {
        return out.reshape(x.shape());
    }
    Ok(out)
}

/// Row-wise standardization; returns normalized rows and `1/sqrt(var+eps)`.
pub fn normalize_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let d = x.cols();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}
