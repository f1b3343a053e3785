//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! replays the record in reverse to accumulate gradients. All tensors are
//! two-dimensional: row vectors are `1 x n`, scalars are `1 x 1`. Masks are
//! plain metadata (`&[bool]`), not tape values.
//!
//! Shape agreement is asserted here; callers that accept untrusted shapes
//! validate them first and return typed errors.

use ndarray::{s, Array2, ArrayView2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
// tanh form of GELU
const GELU_COEF: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// scale * x + shift; only the scale matters to the gradient
    Affine { x: Var, scale: f64 },
    /// (L x d) + (1 x d), the row broadcast used for biases
    AddRow { x: Var, row: Var },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    /// Row-wise masked softmax; masked columns produce exactly zero, so
    /// the backward pass needs no mask.
    SoftmaxRows { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    /// Mean over rows where `mask` is true, producing `1 x d`.
    MeanRows { x: Var, mask: Vec<bool> },
    Ln(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SumAll(Var),
    /// Fused recurrent cell state: `sigmoid(f) * c_prev + sigmoid(i) *
    /// tanh(g)` with `gates = [i f g o]` packed as `1 x 4h`.
    LstmState { gates: Var, c_prev: Var },
    /// Fused recurrent cell output: `sigmoid(o) * tanh(c)`.
    LstmOutput { gates: Var, c: Var },
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    /// Forward-pass intermediates kept for the backward pass.
    stash: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Recording of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            stash: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_stashed(
        &mut self,
        value: Array2<f64>,
        stash: Array2<f64>,
        op: Op,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            stash: if needs_grad { Some(stash) } else { None },
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; gradients are not tracked through it.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; `grad` is populated by [`Tape::backward`].
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on non-scalar node");
        a[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a node, zeros if it was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Array2<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[v.0].value.dim()),
        }
    }

    /// Move a node's gradient out of the tape, zeros if never reached.
    pub fn take_grad(&mut self, v: Var) -> Array2<f64> {
        match self.nodes[v.0].grad.take() {
            Some(g) => g,
            None => Array2::zeros(self.nodes[v.0].value.dim()),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul {ar}x{ac} . {br}x{bc}");
        let value = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let value = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let value = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        let ng = self.needs(x);
        self.push(value, Op::Affine { x, scale }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (_, xc) = self.shape(x);
        let (rr, rc) = self.shape(row);
        assert_eq!((rr, rc), (1, xc), "add_row bias shape");
        let value = self.value(x) + self.value(row);
        let ng = self.needs(x) || self.needs(row);
        self.push(value, Op::AddRow { x, row }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut value = Array2::zeros((rows, total));
        let mut at = 0;
        for p in parts {
            let (pr, pc) = self.shape(*p);
            assert_eq!(pr, rows, "concat_cols row count");
            value.slice_mut(s![.., at..at + pc]).assign(self.value(*p));
            at += pc;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut value = Array2::zeros((total, cols));
        let mut at = 0;
        for p in parts {
            let (pr, pc) = self.shape(*p);
            assert_eq!(pc, cols, "concat_rows col count");
            value.slice_mut(s![at..at + pr, ..]).assign(self.value(*p));
            at += pr;
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (rows, _) = self.shape(x);
        assert!(start + len <= rows, "slice_rows range");
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(x);
        self.push(value, Op::SliceRows { x, start }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (_, cols) = self.shape(x);
        assert!(start + len <= cols, "slice_cols range");
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(value, Op::SliceCols { x, start }, ng)
    }

    /// Row-wise softmax over the columns marked true in `mask`. Masked
    /// columns get weight exactly 0.0. At least one column must be valid.
    pub fn softmax_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(mask.len(), cols, "softmax mask length");
        assert!(mask.iter().any(|m| *m), "softmax with all-masked columns");
        let mut value = Array2::zeros((rows, cols));
        for r in 0..rows {
            let row = self.value(x).row(r);
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if mask[c] && row[c] > max {
                    max = row[c];
                }
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if mask[c] {
                    let e = (row[c] - max).exp();
                    value[[r, c]] = e;
                    sum += e;
                }
            }
            for c in 0..cols {
                if mask[c] {
                    value[[r, c]] /= sum;
                }
            }
        }
        let ng = self.needs(x);
        self.push(value, Op::SoftmaxRows { x }, ng)
    }

    /// Layer normalization over the feature (column) axis of each row,
    /// with learnable gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(self.shape(gain), (1, cols), "layer_norm gain shape");
        assert_eq!(self.shape(bias), (1, cols), "layer_norm bias shape");
        let mut value = Array2::zeros((rows, cols));
        {
            let xv = self.value(x);
            let gv = self.value(gain).row(0);
            let bv = self.value(bias).row(0);
            for r in 0..rows {
                let row = xv.row(r);
                let mean = row.mean().unwrap();
                let var = row.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / cols as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let mut out = value.row_mut(r);
                for c in 0..cols {
                    out[c] = (row[c] - mean) * inv * gv[c] + bv[c];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(value, Op::LayerNorm { x, gain, bias }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = xv.mapv(|v| fast_tanh(SQRT_2_OVER_PI * (v + GELU_COEF * v * v * v)));
        let value = xv * &t.mapv(|tv| 0.5 * (1.0 + tv));
        let ng = self.needs(x);
        self.push_stashed(value, t, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(fast_tanh);
        let ng = self.needs(x);
        self.push(value, Op::Tanh(x), ng)
    }

    /// Mean over the rows marked true in `mask`, producing a `1 x d` row.
    pub fn mean_rows(&mut self, x: Var, mask: &[bool]) -> Var {
        let (rows, cols) = self.shape(x);
        assert_eq!(mask.len(), rows, "mean_rows mask length");
        let count = mask.iter().filter(|m| **m).count();
        assert!(count > 0, "mean_rows with all-masked rows");
        let mut acc = Array2::zeros((1, cols));
        for r in 0..rows {
            if mask[r] {
                let row = self.value(x).row(r);
                for c in 0..cols {
                    acc[[0, c]] += row[c];
                }
            }
        }
        acc /= count as f64;
        let ng = self.needs(x);
        self.push(
            acc,
            Op::MeanRows {
                x,
                mask: mask.to_vec(),
            },
            ng,
        )
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::ln);
        let ng = self.needs(x);
        self.push(value, Op::Ln(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).mapv(|v| v.clamp(lo, hi));
        let ng = self.needs(x);
        self.push(value, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(x).sum());
        let ng = self.needs(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// New cell state from packed gate pre-activations and the previous
    /// state.
    pub fn lstm_state(&mut self, gates: Var, c_prev: Var) -> Var {
        let (gr, gc) = self.shape(gates);
        let (cr, h) = self.shape(c_prev);
        assert_eq!((gr, cr), (1, 1), "lstm state operates on rows");
        assert_eq!(gc, 4 * h, "gates must pack four blocks of the state dim");
        let g = self.value(gates);
        let c = self.value(c_prev);
        let mut acts = Array2::zeros((1, 3 * h));
        let mut value = Array2::zeros((1, h));
        for j in 0..h {
            let i = sigmoid(g[[0, j]]);
            let f = sigmoid(g[[0, h + j]]);
            let cand = fast_tanh(g[[0, 2 * h + j]]);
            acts[[0, j]] = i;
            acts[[0, h + j]] = f;
            acts[[0, 2 * h + j]] = cand;
            value[[0, j]] = f * c[[0, j]] + i * cand;
        }
        let ng = self.needs(gates) || self.needs(c_prev);
        self.push_stashed(value, acts, Op::LstmState { gates, c_prev }, ng)
    }

    /// Cell output from packed gate pre-activations and the new state.
    pub fn lstm_output(&mut self, gates: Var, c: Var) -> Var {
        let (gr, gc) = self.shape(gates);
        let (cr, h) = self.shape(c);
        assert_eq!((gr, cr), (1, 1), "lstm output operates on rows");
        assert_eq!(gc, 4 * h, "gates must pack four blocks of the state dim");
        let g = self.value(gates);
        let cv = self.value(c);
        let mut acts = Array2::zeros((1, 2 * h));
        let mut value = Array2::zeros((1, h));
        for j in 0..h {
            let o = sigmoid(g[[0, 3 * h + j]]);
            let tc = fast_tanh(cv[[0, j]]);
            acts[[0, j]] = o;
            acts[[0, h + j]] = tc;
            value[[0, j]] = o * tc;
        }
        let ng = self.needs(gates) || self.needs(c);
        self.push_stashed(value, acts, Op::LstmOutput { gates, c }, ng)
    }

    /// Weighted sum `sum(probe * x)`, handy for turning an output tensor
    /// into the scalar a gradient check needs.
    pub fn probe_sum(&mut self, x: Var, probe: &Array2<f64>) -> Var {
        let p = self.leaf(probe.clone());
        let m = self.mul(x, p);
        self.sum_all(m)
    }

    // ---- backward ----

    /// Accumulate gradients of `loss` (a `1 x 1` node) into every node
    /// with `needs_grad` set, in reverse recording order.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.shape(loss), (1, 1), "backward on non-scalar loss");
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none()
                || !self.nodes[i].needs_grad
                || matches!(self.nodes[i].op, Op::Leaf)
            {
                continue;
            }
            self.step_back(i);
        }
    }

    fn accumulate(&mut self, target: Var, delta: ArrayView2<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[target.0];
        match &mut node.grad {
            Some(g) => *g += &delta,
            None => node.grad = Some(delta.to_owned()),
        }
    }

    fn accumulate_rows(&mut self, target: Var, start: usize, delta: ArrayView2<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[target.0];
        let dim = node.value.dim();
        let g = node.grad.get_or_insert_with(|| Array2::zeros(dim));
        let mut region = g.slice_mut(s![start..start + delta.nrows(), ..]);
        region += &delta;
    }

    fn accumulate_cols(&mut self, target: Var, start: usize, delta: ArrayView2<f64>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let node = &mut self.nodes[target.0];
        let dim = node.value.dim();
        let g = node.grad.get_or_insert_with(|| Array2::zeros(dim));
        let mut region = g.slice_mut(s![.., start..start + delta.ncols()]);
        region += &delta;
    }

    fn step_back(&mut self, i: usize) {
        // The output gradient is fully accumulated once we reach node i,
        // so it can be taken by value.
        let g = self.nodes[i].grad.take().expect("grad present");
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = g.dot(&self.value(*b).t());
                    self.accumulate(*a, da.view());
                }
                if self.needs(*b) {
                    let db = self.value(*a).t().dot(&g);
                    self.accumulate(*b, db.view());
                }
            }
            Op::Transpose(a) => {
                let da = g.t().to_owned();
                self.accumulate(*a, da.view());
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.view());
                self.accumulate(*b, g.view());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = &g * self.value(*b);
                    self.accumulate(*a, da.view());
                }
                if self.needs(*b) {
                    let db = &g * self.value(*a);
                    self.accumulate(*b, db.view());
                }
            }
            Op::Affine { x, scale } => {
                let dx = g.mapv(|v| v * scale);
                self.accumulate(*x, dx.view());
            }
            Op::AddRow { x, row } => {
                self.accumulate(*x, g.view());
                if self.needs(*row) {
                    let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(*row, drow.view());
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    let dg = g.slice(s![.., at..at + w]).to_owned();
                    self.accumulate(*p, dg.view());
                    at += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    let dg = g.slice(s![at..at + h, ..]).to_owned();
                    self.accumulate(*p, dg.view());
                    at += h;
                }
            }
            Op::SliceRows { x, start } => {
                self.accumulate_rows(*x, *start, g.view());
            }
            Op::SliceCols { x, start } => {
                self.accumulate_cols(*x, *start, g.view());
            }
            Op::SoftmaxRows { x } => {
                // dX_rc = y_rc * (g_rc - sum_k g_rk y_rk); masked columns
                // have y = 0 and thus zero gradient.
                let y = &self.nodes[i].value;
                let mut dx = Array2::zeros(y.dim());
                for r in 0..y.nrows() {
                    let dot: f64 = (0..y.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum();
                    for c in 0..y.ncols() {
                        dx[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                self.accumulate(*x, dx.view());
            }
            Op::LayerNorm { x, gain, bias } => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Array2::zeros((rows, cols));
                let mut dgain = Array2::zeros((1, cols));
                let mut dbias = Array2::zeros((1, cols));
                {
                    let xv = self.value(*x);
                    let gv = self.value(*gain).row(0);
                    let mut normed = vec![0.0; cols];
                    let mut dn = vec![0.0; cols];
                    for r in 0..rows {
                        let row = xv.row(r);
                        let grow = g.row(r);
                        let mean = row.mean().unwrap();
                        let var =
                            row.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / cols as f64;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for c in 0..cols {
                            normed[c] = (row[c] - mean) * inv;
                            dn[c] = grow[c] * gv[c];
                            mean_dn += dn[c];
                            mean_dn_n += dn[c] * normed[c];
                            dgain[[0, c]] += grow[c] * normed[c];
                            dbias[[0, c]] += grow[c];
                        }
                        mean_dn /= cols as f64;
                        mean_dn_n /= cols as f64;
                        let mut dxr = dx.row_mut(r);
                        for c in 0..cols {
                            dxr[c] = inv * (dn[c] - mean_dn - normed[c] * mean_dn_n);
                        }
                    }
                }
                self.accumulate(*x, dx.view());
                self.accumulate(*gain, dgain.view());
                self.accumulate(*bias, dbias.view());
            }
            Op::Gelu(x) => {
                let t = self.nodes[i].stash.as_ref().expect("gelu stash");
                let xv = self.value(*x);
                let mut dx = Array2::zeros(g.dim());
                for ((r, c), d) in dx.indexed_iter_mut() {
                    *d = g[[r, c]] * gelu_slope_from_tanh(xv[[r, c]], t[[r, c]]);
                }
                self.accumulate(*x, dx.view());
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[i].value;
                let dx = y.mapv(|v| v * (1.0 - v)) * &g;
                self.accumulate(*x, dx.view());
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let dx = y.mapv(|v| 1.0 - v * v) * &g;
                self.accumulate(*x, dx.view());
            }
            Op::MeanRows { x, mask } => {
                let (rows, cols) = self.shape(*x);
                let count = mask.iter().filter(|m| **m).count() as f64;
                let mut dx = Array2::zeros((rows, cols));
                for r in 0..rows {
                    if mask[r] {
                        for c in 0..cols {
                            dx[[r, c]] = g[[0, c]] / count;
                        }
                    }
                }
                self.accumulate(*x, dx.view());
            }
            Op::Ln(x) => {
                let dx = &g / self.value(*x);
                self.accumulate(*x, dx.view());
            }
            Op::Clamp { x, lo, hi } => {
                let mut dx = g.clone();
                let v = self.value(*x);
                for ((r, c), d) in dx.indexed_iter_mut() {
                    if v[[r, c]] <= *lo || v[[r, c]] >= *hi {
                        *d = 0.0;
                    }
                }
                self.accumulate(*x, dx.view());
            }
            Op::SumAll(x) => {
                let dx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                self.accumulate(*x, dx.view());
            }
            Op::LstmState { gates, c_prev } => {
                let h = self.shape(*c_prev).1;
                let acts = self.nodes[i].stash.as_ref().expect("lstm state stash");
                let cv = self.value(*c_prev);
                let mut dgates = Array2::zeros((1, 4 * h));
                let mut dc = Array2::zeros((1, h));
                for j in 0..h {
                    let igate = acts[[0, j]];
                    let fgate = acts[[0, h + j]];
                    let cand = acts[[0, 2 * h + j]];
                    let up = g[[0, j]];
                    dgates[[0, j]] = up * cand * igate * (1.0 - igate);
                    dgates[[0, h + j]] = up * cv[[0, j]] * fgate * (1.0 - fgate);
                    dgates[[0, 2 * h + j]] = up * igate * (1.0 - cand * cand);
                    dc[[0, j]] = up * fgate;
                }
                self.accumulate(*gates, dgates.view());
                self.accumulate(*c_prev, dc.view());
            }
            Op::LstmOutput { gates, c } => {
                let h = self.shape(*c).1;
                let acts = self.nodes[i].stash.as_ref().expect("lstm output stash");
                let mut dgates = Array2::zeros((1, 4 * h));
                let mut dc = Array2::zeros((1, h));
                for j in 0..h {
                    let o = acts[[0, j]];
                    let tc = acts[[0, h + j]];
                    let up = g[[0, j]];
                    dgates[[0, 3 * h + j]] = up * tc * o * (1.0 - o);
                    dc[[0, j]] = up * o * (1.0 - tc * tc);
                }
                self.accumulate(*gates, dgates.view());
                self.accumulate(*c, dc.view());
            }
        }
        self.nodes[i].op = op;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `1 - 2 / (exp(2x) + 1)`; agrees with `f64::tanh` to a couple of ulps
/// and is markedly faster on this libm.
fn fast_tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

fn gelu_slope_from_tanh(x: f64, t: f64) -> f64 {
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::Stream;

    fn random(stream: &mut Stream, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| stream.range(-1.0, 1.0))
    }

    /// Finite-difference check of a single tape op: builds the graph with
    /// `f`, perturbs every input element, compares against the analytic
    /// gradient.
    fn check_op<F>(inputs: &[Array2<f64>], f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eps = 1e-6;
        let eval = |ins: &[Array2<f64>]| -> (f64, Vec<Array2<f64>>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().map(|a| tape.param(a.clone())).collect();
            let out = f(&mut tape, &vars);
            let loss = tape.sum_all(out);
            let val = tape.scalar(loss);
            tape.backward(loss);
            let grads = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
            (val, grads)
        };
        let (_, analytic) = eval(inputs);
        let mut work: Vec<Array2<f64>> = inputs.to_vec();
        for (k, input) in inputs.iter().enumerate() {
            for ((r, c), _) in input.indexed_iter() {
                work[k][[r, c]] = input[[r, c]] + eps;
                let (plus, _) = eval(&work);
                work[k][[r, c]] = input[[r, c]] - eps;
                let (minus, _) = eval(&work);
                work[k][[r, c]] = input[[r, c]];
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[k][[r, c]];
                let denom = 1.0_f64.max(a.abs()).max(numeric.abs());
                assert!(
                    ((a - numeric) / denom).abs() < 1e-7,
                    "input {k} elem ({r},{c}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        let mut s = Stream::with_tag(1, "matmul");
        let a = random(&mut s, 3, 4);
        let b = random(&mut s, 4, 2);
        check_op(&[a, b], |t, v| t.matmul(v[0], v[1]));
    }

    #[test]
    fn elementwise_gradients() {
        let mut s = Stream::with_tag(2, "elem");
        let a = random(&mut s, 2, 3);
        let b = random(&mut s, 2, 3);
        check_op(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        check_op(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        check_op(&[a.clone()], |t, v| t.affine(v[0], 2.5, -0.75));
        check_op(&[a.clone()], |t, v| t.gelu(v[0]));
        check_op(&[a.clone()], |t, v| t.sigmoid(v[0]));
        check_op(&[a], |t, v| t.tanh(v[0]));
    }

    #[test]
    fn structural_gradients() {
        let mut s = Stream::with_tag(3, "struct");
        let a = random(&mut s, 3, 2);
        let b = random(&mut s, 3, 4);
        let c = random(&mut s, 2, 4);
        let bias = random(&mut s, 1, 4);
        check_op(&[a.clone(), b.clone()], |t, v| t.concat_cols(&[v[0], v[1]]));
        check_op(&[b.clone(), c.clone()], |t, v| t.concat_rows(&[v[0], v[1]]));
        check_op(&[b.clone()], |t, v| t.slice_rows(v[0], 1, 2));
        check_op(&[b.clone()], |t, v| t.slice_cols(v[0], 1, 3));
        check_op(&[b.clone(), bias], |t, v| t.add_row(v[0], v[1]));
        check_op(&[a], |t, v| t.transpose(v[0]));
    }

    #[test]
    fn softmax_gradients_respect_mask() {
        let mut s = Stream::with_tag(4, "softmax");
        let x = random(&mut s, 3, 5);
        let mask = vec![true, true, false, true, true];
        check_op(&[x.clone()], {
            let mask = mask.clone();
            move |t, v| t.softmax_rows(v[0], &mask)
        });
        // masked column carries exactly zero weight
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.softmax_rows(xv, &mask);
        for r in 0..3 {
            assert_eq!(tape.value(y)[[r, 2]], 0.0);
            let sum: f64 = tape.value(y).row(r).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut s = Stream::with_tag(5, "ln");
        let x = random(&mut s, 3, 6);
        let gain = random(&mut s, 1, 6);
        let bias = random(&mut s, 1, 6);
        check_op(&[x, gain, bias], |t, v| t.layer_norm(v[0], v[1], v[2]));
    }

    #[test]
    fn pooling_and_log_gradients() {
        let mut s = Stream::with_tag(6, "pool");
        let x = random(&mut s, 4, 3);
        let mask = vec![true, false, true, true];
        check_op(&[x.clone()], {
            let mask = mask.clone();
            move |t, v| t.mean_rows(v[0], &mask)
        });
        let pos = x.mapv(|v| v.abs() + 0.5);
        check_op(&[pos], |t, v| t.ln(v[0]));
    }

    #[test]
    fn fused_lstm_cell_gradients() {
        let mut s = Stream::with_tag(7, "lstm");
        let gates = random(&mut s, 1, 12);
        let c_prev = random(&mut s, 1, 3);
        check_op(&[gates.clone(), c_prev.clone()], |t, v| {
            t.lstm_state(v[0], v[1])
        });
        check_op(&[gates.clone(), c_prev.clone()], |t, v| {
            let c = t.lstm_state(v[0], v[1]);
            t.lstm_output(v[0], c)
        });
        // fused path equals the composed elementwise path
        let mut tape = Tape::new();
        let gv = tape.leaf(gates.clone());
        let cv = tape.leaf(c_prev.clone());
        let c_fused = tape.lstm_state(gv, cv);
        let h_fused = tape.lstm_output(gv, c_fused);
        let i_raw = tape.slice_cols(gv, 0, 3);
        let i = tape.sigmoid(i_raw);
        let f_raw = tape.slice_cols(gv, 3, 3);
        let f = tape.sigmoid(f_raw);
        let g_raw = tape.slice_cols(gv, 6, 3);
        let cand = tape.tanh(g_raw);
        let o_raw = tape.slice_cols(gv, 9, 3);
        let o = tape.sigmoid(o_raw);
        let keep = tape.mul(f, cv);
        let write = tape.mul(i, cand);
        let c_ref = tape.add(keep, write);
        let c_act = tape.tanh(c_ref);
        let h_ref = tape.mul(o, c_act);
        for j in 0..3 {
            assert!((tape.value(c_fused)[[0, j]] - tape.value(c_ref)[[0, j]]).abs() < 1e-14);
            assert!((tape.value(h_fused)[[0, j]] - tape.value(h_ref)[[0, j]]).abs() < 1e-14);
        }
    }

    #[test]
    fn clamp_passes_gradient_only_inside() {
        let x = ndarray::array![[0.2, 0.9, -0.4]];
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let y = tape.clamp(xv, 0.0, 0.5);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        let g = tape.grad(xv).unwrap();
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[0, 1]], 0.0);
        assert_eq!(g[[0, 2]], 0.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x + x: dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.param(ndarray::array![[3.0]]);
        let y = tape.add(x, x);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn constant_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(ndarray::array![[1.0, 2.0]]);
        let p = tape.param(ndarray::array![[3.0, 4.0]]);
        let y = tape.mul(x, p);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(p).is_some());
    }
}
