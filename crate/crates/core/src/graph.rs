//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass as a node. Leaf
//! nodes may borrow parameter storage (`'p`), so binding a frozen model to a
//! fresh graph costs nothing. [`Graph::backward`] walks the tape in reverse
//! and returns owned [`Gradients`], leaving the graph reusable.
//!
//! All operations work on 2-D `rows × cols` views; higher-rank tensors are
//! flattened over their leading dimensions. Scalars have shape `[1]`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Vec<f64>),
    Borrowed(&'p [f64]),
}

impl Value<'_> {
    fn as_slice(&self) -> &[f64] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulRow { a: Var, row: Var },
    Gelu(Var),
    Ln(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    WeightedNll { logp: Var, targets: Vec<usize>, weights: Vec<f64>, norm: f64 },
    Kl { p_ref: Vec<f64>, logp: Var, mask: Vec<f64>, norm: f64 },
}

struct Node<'p> {
    rows: usize,
    cols: usize,
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Causal mask layout for [`Graph::causal_softmax`]: `prefix` leading
/// columns hold prefix slots, followed by one column per sequence position.
#[derive(Clone, Copy, Debug)]
pub struct CausalMask {
    pub prefix: usize,
    pub prefix_visible: bool,
}

impl CausalMask {
    pub fn plain() -> Self {
        CausalMask { prefix: 0, prefix_visible: true }
    }

    #[inline]
    fn allows(&self, row: usize, col: usize) -> bool {
        if col < self.prefix {
            self.prefix_visible
        } else {
            col - self.prefix <= row
        }
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor) -> Result<()> {
        if let Some(g) = self.get(v) {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node handle in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'p> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.as_slice()
    }

    /// `(rows, cols)` of a node.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).unwrap()
    }

    /// Binds a tensor as a leaf without copying. Gradients are recorded when
    /// `tensor.requires_grad` is set.
    pub fn param(&mut self, tensor: &'p Tensor) -> Var {
        self.leaf_ref(tensor.data(), tensor.rows(), tensor.cols(), tensor.requires_grad)
    }

    /// Borrowed leaf with explicit layout and trainability.
    pub fn leaf_ref(&mut self, data: &'p [f64], rows: usize, cols: usize, requires_grad: bool) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf_ref: layout does not match data");
        self.nodes.push(Node { rows, cols, value: Value::Borrowed(data), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf.
    pub fn leaf(&mut self, data: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> Var {
        assert_eq!(data.len(), rows * cols, "leaf: layout does not match data");
        self.push(rows, cols, data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.leaf(data, rows, cols, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(vec![x], 1, 1, false)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    fn same_dims(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Shape(format!("{op}: shapes {da:?} and {db:?} differ")));
        }
        Ok(da)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            let bshape = if tb { format!("[{br}, {bc}]ᵀ") } else { format!("[{br}, {bc}]") };
            return Err(Error::Shape(format!("matmul: [{m}, {k}] × {bshape}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), tb, &mut out, false);
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul { a, b, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, "div")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x / y).collect();
        let rg = self.grad_any(&[a, b]);
        Ok(self.push(r, c, out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.grad_any(&[a]);
        self.push(r, c, out, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, s: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x + s).collect();
        let rg = self.grad_any(&[a]);
        self.push(r, c, out, Op::AddConst(a), rg)
    }

    /// Multiplies every row of `a: r×c` elementwise by `row: 1×c`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.node(row).rows * self.node(row).cols != c {
            return Err(Error::Shape(format!("mul_row: [{r}, {c}] with row of {:?}", self.dims(row))));
        }
        let s = self.value(row);
        let out = self.value(a).chunks(c).flat_map(|x| x.iter().zip(s).map(|(u, v)| u * v)).collect();
        let rg = self.grad_any(&[a, row]);
        Ok(self.push(r, c, out, Op::MulRow { a, row }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let rg = self.grad_any(&[a]);
        self.push(r, c, out, Op::Gelu(a), rg)
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|x| x.ln()).collect();
        let rg = self.grad_any(&[a]);
        self.push(r, c, out, Op::Ln(a), rg)
    }

    /// Row-wise layer normalization with learned `gain` and `bias` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape(format!("layer_norm: width {c} vs gain/bias")));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            out.extend(row.iter().zip(g).zip(b).map(|((v, gi), bi)| (v - mean) * rs * gi + bi));
        }
        let rg = self.grad_any(&[x, gain, bias]);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Input("embedding: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("token id {bad} out of range for vocabulary of {v}")));
        }
        let t = self.value(table);
        let out = ids.iter().flat_map(|&i| t[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.grad_any(&[table]);
        Ok(self.push(ids.len(), d, out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Rows `0..rows` of `a` (a leading slice), copied.
    pub fn head_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if rows == 0 || rows > r {
            return Err(Error::Shape(format!("head_rows: {rows} of {r}")));
        }
        // Expressed through embedding-style gathering of an identity selection.
        let ids: Vec<usize> = (0..rows).collect();
        let out = self.value(a)[..rows * c].to_vec();
        let rg = self.grad_any(&[a]);
        Ok(self.push(rows, c, out, Op::Embedding { table: a, ids }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!("slice_cols: [{start}, {}) of width {c}", start + len)));
        }
        let out = self.value(a).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let rg = self.grad_any(&[a]);
        Ok(self.push(r, len, out, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let c: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        let rg = self.grad_any(parts);
        Ok(self.push(r, c, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let r: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(r * c);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.grad_any(parts);
        Ok(self.push(r, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Row-wise softmax over the last axis, stabilized by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax: NaN input".into()));
        }
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            softmax_row(row, |_| true, &mut out);
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(r, c, out, Op::Softmax(a), rg))
    }

    /// Row-wise softmax with a causal mask: row `i` attends to prefix slots
    /// (if visible) and sequence columns `0..=i`. Masked entries are exactly 0.
    pub fn causal_softmax(&mut self, a: Var, mask: CausalMask) -> Result<Var> {
        let (r, c) = self.dims(a);
        if c != mask.prefix + r {
            return Err(Error::Shape(format!(
                "causal_softmax: scores [{r}, {c}] with prefix {}",
                mask.prefix
            )));
        }
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("causal_softmax: NaN input".into()));
        }
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in x.chunks(c).enumerate() {
            softmax_row(row, |j| mask.allows(i, j), &mut out);
        }
        let rg = self.grad_any(&[a]);
        // The mask is fully determined by the output zeros, so plain softmax
        // backward applies.
        Ok(self.push(r, c, out, Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        let x = self.value(a);
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax: NaN input".into()));
        }
        let mut out = Vec::with_capacity(r * c);
        for row in x.chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|v| v - lse));
        }
        let rg = self.grad_any(&[a]);
        Ok(self.push(r, c, out, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.grad_any(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a), rg)
    }

    /// `-(1/N) Σ_t w_t · logp[t, target_t]` where `N` counts positions with a
    /// nonzero weight.
    pub fn weighted_nll(&mut self, logp: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (t, v) = self.dims(logp);
        if targets.len() != t || weights.len() != t {
            return Err(Error::Shape(format!(
                "weighted_nll: {t} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&x| x >= v) {
            return Err(Error::Input(format!("target id {bad} out of range for {v} classes")));
        }
        if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Input("weighted_nll: weights must be finite and non-negative".into()));
        }
        let count = weights.iter().filter(|&&w| w != 0.0).count();
        if count == 0 {
            return Err(Error::ZeroMass);
        }
        let norm = count as f64;
        let lp = self.value(logp);
        let total: f64 = (0..t).filter(|&i| weights[i] != 0.0).map(|i| weights[i] * lp[i * v + targets[i]]).sum();
        let rg = self.grad_any(&[logp]);
        Ok(self.push(
            1,
            1,
            vec![-total / norm],
            Op::WeightedNll { logp, targets: targets.to_vec(), weights: weights.to_vec(), norm },
            rg,
        ))
    }

    /// `Σ_t mask_t · KL(p_ref[t] ‖ exp(logp_new[t])) / norm`. The reference is
    /// a constant; gradients flow into `logp_new` only.
    pub fn kl_log_with_norm(&mut self, p_ref: &[f64], logp_new: Var, mask: &[f64], norm: f64) -> Result<Var> {
        let (t, v) = self.dims(logp_new);
        if p_ref.len() != t * v || mask.len() != t {
            return Err(Error::Shape(format!(
                "kl: reference of {} values and mask of {} for [{t}, {v}]",
                p_ref.len(),
                mask.len()
            )));
        }
        check_rows(p_ref, v, "reference")?;
        let lq = self.value(logp_new);
        let mut total = 0.0;
        for i in 0..t {
            if mask[i] == 0.0 {
                continue;
            }
            let mut row = 0.0;
            for j in 0..v {
                let p = p_ref[i * v + j];
                if p > 0.0 {
                    row += p * (p.ln() - lq[i * v + j]);
                }
            }
            total += mask[i] * row;
        }
        let rg = self.grad_any(&[logp_new]);
        Ok(self.push(
            1,
            1,
            vec![total / norm],
            Op::Kl { p_ref: p_ref.to_vec(), logp: logp_new, mask: mask.to_vec(), norm },
            rg,
        ))
    }

    /// Masked mean of row-wise `KL(p_ref ‖ exp(logp_new))` over the selected rows.
    pub fn kl_rowwise_log(&mut self, p_ref: &[f64], logp_new: Var, mask: &[f64]) -> Result<Var> {
        let (_, v) = self.dims(logp_new);
        let new_probs: Vec<f64> = self.value(logp_new).iter().map(|x| x.exp()).collect();
        check_rows(&new_probs, v, "new")?;
        let count = mask.iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(Error::ZeroMass);
        }
        self.kl_log_with_norm(p_ref, logp_new, mask, count as f64)
    }

    /// Masked mean of row-wise `KL(p_ref ‖ p_new)` where both are row
    /// distributions; gradients flow into `p_new` only.
    pub fn kl_rowwise(&mut self, p_ref: &[f64], p_new: Var, mask: &[f64]) -> Result<Var> {
        let (_, v) = self.dims(p_new);
        check_rows(self.value(p_new), v, "new")?;
        let logp = self.ln(p_new);
        self.kl_rowwise_log(p_ref, logp, mask)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(Error::Shape(format!("backward: loss must be scalar, got [{r}, {c}]")));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<'p>, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.as_slice();
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.requires_grad(*a) {
                    // dA = dY · op(B)ᵀ
                    let g = slot(grads, *a, m * k);
                    gemm(m, n, k, dy, false, self.value(*b), !*tb, g, true);
                }
                if self.requires_grad(*b) {
                    if *tb {
                        // B is n×k: dB = dYᵀ · A
                        let g = slot(grads, *b, n * k);
                        gemm(n, m, k, dy, true, self.value(*a), false, g, true);
                    } else {
                        // dB = Aᵀ · dY
                        let g = slot(grads, *b, k * n);
                        gemm(k, m, n, self.value(*a), true, dy, false, g, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(slot(grads, v, dy.len()), dy);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b);
                    slot(grads, *a, dy.len()).iter_mut().zip(dy).zip(bv).for_each(|((g, d), x)| *g += d * x);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    slot(grads, *b, dy.len()).iter_mut().zip(dy).zip(av).for_each(|((g, d), x)| *g += d * x);
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.requires_grad(*a) {
                    slot(grads, *a, dy.len()).iter_mut().zip(dy).zip(bv).for_each(|((g, d), x)| *g += d / x);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a);
                    slot(grads, *b, dy.len())
                        .iter_mut()
                        .enumerate()
                        .for_each(|(i, g)| *g -= dy[i] * av[i] / (bv[i] * bv[i]));
                }
            }
            Op::Scale(a, s) => {
                slot(grads, *a, dy.len()).iter_mut().zip(dy).for_each(|(g, d)| *g += d * s);
            }
            Op::AddConst(a) => add_into(slot(grads, *a, dy.len()), dy),
            Op::MulRow { a, row } => {
                let s = self.value(*row);
                if self.requires_grad(*a) {
                    let g = slot(grads, *a, dy.len());
                    for (gr, dr) in g.chunks_mut(cols).zip(dy.chunks(cols)) {
                        gr.iter_mut().zip(dr).zip(s).for_each(|((g, d), x)| *g += d * x);
                    }
                }
                if self.requires_grad(*row) {
                    let av = self.value(*a);
                    let g = slot(grads, *row, cols);
                    for (ar, dr) in av.chunks(cols).zip(dy.chunks(cols)) {
                        g.iter_mut().zip(dr).zip(ar).for_each(|((g, d), x)| *g += d * x);
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let g = slot(grads, *a, dy.len());
                for i in 0..dy.len() {
                    let xi = x[i];
                    let u = GELU_C * (xi + GELU_A * xi * xi * xi);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * xi * xi);
                    g[i] += dy[i] * (0.5 * (1.0 + th) + 0.5 * xi * (1.0 - th * th) * du);
                }
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                slot(grads, *a, dy.len()).iter_mut().zip(dy).zip(x).for_each(|((g, d), v)| *g += d / v);
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = cols as f64;
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = if self.requires_grad(*x) { Some(vec![0.0; rows * cols]) } else { None };
                for i in 0..rows {
                    let row = &xv[i * cols..(i + 1) * cols];
                    let mean = row.iter().sum::<f64>() / c;
                    let rs = rstd[i];
                    let dyr = &dy[i * cols..(i + 1) * cols];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * rs;
                        dxhat[j] = dyr[j] * gv[j];
                        dgain[j] += dyr[j] * xhat[j];
                        dbias[j] += dyr[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        for j in 0..cols {
                            dx[i * cols + j] = rs / c * (c * dxhat[j] - s1 - xhat[j] * s2);
                        }
                    }
                }
                if let Some(dx) = dx {
                    add_into(slot(grads, *x, rows * cols), &dx);
                }
                if self.requires_grad(*gain) {
                    add_into(slot(grads, *gain, cols), &dgain);
                }
                if self.requires_grad(*bias) {
                    add_into(slot(grads, *bias, cols), &dbias);
                }
            }
            Op::Embedding { table, ids } => {
                let total = self.value(*table).len();
                let g = slot(grads, *table, total);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut g[id * cols..(id + 1) * cols], &dy[r * cols..(r + 1) * cols]);
                }
            }
            Op::SliceCols { a, start } => {
                let (ar, ac) = self.dims(*a);
                let g = slot(grads, *a, ar * ac);
                for i in 0..rows {
                    add_into(&mut g[i * ac + start..i * ac + start + cols], &dy[i * cols..(i + 1) * cols]);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if self.requires_grad(p) {
                        let g = slot(grads, p, rows * pc);
                        for i in 0..rows {
                            add_into(&mut g[i * pc..(i + 1) * pc], &dy[i * cols + off..i * cols + off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.requires_grad(p) {
                        add_into(slot(grads, p, n), &dy[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Softmax(a) => {
                let g = slot(grads, *a, dy.len());
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let dr = &dy[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for j in 0..cols {
                        g[i * cols + j] += yr[j] * (dr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let g = slot(grads, *a, dy.len());
                for i in 0..rows {
                    let yr = &y[i * cols..(i + 1) * cols];
                    let dr = &dy[i * cols..(i + 1) * cols];
                    let s: f64 = dr.iter().sum();
                    for j in 0..cols {
                        g[i * cols + j] += dr[j] - yr[j].exp() * s;
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                slot(grads, *a, n).iter_mut().for_each(|g| *g += dy[0]);
            }
            Op::WeightedNll { logp, targets, weights, norm } => {
                let (t, v) = self.dims(*logp);
                let g = slot(grads, *logp, t * v);
                for i in 0..t {
                    if weights[i] != 0.0 {
                        g[i * v + targets[i]] -= dy[0] * weights[i] / norm;
                    }
                }
            }
            Op::Kl { p_ref, logp, mask, norm } => {
                let (t, v) = self.dims(*logp);
                let g = slot(grads, *logp, t * v);
                for i in 0..t {
                    if mask[i] == 0.0 {
                        continue;
                    }
                    for j in 0..v {
                        g[i * v + j] -= dy[0] * mask[i] * p_ref[i * v + j] / norm;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn softmax_row(row: &[f64], allowed: impl Fn(usize) -> bool, out: &mut Vec<f64>) {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    let mut total = 0.0;
    for (j, &v) in row.iter().enumerate() {
        let e = if allowed(j) { (v - max).exp() } else { 0.0 };
        total += e;
        out.push(e);
    }
    out[start..].iter_mut().for_each(|e| *e /= total);
}

const ROW_SUM_TOL: f64 = 1e-6;

fn check_rows(p: &[f64], cols: usize, what: &str) -> Result<()> {
    for (i, row) in p.chunks(cols).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Distribution(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}
