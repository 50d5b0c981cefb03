//! Define-by-run reverse-mode differentiation.
//!
//! Operations execute eagerly and record themselves on a tape in
//! topological order; `backward` replays the tape once in reverse and
//! accumulates leaf gradients into the parameter store. Gradients keep
//! accumulating across backward calls until the store is zeroed.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(ParamId),
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// a + c·b
    AddScaled(NodeId, NodeId, f64),
    ScaleConst(NodeId, f64),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    /// Masked entries output exact zeros, so backward needs no mask data.
    Softmax { x: NodeId },
    Gelu(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    GatherRows {
        matrix: NodeId,
        ids: Vec<usize>,
    },
    ReplaceRows {
        base: NodeId,
        rows: NodeId,
        positions: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    MeanRows(NodeId),
    SumAll(NodeId),
    /// sum((a-b)^2) / divisor
    MseLoss {
        a: NodeId,
        b: NodeId,
        divisor: f64,
    },
    /// mean over i of -log softmax(logits[positions[i]])[targets[i]]
    LmNll {
        logits: NodeId,
        targets: Vec<u32>,
        positions: Vec<usize>,
    },
    /// x scaled by a 1×1 node
    ScaleByScalar {
        x: NodeId,
        s: NodeId,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Snapshot a parameter onto the tape. Differentiated only while the
    /// parameter is trainable in the active phase.
    pub fn leaf(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf(id), p.trainable)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add_scaled")?;
        let cs = S::from_f64(c);
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x + cs * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::AddScaled(a, b, c), rg))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64(c);
        let value = map_tensor(self.value(a), |x| cs * x);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::ScaleConst(a, c), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Transpose(a), rg)
    }

    /// Row softmax with max-subtraction. `key_mask[j] = false` excludes
    /// column j everywhere; `causal_offset = Some(off)` additionally limits
    /// row i to columns j ≤ i + off.
    pub fn softmax_rows(
        &mut self,
        x: NodeId,
        key_mask: Option<&[bool]>,
        causal_offset: Option<usize>,
    ) -> Result<NodeId> {
        let input = self.value(x);
        if let Some(mask) = key_mask {
            if mask.len() != input.cols() {
                return Err(Error::Mask(format!(
                    "key mask length {} does not cover {} columns",
                    mask.len(),
                    input.cols()
                )));
            }
            if mask.iter().all(|&m| !m) {
                return Err(Error::Mask("softmax over fully-masked keys".into()));
            }
        }
        if input.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let value = softmax_forward(input, key_mask, causal_offset)?;
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(self.value(a), gelu_scalar);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(self.value(a), |x| x * sigmoid_scalar(x));
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = map_tensor(self.value(a), sigmoid_scalar);
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Row-wise layer norm with learned gain and bias (1×d each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).cols();
        for (id, label) in [(gain, "gain"), (bias, "bias")] {
            let t = self.value(id);
            if t.shape() != (1, d) {
                return Err(Error::dimension(format!(
                    "layer_norm {label} must be 1x{d}, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        let value = layer_norm_forward(self.value(x), self.value(gain), self.value(bias));
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias }, rg))
    }

    /// Embedding lookup: out[i] = matrix[ids[i]].
    pub fn gather_rows(&mut self, matrix: NodeId, ids: &[usize]) -> Result<NodeId> {
        let m = self.value(matrix);
        if let Some(&bad) = ids.iter().find(|&&i| i >= m.rows()) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                m.rows()
            )));
        }
        let mut out = Tensor::zeros(ids.len(), m.cols());
        for (r, &src) in ids.iter().enumerate() {
            let row: Vec<S> = m.row_slice(src).to_vec();
            out.data_mut()[r * m.cols()..(r + 1) * m.cols()].copy_from_slice(&row);
        }
        let rg = self.nodes[matrix.0].requires_grad;
        Ok(self.push(
            out,
            Op::GatherRows {
                matrix,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Overwrite base rows at `positions` with the rows of `rows`, in order.
    pub fn replace_rows(
        &mut self,
        base: NodeId,
        rows: NodeId,
        positions: &[usize],
    ) -> Result<NodeId> {
        let b = self.value(base);
        let r = self.value(rows);
        if r.rows() != positions.len() || r.cols() != b.cols() {
            return Err(Error::dimension(format!(
                "replace_rows: {} positions with rows {}x{} into base {}x{}",
                positions.len(),
                r.rows(),
                r.cols(),
                b.rows(),
                b.cols()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= b.rows()) {
            return Err(Error::contract(format!(
                "replace_rows position {bad} out of range for {} rows",
                b.rows()
            )));
        }
        let mut out = b.clone();
        let cols = out.cols();
        for (i, &p) in positions.iter().enumerate() {
            let row: Vec<S> = r.row_slice(i).to_vec();
            out.data_mut()[p * cols..(p + 1) * cols].copy_from_slice(&row);
        }
        let rg = self.any_grad(&[base, rows]);
        Ok(self.push(
            out,
            Op::ReplaceRows {
                base,
                rows,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::dimension(format!(
                "slice_cols {start}..{} exceeds {} columns",
                start + len,
                t.cols()
            )));
        }
        let mut out = Tensor::zeros(t.rows(), len);
        for r in 0..t.rows() {
            for c in 0..len {
                out.set(r, c, t.at(r, start + c));
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, Op::SliceCols { x, start, len }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::dimension("concat_cols row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for r in 0..rows {
                for c in 0..t.cols() {
                    out.set(r, offset + c, t.at(r, c));
                }
            }
            offset += t.cols();
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column means over the rows: m×d → 1×d.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.rows() == 0 {
            return Err(Error::contract("mean_rows of empty tensor"));
        }
        let inv = S::from_f64(1.0 / t.rows() as f64);
        let mut out = Tensor::zeros(1, t.cols());
        for c in 0..t.cols() {
            let mut acc = S::zero();
            for r in 0..t.rows() {
                acc = acc + t.at(r, c);
            }
            out.set(0, c, acc * inv);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, Op::MeanRows(x), rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let mut acc = S::zero();
        for v in t.data() {
            acc = acc + *v;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(acc), Op::SumAll(x), rg)
    }

    /// sum((a-b)^2) / divisor as a scalar node.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId, divisor: f64) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mse_loss")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut acc = S::zero();
        for (x, y) in ta.data().iter().zip(tb.data().iter()) {
            let d = *x - *y;
            acc = acc + d * d;
        }
        let value = Tensor::scalar(acc * S::from_f64(1.0 / divisor));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MseLoss { a, b, divisor }, rg))
    }

    /// Mean next-token NLL: term i reads the logits row `positions[i]` and
    /// scores `targets[i]`.
    pub fn lm_nll(&mut self, logits: NodeId, targets: &[u32], positions: &[usize]) -> Result<NodeId> {
        let t = self.value(logits);
        if targets.len() != positions.len() || targets.is_empty() {
            return Err(Error::contract(format!(
                "lm_nll needs matching non-empty targets/positions, got {}/{}",
                targets.len(),
                positions.len()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= t.rows()) {
            return Err(Error::contract(format!(
                "lm_nll position {bad} out of range for {} rows",
                t.rows()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&v| v as usize >= t.cols()) {
            return Err(Error::contract(format!(
                "lm_nll target {bad} outside vocabulary of {}",
                t.cols()
            )));
        }
        let mut acc = 0.0f64;
        for (&target, &pos) in targets.iter().zip(positions.iter()) {
            let row = t.row_slice(pos);
            acc += nll_of_row(row, target as usize);
        }
        let value = Tensor::scalar(S::from_f64(acc / targets.len() as f64));
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            value,
            Op::LmNll {
                logits,
                targets: targets.to_vec(),
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// Multiply every entry of x by the 1×1 node s.
    pub fn scale_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).item()?;
        let value = map_tensor(self.value(x), |v| v * sv);
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(value, Op::ScaleByScalar { x, s }, rg))
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dimension(format!(
                "{what}: shapes {}x{} and {}x{} differ",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate into the
    /// store; frozen parameters receive nothing.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<S>) -> Result<()> {
        let lt = self.value(loss);
        if lt.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lt.rows(),
                lt.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_one(idx, &grad, &mut grads, store);
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data().iter()) {
                    *gi = *gi + *di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_one(
        &self,
        idx: usize,
        grad: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        store: &mut ParamStore<S>,
    ) {
        match &self.nodes[idx].op {
            Op::Leaf(pid) => {
                if store.get(*pid).trainable {
                    store.accumulate_grad(*pid, grad);
                }
            }
            Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, grad.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, map_tensor(grad, |g| -g));
            }
            Op::AddScaled(a, b, c) => {
                let cs = S::from_f64(*c);
                self.accumulate(grads, *a, grad.clone());
                self.accumulate(grads, *b, map_tensor(grad, |g| cs * g));
            }
            Op::ScaleConst(a, c) => {
                let cs = S::from_f64(*c);
                self.accumulate(grads, *a, map_tensor(grad, |g| cs * g));
            }
            Op::Mul(a, b) => {
                let da = zip_tensors(grad, self.value(*b), |g, y| g * y);
                let db = zip_tensors(grad, self.value(*a), |g, x| g * x);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Matmul(a, b) => {
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let bt = self.value(*b).transpose();
                let at = self.value(*a).transpose();
                let da = matmul(grad, &bt).expect("shapes fixed at record time");
                let db = matmul(&at, grad).expect("shapes fixed at record time");
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, grad.transpose());
            }
            Op::Softmax { x } => {
                let y = &self.nodes[idx].value;
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let mut dot = S::zero();
                    for c in 0..y.cols() {
                        dot = dot + grad.at(r, c) * y.at(r, c);
                    }
                    for c in 0..y.cols() {
                        dx.set(r, c, y.at(r, c) * (grad.at(r, c) - dot));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gelu(a) => {
                let dx = zip_tensors(grad, self.value(*a), |g, x| g * gelu_grad_scalar(x));
                self.accumulate(grads, *a, dx);
            }
            Op::Silu(a) => {
                let dx = zip_tensors(grad, self.value(*a), |g, x| {
                    let s = sigmoid_scalar(x);
                    g * s * (S::one() + x * (S::one() - s))
                });
                self.accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let dx = zip_tensors(grad, y, |g, s| g * s * (S::one() - s));
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let (dx, dg, db) =
                    layer_norm_backward(self.value(*x), self.value(*gain), grad);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::GatherRows { matrix, ids } => {
                let m = self.value(*matrix);
                let mut dm = Tensor::zeros(m.rows(), m.cols());
                for (r, &src) in ids.iter().enumerate() {
                    for c in 0..m.cols() {
                        let v = dm.at(src, c) + grad.at(r, c);
                        dm.set(src, c, v);
                    }
                }
                self.accumulate(grads, *matrix, dm);
            }
            Op::ReplaceRows {
                base,
                rows,
                positions,
            } => {
                let mut dbase = grad.clone();
                let cols = dbase.cols();
                let mut drows = Tensor::zeros(positions.len(), cols);
                for (i, &p) in positions.iter().enumerate() {
                    for c in 0..cols {
                        drows.set(i, c, grad.at(p, c));
                        dbase.set(p, c, S::zero());
                    }
                }
                self.accumulate(grads, *base, dbase);
                self.accumulate(grads, *rows, drows);
            }
            Op::SliceCols { x, start, len } => {
                let t = self.value(*x);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..*len {
                        dx.set(r, start + c, grad.at(r, c));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = self.value(p);
                    let mut dp = Tensor::zeros(t.rows(), t.cols());
                    for r in 0..t.rows() {
                        for c in 0..t.cols() {
                            dp.set(r, c, grad.at(r, offset + c));
                        }
                    }
                    offset += t.cols();
                    self.accumulate(grads, p, dp);
                }
            }
            Op::MeanRows(x) => {
                let t = self.value(*x);
                let inv = S::from_f64(1.0 / t.rows() as f64);
                let mut dx = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    for c in 0..t.cols() {
                        dx.set(r, c, grad.at(0, c) * inv);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let g = grad.at(0, 0);
                let t = self.value(*x);
                let dx = map_tensor(t, |_| g);
                self.accumulate(grads, *x, dx);
            }
            Op::MseLoss { a, b, divisor } => {
                let g = grad.at(0, 0) * S::from_f64(2.0 / divisor);
                let diff = zip_tensors(self.value(*a), self.value(*b), |x, y| x - y);
                let da = map_tensor(&diff, |d| g * d);
                let db = map_tensor(&diff, |d| -(g * d));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::LmNll {
                logits,
                targets,
                positions,
            } => {
                let t = self.value(*logits);
                let g = grad.at(0, 0).as_f64() / targets.len() as f64;
                let mut dl = Tensor::zeros(t.rows(), t.cols());
                for (&target, &pos) in targets.iter().zip(positions.iter()) {
                    let row = t.row_slice(pos);
                    let probs = softmax_row_f64(row);
                    for (c, p) in probs.iter().enumerate() {
                        let delta = if c == target as usize { p - 1.0 } else { *p };
                        let v = dl.at(pos, c) + S::from_f64(delta * g);
                        dl.set(pos, c, v);
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::ScaleByScalar { x, s } => {
                let sv = self.value(*s).item().expect("recorded scalar");
                let dx = map_tensor(grad, |g| g * sv);
                let mut ds = S::zero();
                for (g, xv) in grad.data().iter().zip(self.value(*x).data().iter()) {
                    ds = ds + *g * *xv;
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
        }
    }
}

fn map_tensor<S: Scalar>(t: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("same shape")
}

fn zip_tensors<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// tanh-form gelu.
fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

fn softmax_forward<S: Scalar>(
    x: &Tensor<S>,
    key_mask: Option<&[bool]>,
    causal_offset: Option<usize>,
) -> Result<Tensor<S>> {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let allowed = |c: usize| -> bool {
            key_mask.map_or(true, |m| m[c])
                && causal_offset.map_or(true, |off| c <= r + off)
        };
        let mut max = None;
        for c in 0..x.cols() {
            if allowed(c) {
                let v = x.at(r, c);
                max = Some(match max {
                    None => v,
                    Some(m) if v > m => v,
                    Some(m) => m,
                });
            }
        }
        let max = max.ok_or_else(|| {
            Error::Mask(format!("softmax row {r} has no attendable positions"))
        })?;
        let mut denom = S::zero();
        for c in 0..x.cols() {
            if allowed(c) {
                let e = (x.at(r, c) - max).exp();
                out.set(r, c, e);
                denom = denom + e;
            }
        }
        for c in 0..x.cols() {
            if allowed(c) {
                out.set(r, c, out.at(r, c) / denom);
            }
        }
    }
    Ok(out)
}

fn layer_norm_forward<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>) -> Tensor<S> {
    let (rows, cols) = x.shape();
    let eps = S::from_f64(LN_EPS);
    let invn = S::from_f64(1.0 / cols as f64);
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let mut mean = S::zero();
        for c in 0..cols {
            mean = mean + x.at(r, c);
        }
        mean = mean * invn;
        let mut var = S::zero();
        for c in 0..cols {
            let d = x.at(r, c) - mean;
            var = var + d * d;
        }
        var = var * invn;
        let inv_std = S::one() / (var + eps).sqrt();
        for c in 0..cols {
            let xhat = (x.at(r, c) - mean) * inv_std;
            out.set(r, c, gain.at(0, c) * xhat + bias.at(0, c));
        }
    }
    out
}

fn layer_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gain: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (rows, cols) = x.shape();
    let eps = S::from_f64(LN_EPS);
    let invn = S::from_f64(1.0 / cols as f64);
    let mut dx = Tensor::zeros(rows, cols);
    let mut dgain = Tensor::zeros(1, cols);
    let mut dbias = Tensor::zeros(1, cols);
    for r in 0..rows {
        let mut mean = S::zero();
        for c in 0..cols {
            mean = mean + x.at(r, c);
        }
        mean = mean * invn;
        let mut var = S::zero();
        for c in 0..cols {
            let d = x.at(r, c) - mean;
            var = var + d * d;
        }
        var = var * invn;
        let inv_std = S::one() / (var + eps).sqrt();

        // dl/dxhat, plus gain/bias grads for this row
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        let mut dxhat = vec![S::zero(); cols];
        for c in 0..cols {
            let xhat = (x.at(r, c) - mean) * inv_std;
            let d = dy.at(r, c) * gain.at(0, c);
            dxhat[c] = d;
            sum_dxhat = sum_dxhat + d;
            sum_dxhat_xhat = sum_dxhat_xhat + d * xhat;
            dgain.set(0, c, dgain.at(0, c) + dy.at(r, c) * xhat);
            dbias.set(0, c, dbias.at(0, c) + dy.at(r, c));
        }
        for c in 0..cols {
            let xhat = (x.at(r, c) - mean) * inv_std;
            let v = (dxhat[c] - invn * sum_dxhat - xhat * invn * sum_dxhat_xhat) * inv_std;
            dx.set(r, c, v);
        }
    }
    (dx, dgain, dbias)
}

fn softmax_row_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

fn nll_of_row<S: Scalar>(row: &[S], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    let lse: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln() + max;
    lse - row[target].as_f64()
}
