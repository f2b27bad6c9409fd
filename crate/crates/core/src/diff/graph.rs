use std::sync::Arc;

use super::tensor::{gemm_acc, Tensor};
use super::DiffError;

/// Additive mask value standing in for negative infinity.
pub const MASK_NEG: f64 = -1e30;
const MASK_CUTOFF: f64 = -1e29;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Allowed key positions for every query position of an attention pattern.
pub type AllowedKeys = Arc<Vec<Vec<usize>>>;

#[derive(Clone, Debug)]
struct AttentionShape {
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    d: usize,
    /// `None` means every key is visible.
    allowed: Option<AllowedKeys>,
    /// Start of each query's probability run inside one `(batch, head)` block.
    offsets: Vec<usize>,
    block: usize,
}

impl AttentionShape {
    fn keys(&self, i: usize) -> KeyIter<'_> {
        match &self.allowed {
            Some(a) => KeyIter::List(a[i].iter()),
            None => KeyIter::Range(0..self.tk),
        }
    }
}

enum KeyIter<'a> {
    List(std::slice::Iter<'a, usize>),
    Range(std::ops::Range<usize>),
}

impl Iterator for KeyIter<'_> {
    type Item = usize;
    fn next(&mut self) -> Option<usize> {
        match self {
            KeyIter::List(it) => it.next().copied(),
            KeyIter::Range(r) => r.next(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Log { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Reshape { a: Var },
    MaskedSoftmax { a: Var },
    Attention { q: Var, k: Var, v: Var, shape: Box<AttentionShape>, probs: Vec<f64> },
    StreamEmbed { table: Var, coeff: Var, prefix: Option<Var> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    ParityEntropy { logits: Var, signs: Vec<f64>, supports: Arc<Vec<Vec<usize>>>, clamp: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations supporting one reverse sweep.
///
/// Nodes are appended in evaluation order, so the node index order is a
/// valid topological order for the backward pass.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    flops: u64,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> DiffError {
    DiffError::ShapeMismatch { op, left, right }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward floating-point operations recorded so far (multiply-adds
    /// count as two).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: "input" });
        }
        Ok(self.push(value, Op::Leaf, needs_grad))
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.leaf(value, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul", (m, k), (k2, n)));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), false, out.data_mut());
        self.flops += 2 * (m * k * n) as u64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", (m, k), (n, k2)));
        }
        let mut out = Tensor::zeros(m, n);
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), true, out.data_mut());
        self.flops += 2 * (m * k * n) as u64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b).data());
        self.flops += out.len() as u64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, ng))
    }

    /// Adds the `1 x c` tensor `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(shape_err("add_row", (r, c), self.shape(row)));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (x, b) in out.row_mut(i).iter_mut().zip(&bias) {
                *x += b;
            }
        }
        self.flops += (r * c) as u64;
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow { a, row }, ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        for (x, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        self.flops += out.len() as u64;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, ng))
    }

    /// `scale · a + offset`.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Result<Var, DiffError> {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = scale * *x + offset;
        }
        self.flops += 2 * out.len() as u64;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Affine { a, scale }, ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.affine(a, k, 0.0)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, DiffError> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(shape_err("layer_norm", (r, c), self.shape(gamma)));
        }
        let xs = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = Tensor::zeros(r, c);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = xs.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            let o = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                o[j] = h * g[j] + b[j];
            }
        }
        self.flops += 8 * (r * c) as u64;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, cost: u64) -> Var {
        let mut out = self.value(a).clone();
        for x in out.data_mut() {
            *x = f(*x);
        }
        self.flops += cost * out.len() as u64;
        let ng = self.ng(&[a]);
        self.push(out, op, ng)
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var, DiffError> {
        Ok(self.unary(a, |x| 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)), Op::Gelu { a }, 8))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        Ok(self.unary(a, sigmoid, Op::Sigmoid { a }, 4))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        Ok(self.unary(a, f64::tanh, Op::Tanh { a }, 4))
    }

    /// Natural logarithm; non-positive inputs are an error.
    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).data().iter().any(|&x| x.is_nan() || x <= 0.0) {
            return Err(DiffError::NonFinite { op: "log" });
        }
        Ok(self.unary(a, f64::ln, Op::Log { a }, 4))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.flops += self.value(a).len() as u64;
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }, ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", (0, 0), (0, 0)));
        }
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        self.flops += n as u64;
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let c = parts.first().map(|&p| self.shape(p).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(shape_err("concat_rows", (rows, c), (r, pc)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::from_vec(rows, c, data)?, Op::ConcatRows { parts: parts.to_vec() }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if start > end || end > r {
            return Err(shape_err("slice_rows", (r, c), (start, end)));
        }
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_vec(end - start, c, data)?, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if start > end || end > c {
            return Err(shape_err("slice_cols", (r, c), (start, end)));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..end]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_vec(r, end - start, data)?, Op::SliceCols { a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(shape_err("reshape", (r, c), (rows, cols)));
        }
        let data = self.value(a).data().to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::from_vec(rows, cols, data)?, Op::Reshape { a }, ng))
    }

    /// Row softmax of `a + mask`. Entries whose mask is at or below the
    /// negative-infinity stand-in get weight exactly zero and no gradient.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&Tensor>) -> Result<Var, DiffError> {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            if m.shape() != (r, c) {
                return Err(shape_err("masked_softmax", (r, c), m.shape()));
            }
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            let row = out.row_mut(i);
            if let Some(m) = mask {
                for (x, mv) in row.iter_mut().zip(m.row(i)) {
                    *x += mv;
                }
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
            if let Some(m) = mask {
                for (x, mv) in row.iter_mut().zip(m.row(i)) {
                    if *mv <= MASK_CUTOFF {
                        *x = 0.0;
                    }
                }
            }
        }
        self.flops += 5 * (r * c) as u64;
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::MaskedSoftmax { a }, ng))
    }

    /// Multi-head scaled dot-product attention over a batch.
    ///
    /// `q` is `(batch·tq) x d`, `k` and `v` are `(batch·tk) x d`. Heads split
    /// the feature axis into `heads` contiguous slices. Scores are scaled by
    /// `(d/heads)^-1/2`. When `allowed` is given, query `i` only sees the
    /// listed keys (other keys get weight exactly zero); the same pattern is
    /// used for every batch element and head.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        allowed: Option<AllowedKeys>,
    ) -> Result<Var, DiffError> {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        if self.shape(v) != (kr, kd) || kd != d {
            return Err(shape_err("attention", self.shape(k), self.shape(v)));
        }
        if batch == 0 || qr % batch != 0 || kr % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", (qr, d), (batch, heads)));
        }
        let tq = qr / batch;
        let tk = kr / batch;
        if let Some(a) = &allowed {
            if a.len() != tq || a.iter().flatten().any(|&j| j >= tk) {
                return Err(DiffError::MaskSize { expected: tq, got: a.len() });
            }
        }
        let mut offsets = Vec::with_capacity(tq + 1);
        let mut acc = 0;
        for i in 0..tq {
            offsets.push(acc);
            acc += allowed.as_ref().map_or(tk, |a| a[i].len());
        }
        offsets.push(acc);
        let shape = AttentionShape {
            batch,
            heads,
            tq,
            tk,
            d,
            allowed,
            offsets,
            block: acc,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let vv = self.value(v).data();
        let mut out = Tensor::zeros(qr, d);
        let mut probs = vec![0.0; batch * heads * shape.block];
        let mut scores: Vec<f64> = Vec::with_capacity(tk);
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * shape.block;
                for i in 0..tq {
                    let qi = &qv[(b * tq + i) * d + h * dh..(b * tq + i) * d + (h + 1) * dh];
                    scores.clear();
                    for j in shape.keys(i) {
                        let kj = &kv[(b * tk + j) * d + h * dh..(b * tk + j) * d + (h + 1) * dh];
                        scores.push(scale * qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>());
                    }
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p = &mut probs[base + shape.offsets[i]..base + shape.offsets[i + 1]];
                    let orow = &mut out.data_mut()[(b * tq + i) * d + h * dh..(b * tq + i) * d + (h + 1) * dh];
                    for ((pj, s), j) in p.iter_mut().zip(&scores).zip(shape.keys(i)) {
                        *pj = s / z;
                        let vj = &vv[(b * tk + j) * d + h * dh..(b * tk + j) * d + (h + 1) * dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += *pj * x;
                        }
                    }
                }
            }
        }
        self.flops += (batch * heads * shape.block * (4 * dh + 5)) as u64;
        let ng = self.ng(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, shape: Box::new(shape), probs }, ng))
    }

    /// Post-softmax attention weights of the most recent evaluation of an
    /// attention node, as a dense `tq x tk` matrix for one `(batch, head)`.
    pub fn attention_weights(&self, node: Var, batch_index: usize, head: usize) -> Option<Tensor> {
        let Op::Attention { shape, probs, .. } = &self.nodes[node.0].op else {
            return None;
        };
        let mut w = Tensor::zeros(shape.tq, shape.tk);
        let base = (batch_index * shape.heads + head) * shape.block;
        for i in 0..shape.tq {
            for (t, j) in shape.keys(i).enumerate() {
                w.set(i, j, probs[base + shape.offsets[i] + t]);
            }
        }
        Some(w)
    }

    /// Token stream from per-position embedding rows scaled by per-sample
    /// coefficients, with an optional shared prefix token.
    ///
    /// `table` is `R x d`, `coeff` is `B x R`, `prefix` is `1 x d`. Output is
    /// `(B·(R + p)) x d` where sample `b` occupies rows `b·(R+p) ..`, the
    /// prefix first, then `coeff[b, i] · table[i]`.
    pub fn stream_embed(&mut self, table: Var, coeff: Var, prefix: Option<Var>) -> Result<Var, DiffError> {
        let (r, d) = self.shape(table);
        let (bsz, rc) = self.shape(coeff);
        if rc != r {
            return Err(shape_err("stream_embed", (r, d), (bsz, rc)));
        }
        if let Some(p) = prefix {
            if self.shape(p) != (1, d) {
                return Err(shape_err("stream_embed prefix", (1, d), self.shape(p)));
            }
        }
        let p = usize::from(prefix.is_some());
        let tokens = r + p;
        let mut out = Tensor::zeros(bsz * tokens, d);
        let t = self.value(table);
        let c = self.value(coeff);
        for b in 0..bsz {
            if let Some(pv) = prefix {
                out.row_mut(b * tokens).copy_from_slice(self.value(pv).data());
            }
            for i in 0..r {
                let s = c.get(b, i);
                let row = out.row_mut(b * tokens + p + i);
                for (o, w) in row.iter_mut().zip(t.row(i)) {
                    *o = s * w;
                }
            }
        }
        self.flops += (bsz * r * d) as u64;
        let mut deps = vec![table, coeff];
        deps.extend(prefix);
        let ng = self.ng(&deps);
        Ok(self.push(out, Op::StreamEmbed { table, coeff, prefix }, ng))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let (bsz, c) = self.shape(logits);
        if targets.len() != bsz {
            return Err(shape_err("cross_entropy", (bsz, c), (targets.len(), 1)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(DiffError::InvalidTarget { target: bad, classes: c });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; bsz * c];
        let mut loss = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = lv.row(b);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[t];
            for j in 0..c {
                probs[b * c + j] = (row[j] - lse).exp();
            }
        }
        self.flops += 5 * (bsz * c) as u64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / bsz as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Mean over samples and supports of `-log(max(½(1 + Π_j (1 - 2 q_j)), clamp))`
    /// with `q_j = σ(signs_j · logits_j)`, the product running over each
    /// support. `signs` has the shape of `logits`.
    pub fn parity_entropy(
        &mut self,
        logits: Var,
        signs: &[f64],
        supports: Arc<Vec<Vec<usize>>>,
        clamp: f64,
    ) -> Result<Var, DiffError> {
        let (bsz, n) = self.shape(logits);
        if signs.len() != bsz * n {
            return Err(shape_err("parity_entropy", (bsz, n), (signs.len(), 1)));
        }
        if supports.is_empty() || supports.iter().flatten().any(|&j| j >= n) {
            return Err(shape_err("parity_entropy supports", (bsz, n), (supports.len(), 0)));
        }
        let lv = self.value(logits).data();
        let mut loss = 0.0;
        for b in 0..bsz {
            for sup in supports.iter() {
                let prod: f64 = sup
                    .iter()
                    .map(|&j| 1.0 - 2.0 * sigmoid(signs[b * n + j] * lv[b * n + j]))
                    .product();
                loss -= (0.5 * (1.0 + prod)).max(clamp).ln();
            }
        }
        self.flops += (bsz * supports.iter().map(Vec::len).sum::<usize>() * 6) as u64;
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / (bsz * supports.len()) as f64),
            Op::ParityEntropy { logits, signs: signs.to_vec(), supports, clamp },
            ng,
        ))
    }

    /// Reverse sweep from the scalar `root`. Gradients of earlier sweeps are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<(), DiffError> {
        if self.shape(root) != (1, 1) {
            return Err(DiffError::NotScalar(self.shape(root)));
        }
        if !self.value(root).is_finite() {
            return Err(DiffError::NonFinite { op: "backward root" });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(go) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &go, &mut grads);
            grads[idx] = Some(go);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, go: &Tensor, grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let (r, c) = nodes[v.0].value.shape();
            let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c));
            f(g.data_mut());
        };
        let out = &nodes[idx].value;
        let god = go.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let (m, k) = nodes[a.0].value.shape();
                let n = out.cols();
                if *trans_b {
                    // C = A Bᵀ, B is n x k.
                    acc(*a, &mut |g| gemm_acc(m, n, k, god, false, bv, false, g));
                    acc(*b, &mut |g| gemm_acc(n, m, k, god, true, av, false, g));
                } else {
                    acc(*a, &mut |g| gemm_acc(m, n, k, god, false, bv, true, g));
                    acc(*b, &mut |g| gemm_acc(k, m, n, av, true, god, false, g));
                }
            }
            Op::Add { a, b } => {
                acc(*a, &mut |g| add_into(g, god));
                acc(*b, &mut |g| add_into(g, god));
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |g| add_into(g, god));
                let c = out.cols();
                acc(*row, &mut |g| {
                    for chunk in god.chunks(c) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |g| {
                    for ((x, go), y) in g.iter_mut().zip(god).zip(bv) {
                        *x += go * y;
                    }
                });
                acc(*b, &mut |g| {
                    for ((x, go), y) in g.iter_mut().zip(god).zip(av) {
                        *x += go * y;
                    }
                });
            }
            Op::Affine { a, scale } => {
                acc(*a, &mut |g| {
                    for (x, go) in g.iter_mut().zip(god) {
                        *x += scale * go;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = out.shape();
                let gv = nodes[gamma.0].value.data();
                acc(*gamma, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[j] += god[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for chunk in god.chunks(c) {
                        add_into(g, chunk);
                    }
                });
                acc(*x, &mut |g| {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = god[i * c + j] * gv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[i * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            g[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    for ((x, go), &z) in g.iter_mut().zip(god).zip(av) {
                        let cdf = 0.5 * (1.0 + libm::erf(z * std::f64::consts::FRAC_1_SQRT_2));
                        let pdf = FRAC_1_SQRT_2PI * (-0.5 * z * z).exp();
                        *x += go * (cdf + z * pdf);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let yv = out.data();
                acc(*a, &mut |g| {
                    for ((x, go), y) in g.iter_mut().zip(god).zip(yv) {
                        *x += go * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh { a } => {
                let yv = out.data();
                acc(*a, &mut |g| {
                    for ((x, go), y) in g.iter_mut().zip(god).zip(yv) {
                        *x += go * (1.0 - y * y);
                    }
                });
            }
            Op::Log { a } => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |g| {
                    for ((x, go), z) in g.iter_mut().zip(god).zip(av) {
                        *x += go / z;
                    }
                });
            }
            Op::Sum { a } => {
                let s = god[0];
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += s));
            }
            Op::Mean { a } => {
                let s = god[0] / nodes[a.0].value.len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += s));
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    let slice = &god[start..start + len];
                    acc(*p, &mut |g| add_into(g, slice));
                    start += len;
                }
            }
            Op::SliceRows { a, start } => {
                let c = out.cols();
                acc(*a, &mut |g| add_into(&mut g[start * c..start * c + god.len()], god));
            }
            Op::SliceCols { a, start } => {
                let (r, w) = out.shape();
                let c = nodes[a.0].value.cols();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        add_into(&mut g[i * c + start..i * c + start + w], &god[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Reshape { a } => acc(*a, &mut |g| add_into(g, god)),
            Op::MaskedSoftmax { a } => {
                let (r, c) = out.shape();
                let yv = out.data();
                acc(*a, &mut |g| {
                    for i in 0..r {
                        let y = &yv[i * c..(i + 1) * c];
                        let gr = &god[i * c..(i + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            g[i * c + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, shape, probs } => {
                self.attention_backward(god, *q, *k, *v, shape, probs, grads);
            }
            Op::StreamEmbed { table, coeff, prefix } => {
                let t = &nodes[table.0].value;
                let cf = &nodes[coeff.0].value;
                let (r, d) = t.shape();
                let bsz = cf.rows();
                let p = usize::from(prefix.is_some());
                let tokens = r + p;
                acc(*table, &mut |g| {
                    for b in 0..bsz {
                        for i in 0..r {
                            let s = cf.get(b, i);
                            let gr = &god[(b * tokens + p + i) * d..(b * tokens + p + i + 1) * d];
                            for (x, y) in g[i * d..(i + 1) * d].iter_mut().zip(gr) {
                                *x += s * y;
                            }
                        }
                    }
                });
                acc(*coeff, &mut |g| {
                    for b in 0..bsz {
                        for i in 0..r {
                            let gr = &god[(b * tokens + p + i) * d..(b * tokens + p + i + 1) * d];
                            g[b * r + i] += gr.iter().zip(t.row(i)).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                if let Some(pv) = prefix {
                    acc(*pv, &mut |g| {
                        for b in 0..bsz {
                            add_into(g, &god[b * tokens * d..(b * tokens + 1) * d]);
                        }
                    });
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = out.cols();
                let c = nodes[logits.0].value.cols().max(c);
                let bsz = targets.len() as f64;
                let s = god[0] / bsz;
                acc(*logits, &mut |g| {
                    for (b, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let ind = if j == t { 1.0 } else { 0.0 };
                            g[b * c + j] += s * (probs[b * c + j] - ind);
                        }
                    }
                });
            }
            Op::ParityEntropy { logits, signs, supports, clamp } => {
                let (bsz, n) = nodes[logits.0].value.shape();
                let lv = nodes[logits.0].value.data();
                let s = god[0] / (bsz * supports.len()) as f64;
                acc(*logits, &mut |g| {
                    let mut factors = Vec::new();
                    let mut derivs = Vec::new();
                    let mut suffix = Vec::new();
                    for b in 0..bsz {
                        for sup in supports.iter() {
                            factors.clear();
                            derivs.clear();
                            for &j in sup {
                                let a = signs[b * n + j];
                                let q = sigmoid(a * lv[b * n + j]);
                                factors.push(1.0 - 2.0 * q);
                                derivs.push(-2.0 * a * q * (1.0 - q));
                            }
                            let prod: f64 = factors.iter().product();
                            let arg = 0.5 * (1.0 + prod);
                            if arg < *clamp {
                                continue;
                            }
                            // d/dx_j of -ln(½(1 + Π)) = -(½ Π_{others} f'_j) / arg
                            suffix.clear();
                            suffix.resize(factors.len() + 1, 1.0);
                            for t in (0..factors.len()).rev() {
                                suffix[t] = suffix[t + 1] * factors[t];
                            }
                            let mut prefix = 1.0;
                            for (t, &j) in sup.iter().enumerate() {
                                let others = prefix * suffix[t + 1];
                                g[b * n + j] += s * (-0.5 * others * derivs[t] / arg);
                                prefix *= factors[t];
                            }
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        god: &[f64],
        q: Var,
        k: Var,
        v: Var,
        shape: &AttentionShape,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let d = shape.d;
        let dh = d / shape.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qv = self.nodes[q.0].value.data();
        let kv = self.nodes[k.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let (tq, tk) = (shape.tq, shape.tk);
        let mut dp: Vec<f64> = Vec::with_capacity(tk);
        for b in 0..shape.batch {
            for h in 0..shape.heads {
                let base = (b * shape.heads + h) * shape.block;
                for i in 0..tq {
                    let p = &probs[base + shape.offsets[i]..base + shape.offsets[i + 1]];
                    let go = &god[(b * tq + i) * d + h * dh..(b * tq + i) * d + (h + 1) * dh];
                    dp.clear();
                    for (t, j) in shape.keys(i).enumerate() {
                        let row = (b * tk + j) * d + h * dh;
                        dp.push(go.iter().zip(&vv[row..row + dh]).map(|(x, y)| x * y).sum());
                        for (x, g) in dv[row..row + dh].iter_mut().zip(go) {
                            *x += p[t] * g;
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qrow = (b * tq + i) * d + h * dh;
                    for (t, j) in shape.keys(i).enumerate() {
                        let ds = p[t] * (dp[t] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = (b * tk + j) * d + h * dh;
                        for c in 0..dh {
                            dq[qrow + c] += ds * kv[krow + c];
                            dk[krow + c] += ds * qv[qrow + c];
                        }
                    }
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            let (r, c) = self.nodes[var.0].value.shape();
            grads[var.0].get_or_insert_with(|| Tensor::zeros(r, c)).add_assign(&g);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
