use super::kernels::{gemm, View};
use super::{GroupKind, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies the parameter a leaf was bound from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamTag {
    pub group: GroupKind,
    pub index: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogFloor(Var, S),
    Sqrt(Var),
    SumRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
    grad: Option<Vec<S>>,
}

/// Eager reverse-mode tape.
///
/// Leaf gradients accumulate across `backward` calls until
/// [`Tape::zero_grad`]; intermediate gradients are rebuilt every pass.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
    params: Vec<(Var, ParamTag)>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    (numel.checked_div(cols).unwrap_or(0), cols)
}

fn add_into<S: Scalar>(acc: &mut Option<Vec<S>>, g: Vec<S>) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x = *x + y),
        None => *acc = Some(g),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which no leaf requires a gradient. Used for frozen or
    /// evaluation forwards.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].needs_grad)
    }

    // ---- leaves -------------------------------------------------------

    /// Records `tensor` as a leaf; it requires a gradient iff the tensor
    /// does and the tape has gradients enabled.
    pub fn leaf(&mut self, tensor: Tensor<S>) -> Var {
        let rg = tensor.requires_grad() && self.grad_enabled;
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, rg)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor<S>) -> Var {
        let shape = tensor.shape().to_vec();
        self.push(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: S) -> Var {
        self.push(Vec::new(), vec![value], Op::Leaf, false)
    }

    /// Binds a model parameter. Its gradient is retrievable through
    /// [`Tape::param_grads`] after `backward`.
    pub fn param(&mut self, tensor: &Tensor<S>, tag: ParamTag) -> Var {
        let rg = tensor.requires_grad() && self.grad_enabled;
        let v = self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf,
            rg,
        );
        if rg {
            self.params.push((v, tag));
        }
        v
    }

    /// Copy of `v` with no connection to the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    // ---- inspection ---------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> S {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "item() on shape {:?}", n.shape);
        n.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let n = self.node(v);
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad shape is consistent"))
    }

    /// Gradients of every bound parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamTag, &[S])> {
        self.params
            .iter()
            .filter_map(|&(v, tag)| self.nodes[v.0].grad.as_deref().map(|g| (tag, g)))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[m, k], &[k2, n]) = (sa, sb) else {
            return Err(Error::dim("matmul", sa, sb));
        };
        if k != k2 {
            return Err(Error::dim("matmul", sa, sb));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(
            S::one(),
            self.data(a),
            View::dense(m, k),
            self.data(b),
            View::dense(k, n),
            S::zero(),
            &mut out,
            View::dense(m, n),
        );
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[m, n] = self.shape(a) else {
            return Err(Error::dim("transpose", self.shape(a), &[]));
        };
        let src = self.data(a);
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), ng))
    }

    // ---- elementwise --------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        rec: Op<S>,
    ) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rec, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a trailing-axis vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(bias) != [cols] {
            return Err(Error::dim("add_bias", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % cols])
            .collect();
        let ng = self.ng(&[a, bias]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: S) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x.max(floor).ln()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogFloor(a, floor), ng))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x < S::zero()) {
            return Err(Error::Numeric("sqrt of a negative value".into()));
        }
        let out = self.data(a).iter().map(|&x| x.sqrt()).collect();
        let ng = self.ng(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sqrt(a), ng))
    }

    // ---- row-wise -----------------------------------------------------

    fn check_finite(&self, op: &'static str, a: Var) -> Result<()> {
        if self.data(a).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Softmax over the trailing axis, with the row max subtracted first.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let (rows, cols) = rows_cols(self.shape(a));
        let src = self.data(a);
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            softmax_row(
                &src[r * cols..(r + 1) * cols],
                &mut out[r * cols..(r + 1) * cols],
            );
        }
        let ng = self.ng(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), ng))
    }

    /// Softmax of `a / temperature` over the trailing axis.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
    pub fn softmax(&mut self, a: Var, temperature: S) -> Result<Var> {
        if !(temperature > S::zero()) {
            return Err(Error::Contract(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let scaled = if temperature == S::one() {
            a
        } else {
            self.scale(a, S::one() / temperature)?
        };
        self.softmax_rows(scaled)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let (rows, cols) = rows_cols(self.shape(a));
        let src = self.data(a);
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let ng = self.ng(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LogSoftmax(a), ng))
    }

    /// Sums the trailing axis away.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let (rows, cols) = rows_cols(shape);
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let src = self.data(a);
        let out = (0..rows)
            .map(|r| src[r * cols..(r + 1) * cols].iter().copied().sum())
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(out_shape, out, Op::SumRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        let ng = self.ng(&[a]);
        Ok(self.push(Vec::new(), vec![s], Op::SumAll(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Weighted sum `sum_i w_i a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[S]) -> Result<Var> {
        if weights.len() != self.data(a).len() {
            return Err(Error::dim("weighted_sum", self.shape(a), &[weights.len()]));
        }
        let w = Tensor::new(self.shape(a).to_vec(), weights.to_vec())?;
        let w = self.constant(w);
        let prod = self.mul(a, w)?;
        self.sum(prod)
    }

    // ---- indexing -----------------------------------------------------

    /// Stacks matrices with equal trailing size along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, cols) = rows_cols(self.shape(first));
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows `[start, start + len)` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if start + len > rows {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.data(a)[start * cols..(start + len) * cols].to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![len, cols], out, Op::SliceRows(a, start), ng))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", self.shape(table), &[bad]));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather(table, ids.to_vec()),
            ng,
        ))
    }

    /// One element per row: `out[i] = a[i, index[i]]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(a));
        if index.len() != rows {
            return Err(Error::dim("pick", self.shape(a), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= cols) {
            return Err(Error::dim("pick", self.shape(a), &[bad]));
        }
        let src = self.data(a);
        let out = index
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * cols + j])
            .collect();
        let ng = self.ng(&[a]);
        Ok(self.push(vec![rows], out, Op::Pick(a, index.to_vec()), ng))
    }

    // ---- fused blocks -------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = S::lit(eps);
        let n = S::lit(cols as f64);
        let (src, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let mut out = vec![S::zero(); src.len()];
        let mut xhat = vec![S::zero(); src.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..cols {
                let h = (row[j] - mean) * rs;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, ng))
    }

    /// Multi-head scaled dot-product attention over `batch` stacked
    /// sequences of length `seq`. `q`, `k`, `v` are `[batch*seq, d]`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        let &[rows, d] = shape.as_slice() else {
            return Err(Error::dim("attention", &shape, &[batch, seq]));
        };
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", &shape, &[batch, seq, heads]));
        }
        let dh = d / heads;
        let scale = S::one() / S::lit(dh as f64).sqrt();
        let ng = self.ng(&[q, k, v]);
        let mut out = vec![S::zero(); rows * d];
        let mut probs = if ng {
            vec![S::zero(); batch * heads * seq * seq]
        } else {
            Vec::new()
        };
        let mut scores = vec![S::zero(); seq * seq];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for b in 0..batch {
            for h in 0..heads {
                let blk = View::block(b * seq, seq, h * dh, dh, d);
                gemm(
                    scale,
                    qd,
                    blk,
                    kd,
                    blk.t(),
                    S::zero(),
                    &mut scores,
                    View::dense(seq, seq),
                );
                for i in 0..seq {
                    let row = &mut scores[i * seq..(i + 1) * seq];
                    let live = if causal { i + 1 } else { seq };
                    let max = row[..live].iter().copied().fold(S::neg_infinity(), S::max);
                    let mut sum = S::zero();
                    for x in &mut row[..live] {
                        *x = (*x - max).exp();
                        sum = sum + *x;
                    }
                    for x in &mut row[..live] {
                        *x = *x / sum;
                    }
                    for x in &mut row[live..] {
                        *x = S::zero();
                    }
                }
                gemm(
                    S::one(),
                    &scores,
                    View::dense(seq, seq),
                    vd,
                    blk,
                    S::zero(),
                    &mut out,
                    blk,
                );
                if ng {
                    let off = (b * heads + h) * seq * seq;
                    probs[off..off + seq * seq].copy_from_slice(&scores);
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            probs,
        };
        Ok(self.push(shape, out, op, ng))
    }

    // ---- backward -----------------------------------------------------

    /// Populates gradients of every recorded value that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.node(loss).needs_grad {
            return Ok(());
        }
        let seed = if matches!(self.node(loss).op, Op::Leaf) {
            let mut g = self.nodes[loss.0]
                .grad
                .take()
                .unwrap_or_else(|| vec![S::zero()]);
            g[0] = g[0] + S::one();
            g
        } else {
            vec![S::one()]
        };
        self.nodes[loss.0].grad = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.pullback(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, dg) in contributions {
                if self.nodes[v.0].needs_grad {
                    add_into(&mut self.nodes[v.0].grad, dg);
                }
            }
        }
        Ok(())
    }

    fn pullback(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let want = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if want(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(
                        S::one(),
                        g,
                        View::dense(m, n),
                        val(*b),
                        View::dense(k, n).t(),
                        S::zero(),
                        &mut da,
                        View::dense(m, k),
                    );
                    out.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(
                        S::one(),
                        val(*a),
                        View::dense(m, k).t(),
                        g,
                        View::dense(m, n),
                        S::zero(),
                        &mut db,
                        View::dense(k, n),
                    );
                    out.push((*b, db));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let mut da = vec![S::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[c * m + r];
                    }
                }
                out.push((*a, da));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect()));
                }
                if want(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if want(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&x, &y)| x / y).collect()));
                }
                if want(*b) {
                    let db = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(&x, (&p, &q))| -x * p / (q * q))
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::AddBias(a, bias) => {
                out.push((*a, g.to_vec()));
                if want(*bias) {
                    let cols = self.nodes[bias.0].value.len();
                    let mut db = vec![S::zero(); cols];
                    for (j, &x) in g.iter().enumerate() {
                        db[j % cols] = db[j % cols] + x;
                    }
                    out.push((*bias, db));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&x| x * *c).collect())),
            Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&x, &z)| x * gelu_grad(z))
                    .collect();
                out.push((*a, da));
            }
            Op::Softmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut da = vec![S::zero(); y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let dot: S = g[s.clone()]
                        .iter()
                        .zip(&y[s.clone()])
                        .map(|(&a, &b)| a * b)
                        .sum();
                    for j in s {
                        da[j] = y[j] * (g[j] - dot);
                    }
                }
                out.push((*a, da));
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                let y = &node.value;
                let mut da = vec![S::zero(); y.len()];
                for r in 0..rows {
                    let s = r * cols..(r + 1) * cols;
                    let total: S = g[s.clone()].iter().copied().sum();
                    for j in s {
                        da[j] = g[j] - y[j].exp() * total;
                    }
                }
                out.push((*a, da));
            }
            Op::LogFloor(a, floor) => {
                let da = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&x, &z)| if z > *floor { x / z } else { S::zero() })
                    .collect();
                out.push((*a, da));
            }
            Op::Sqrt(a) => {
                let da = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&x, &y)| x / (S::lit(2.0) * y))
                    .collect();
                out.push((*a, da));
            }
            Op::SumRows(a) => {
                let (rows, cols) = rows_cols(&self.nodes[a.0].shape);
                let mut da = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    da[r * cols..(r + 1) * cols].fill(g[r]);
                }
                out.push((*a, da));
            }
            Op::SumAll(a) => out.push((*a, vec![g[0]; self.nodes[a.0].value.len()])),
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    if want(*p) {
                        out.push((*p, g[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let (_, cols) = rows_cols(&node.shape);
                let mut da = vec![S::zero(); self.nodes[a.0].value.len()];
                da[start * cols..start * cols + g.len()].copy_from_slice(g);
                out.push((*a, da));
            }
            Op::Gather(table, ids) => {
                let (_, cols) = rows_cols(&node.shape);
                let mut dt = vec![S::zero(); self.nodes[table.0].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dt[id * cols + j] = dt[id * cols + j] + g[r * cols + j];
                    }
                }
                out.push((*table, dt));
            }
            Op::Pick(a, index) => {
                let (_, cols) = rows_cols(&self.nodes[a.0].shape);
                let mut da = vec![S::zero(); self.nodes[a.0].value.len()];
                for (r, &j) in index.iter().enumerate() {
                    da[r * cols + j] = g[r];
                }
                out.push((*a, da));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gv = val(*gain);
                let n = S::lit(cols as f64);
                if want(*x) {
                    let mut dx = vec![S::zero(); rows * cols];
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let s = r * cols;
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for j in 0..cols {
                            let dh = g[s + j] * gv[j];
                            mean_d = mean_d + dh;
                            mean_dh = mean_dh + dh * xhat[s + j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for j in 0..cols {
                            let dh = g[s + j] * gv[j];
                            dx[s + j] = rs * (dh - mean_d - xhat[s + j] * mean_dh);
                        }
                    }
                    out.push((*x, dx));
                }
                if want(*gain) {
                    let mut dg = vec![S::zero(); cols];
                    for (idx, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[idx % cols] = dg[idx % cols] + gi * h;
                    }
                    out.push((*gain, dg));
                }
                if want(*bias) {
                    let mut db = vec![S::zero(); cols];
                    for (idx, &gi) in g.iter().enumerate() {
                        db[idx % cols] = db[idx % cols] + gi;
                    }
                    out.push((*bias, db));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = node.shape[1];
                let dh = d / heads;
                let scale = S::one() / S::lit(dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let mut dq = vec![S::zero(); qd.len()];
                let mut dk = vec![S::zero(); kd.len()];
                let mut dv = vec![S::zero(); vd.len()];
                let mut dp = vec![S::zero(); seq * seq];
                let sq = View::dense(seq, seq);
                for b in 0..batch {
                    for h in 0..heads {
                        let blk = View::block(b * seq, seq, h * dh, dh, d);
                        let off = (b * heads + h) * seq * seq;
                        let p = &probs[off..off + seq * seq];
                        gemm(S::one(), g, blk, vd, blk.t(), S::zero(), &mut dp, sq);
                        gemm(S::one(), p, sq.t(), g, blk, S::zero(), &mut dv, blk);
                        for i in 0..seq {
                            let row = i * seq..(i + 1) * seq;
                            let dot: S = dp[row.clone()]
                                .iter()
                                .zip(&p[row.clone()])
                                .map(|(&x, &y)| x * y)
                                .sum();
                            for j in row {
                                dp[j] = p[j] * (dp[j] - dot);
                            }
                        }
                        gemm(scale, &dp, sq, kd, blk, S::zero(), &mut dq, blk);
                        gemm(scale, &dp, sq.t(), qd, blk, S::zero(), &mut dk, blk);
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
        }
        out
    }
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    x * S::lit(0.5) * (S::one() + (x / S::lit(SQRT_2)).erf())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let cdf = S::lit(0.5) * (S::one() + (x / S::lit(SQRT_2)).erf());
    let pdf = S::lit(INV_SQRT_2PI) * (-(x * x) * S::lit(0.5)).exp();
    cdf + x * pdf
}

pub(crate) fn softmax_row<S: Scalar>(src: &[S], dst: &mut [S]) {
    let max = src.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in dst.iter_mut() {
        *o = *o / sum;
    }
}
