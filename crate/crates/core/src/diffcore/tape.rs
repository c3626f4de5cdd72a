//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! Every op appends a node holding its forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products into
//! per-node gradient buffers. Nodes that do not depend on a leaf created with
//! [`Tape::leaf`]`(.., true)` are skipped during the reverse sweep.

use super::tensor::{log_sum_exp, matmul_nt_raw, matmul_raw, matmul_tn_raw, sigmoid, softplus, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    LinComb(Vec<(Var, T)>),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    ConcatCols(Vec<Var>),
    RepeatRows(Var),
    SliceCols(Var, usize),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    SqNorm(Var),
    LogSoftmax(Var),
    Softmax(Var),
    PairwiseDiff(Var),
    RowNorm(Var, T),
    RowNormalize(Var, T),
    ColNormalize(Var, T),
    EdgeAggregate(Var, Var, Var),
    GmmLogDensity { logits: Var, mean: Var, log_var: Var, point: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::LinComb(..) => "lincomb",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::ConcatCols(..) => "concat_cols",
            Op::RepeatRows(..) => "repeat_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Silu(..) => "silu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SqNorm(..) => "sq_norm",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::PairwiseDiff(..) => "pairwise_diff",
            Op::RowNorm(..) => "row_norm",
            Op::RowNormalize(..) => "row_normalize",
            Op::ColNormalize(..) => "col_normalize",
            Op::EdgeAggregate(..) => "edge_aggregate",
            Op::GmmLogDensity { .. } => "gmm_log_density",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// First node whose forward value contains NaN or ±Inf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NonFinite {
    pub node: usize,
    pub op: &'static str,
}

impl std::fmt::Display for NonFinite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "node #{} ({}) produced a non-finite value", self.node, self.op)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every node on the tape.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after `mark`; handles past it become invalid.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn first_non_finite(&self) -> Option<NonFinite> {
        self.nodes
            .iter()
            .position(|n| !n.value.all_finite())
            .map(|i| NonFinite { node: i, op: self.nodes[i].op.name() })
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let value = self.nodes[x.0].value.map(f);
        self.push(value, op, &[x])
    }

    fn same_shape(&self, a: Var, b: Var) {
        assert_eq!(
            self.nodes[a.0].value.data.len(),
            self.nodes[b.0].value.data.len(),
            "shape mismatch {:?} vs {:?}",
            self.nodes[a.0].value.shape,
            self.nodes[b.0].value.shape
        );
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        self.same_shape(a, b);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: av.shape.clone(), data };
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x (n×m) + r (1×m)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let rv = &self.nodes[r.0].value;
        let m = xv.cols();
        assert_eq!(rv.len(), m, "add_row: bias width mismatch");
        let data = xv.data.iter().enumerate().map(|(i, &v)| v + rv.data[i % m]).collect();
        let value = Tensor { shape: xv.shape.clone(), data };
        self.push(value, Op::AddRow(x, r), &[x, r])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Multiplies every entry of `x` by the 1×1 node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        let value = self.nodes[x.0].value.map(|v| v * sv);
        self.push(value, Op::ScaleBy(x, s), &[x, s])
    }

    /// `Σ c_k · x_k` over same-shaped terms.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty());
        let first = &self.nodes[terms[0].0 .0].value;
        let mut data = vec![T::zero(); first.len()];
        let shape = first.shape.clone();
        for &(v, c) in terms {
            let vv = &self.nodes[v.0].value;
            assert_eq!(vv.len(), data.len(), "lincomb shape mismatch");
            for (d, &x) in data.iter_mut().zip(&vv.data) {
                *d = *d + c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor { shape, data }, Op::LinComb(terms.to_vec()), &inputs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul inner dims {:?} x {:?}", av.shape, bv.shape);
        let data = matmul_raw(&av.data, &bv.data, n, k, m);
        self.push(Tensor::matrix(n, m, data), Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (n, k, m) = (av.rows(), av.cols(), bv.rows());
        assert_eq!(bv.cols(), k, "matmul_nt inner dims");
        let data = matmul_nt_raw(&av.data, &bv.data, n, k, m);
        self.push(Tensor::matrix(n, m, data), Op::MatMulNT(a, b), &[a, b])
    }

    /// Affine map `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let pv = &self.nodes[p.0].value;
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                data.extend_from_slice(pv.row_slice(r));
            }
        }
        self.push(Tensor::matrix(rows, total, data), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Tiles a 1×m row into n rows.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.rows(), 1, "repeat_rows expects a single row");
        let m = xv.cols();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(&xv.data);
        }
        self.push(Tensor::matrix(n, m, data), Op::RepeatRows(x), &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::matrix(rows, len, data), Op::SliceCols(x, start), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(shape.iter().product::<usize>(), xv.len(), "reshape size mismatch");
        let value = Tensor { shape: shape.to_vec(), data: xv.data.clone() };
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let s = xv.data.iter().fold(T::zero(), |a, &b| a + b) / T::of(xv.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn sq_norm(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sq_norm();
        self.push(Tensor::scalar(s), Op::SqNorm(x), &[x])
    }

    /// Log-softmax over all entries of `x`, treated as one distribution.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let lse = log_sum_exp(xv.data.iter().copied());
        let value = xv.map(|v| v - lse);
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    /// Softmax over all entries of `x`.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let lse = log_sum_exp(xv.data.iter().copied());
        let value = xv.map(|v| (v - lse).exp());
        self.push(value, Op::Softmax(x), &[x])
    }

    /// For `x` of shape K×m, row `i·K + j` of the output is `x_i − x_j`.
    pub fn pairwise_diff(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (k, m) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(k * k * m);
        for i in 0..k {
            for j in 0..k {
                for c in 0..m {
                    data.push(xv.at(i, c) - xv.at(j, c));
                }
            }
        }
        self.push(Tensor::matrix(k * k, m, data), Op::PairwiseDiff(x), &[x])
    }

    /// Euclidean norm of each row (n×1). Rows with norm below `eps` have zero
    /// gradient.
    pub fn row_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = (0..xv.rows())
            .map(|r| xv.row_slice(r).iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
            .collect();
        self.push(Tensor::matrix(xv.rows(), 1, data), Op::RowNorm(x, eps), &[x])
    }

    /// Each row scaled to unit norm; rows with norm below `eps` map to zero.
    pub fn row_normalize(&mut self, x: Var, eps: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let cols = xv.cols();
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row_slice(r);
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            if n < eps {
                data.extend(std::iter::repeat(T::zero()).take(cols));
            } else {
                data.extend(row.iter().map(|&v| v / n));
            }
        }
        let value = Tensor { shape: xv.shape.clone(), data };
        self.push(value, Op::RowNormalize(x, eps), &[x])
    }

    /// Divides each column of a square matrix by `eps + column sum`.
    pub fn col_normalize(&mut self, a: Var, eps: T) -> Var {
        let av = &self.nodes[a.0].value;
        let (n, m) = (av.rows(), av.cols());
        let mut sums = vec![eps; m];
        for r in 0..n {
            for (c, s) in sums.iter_mut().enumerate() {
                *s = *s + av.at(r, c);
            }
        }
        let data = av.data.iter().enumerate().map(|(i, &v)| v / sums[i % m]).collect();
        let value = Tensor { shape: av.shape.clone(), data };
        self.push(value, Op::ColNormalize(a, eps), &[a])
    }

    /// Filtered message aggregation: `out[i] = Σ_j adj[j,i] · (filter[j,i] ⊙ h[j])`
    /// with `adj` K×K, `filter` (K·K)×d indexed `j·K + i`, `h` K×d.
    pub fn edge_aggregate(&mut self, adj: Var, filter: Var, h: Var) -> Var {
        let av = &self.nodes[adj.0].value;
        let pv = &self.nodes[filter.0].value;
        let hv = &self.nodes[h.0].value;
        let (k, d) = (hv.rows(), hv.cols());
        assert_eq!(av.len(), k * k, "edge_aggregate adjacency shape");
        assert_eq!(pv.len(), k * k * d, "edge_aggregate filter shape");
        let mut data = vec![T::zero(); k * d];
        for j in 0..k {
            let hj = hv.row_slice(j);
            for i in 0..k {
                let a = av.data[j * k + i];
                if a == T::zero() {
                    continue;
                }
                let p = &pv.data[(j * k + i) * d..(j * k + i + 1) * d];
                let out = &mut data[i * d..(i + 1) * d];
                for c in 0..d {
                    out[c] = out[c] + a * p[c] * hj[c];
                }
            }
        }
        self.push(Tensor::matrix(k, d, data), Op::EdgeAggregate(adj, filter, h), &[adj, filter, h])
    }

    /// Log-density of `point` (1×2) under a diagonal Gaussian mixture with
    /// unnormalized weight logits (K×1), means (K×2) and log-variances (K×2).
    pub fn gmm_log_density(&mut self, logits: Var, mean: Var, log_var: Var, point: Var) -> Var {
        let (comp, _) = self.gmm_terms(logits, mean, log_var, point);
        let lse_w = log_sum_exp(self.nodes[logits.0].value.data.iter().copied());
        let value = log_sum_exp(comp.iter().copied()) - lse_w;
        self.push(
            Tensor::scalar(value),
            Op::GmmLogDensity { logits, mean, log_var, point },
            &[logits, mean, log_var, point],
        )
    }

    /// Per-component `logit_i + log N(s; μ_i, σ²_i)` and the standardized
    /// residuals `(s − μ_i)/σ²_i`.
    fn gmm_terms(&self, logits: Var, mean: Var, log_var: Var, point: Var) -> (Vec<T>, Vec<T>) {
        let lw = &self.nodes[logits.0].value;
        let mu = &self.nodes[mean.0].value;
        let lv = &self.nodes[log_var.0].value;
        let s = &self.nodes[point.0].value;
        let k = lw.len();
        let dim = s.len();
        assert_eq!(mu.len(), k * dim);
        assert_eq!(lv.len(), k * dim);
        let half_log_2pi = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
        let mut comp = Vec::with_capacity(k);
        let mut resid = Vec::with_capacity(k * dim);
        for i in 0..k {
            let mut acc = lw.data[i];
            for d in 0..dim {
                let var = lv.data[i * dim + d].exp();
                let diff = s.data[d] - mu.data[i * dim + d];
                acc = acc - half_log_2pi - T::of(0.5) * lv.data[i * dim + d] - T::of(0.5) * diff * diff / var;
                resid.push(diff / var);
            }
            comp.push(acc);
        }
        (comp, resid)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.nodes[out.0].value.len(), 1, "backward expects a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * bv.data[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * av.data[i];
                    }
                });
            }
            Op::AddRow(x, r) => {
                acc(*x, &|s| add_into(s, g));
                let m = val(*r).len();
                acc(*r, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % m] = s[i % m] + gv;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + *c * b)),
            Op::ScaleBy(x, sc) => {
                let scv = val(*sc).item();
                let xv = val(*x);
                acc(*x, &|s| s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + scv * b));
                acc(*sc, &|s| {
                    let dot = xv.data.iter().zip(g).fold(T::zero(), |a, (&x, &y)| a + x * y);
                    s[0] = s[0] + dot;
                });
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    acc(v, &|s| s.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + c * b));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let ga = matmul_nt_raw(g, &bv.data, n, m, k);
                    acc(*a, &|s| add_into(s, &ga));
                }
                if needs(*b) {
                    let gb = matmul_tn_raw(&av.data, g, n, k, m);
                    acc(*b, &|s| add_into(s, &gb));
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a · bᵀ, a n×k, b m×k, g n×m
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if needs(*a) {
                    let ga = matmul_raw(g, &bv.data, n, m, k);
                    acc(*a, &|s| add_into(s, &ga));
                }
                if needs(*b) {
                    let gb = matmul_tn_raw(g, &av.data, n, m, k);
                    acc(*b, &|s| add_into(s, &gb));
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &|s| {
                        for r in 0..rows {
                            for c in 0..w {
                                s[r * w + c] = s[r * w + c] + g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::RepeatRows(x) => {
                let m = val(*x).len();
                acc(*x, &|s| {
                    for (i, &gv) in g.iter().enumerate() {
                        s[i % m] = s[i % m] + gv;
                    }
                });
            }
            Op::SliceCols(x, start) => {
                let xv = val(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                acc(*x, &|s| {
                    for r in 0..rows {
                        for c in 0..len {
                            s[r * cols + start + c] = s[r * cols + start + c] + g[r * len + c];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
            Op::Tanh(x) => {
                let y = &node.value.data;
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * sigmoid(xv.data[i]);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(xv.data[i]);
                        s[i] = s[i] + g[i] * (sg + xv.data[i] * sg * (T::one() - sg));
                    }
                });
            }
            Op::Exp(x) => {
                let y = &node.value.data;
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * y[i];
                    }
                });
            }
            Op::Log(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] / xv.data[i];
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * T::of(2.0) * xv.data[i];
                    }
                });
            }
            Op::ClampMin(x, lo) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        if xv.data[i] > *lo {
                            s[i] = s[i] + g[i];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|s| s.iter_mut().for_each(|a| *a = *a + g[0])),
            Op::Mean(x) => {
                let n = T::of(val(*x).len() as f64);
                acc(*x, &|s| s.iter_mut().for_each(|a| *a = *a + g[0] / n));
            }
            Op::SqNorm(x) => {
                let xv = val(*x);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[0] * T::of(2.0) * xv.data[i];
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = &node.value.data;
                let gsum = g.iter().fold(T::zero(), |a, &b| a + b);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] - y[i].exp() * gsum;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value.data;
                let dot = y.iter().zip(g).fold(T::zero(), |a, (&p, &q)| a + p * q);
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + y[i] * (g[i] - dot);
                    }
                });
            }
            Op::PairwiseDiff(x) => {
                let xv = val(*x);
                let (k, m) = (xv.rows(), xv.cols());
                acc(*x, &|s| {
                    for i in 0..k {
                        for j in 0..k {
                            for c in 0..m {
                                let gv = g[(i * k + j) * m + c];
                                s[i * m + c] = s[i * m + c] + gv;
                                s[j * m + c] = s[j * m + c] - gv;
                            }
                        }
                    }
                });
            }
            Op::RowNorm(x, eps) => {
                let xv = val(*x);
                let norms = &node.value.data;
                let cols = xv.cols();
                acc(*x, &|s| {
                    for r in 0..xv.rows() {
                        if norms[r] < *eps {
                            continue;
                        }
                        for c in 0..cols {
                            let i = r * cols + c;
                            s[i] = s[i] + g[r] * xv.data[i] / norms[r];
                        }
                    }
                });
            }
            Op::RowNormalize(x, eps) => {
                let xv = val(*x);
                let y = &node.value.data;
                let cols = xv.cols();
                acc(*x, &|s| {
                    for r in 0..xv.rows() {
                        let row = xv.row_slice(r);
                        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
                        if n < *eps {
                            continue;
                        }
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for c in 0..cols {
                            s[r * cols + c] = s[r * cols + c] + (gr[c] - yr[c] * dot) / n;
                        }
                    }
                });
            }
            Op::ColNormalize(a, eps) => {
                let av = val(*a);
                let y = &node.value.data;
                let (n, m) = (av.rows(), av.cols());
                let mut sums = vec![*eps; m];
                for r in 0..n {
                    for (c, s) in sums.iter_mut().enumerate() {
                        *s = *s + av.at(r, c);
                    }
                }
                let mut dots = vec![T::zero(); m];
                for r in 0..n {
                    for c in 0..m {
                        dots[c] = dots[c] + g[r * m + c] * y[r * m + c];
                    }
                }
                acc(*a, &|s| {
                    for r in 0..n {
                        for c in 0..m {
                            s[r * m + c] = s[r * m + c] + (g[r * m + c] - dots[c]) / sums[c];
                        }
                    }
                });
            }
            Op::EdgeAggregate(adj, filter, h) => {
                let av = val(*adj);
                let pv = val(*filter);
                let hv = val(*h);
                let (k, d) = (hv.rows(), hv.cols());
                acc(*h, &|s| {
                    for j in 0..k {
                        for i in 0..k {
                            let a = av.data[j * k + i];
                            if a == T::zero() {
                                continue;
                            }
                            for c in 0..d {
                                s[j * d + c] = s[j * d + c] + a * pv.data[(j * k + i) * d + c] * g[i * d + c];
                            }
                        }
                    }
                });
                acc(*filter, &|s| {
                    for j in 0..k {
                        for i in 0..k {
                            let a = av.data[j * k + i];
                            for c in 0..d {
                                let e = (j * k + i) * d + c;
                                s[e] = s[e] + a * hv.data[j * d + c] * g[i * d + c];
                            }
                        }
                    }
                });
                acc(*adj, &|s| {
                    for j in 0..k {
                        for i in 0..k {
                            let mut dot = T::zero();
                            for c in 0..d {
                                dot = dot + pv.data[(j * k + i) * d + c] * hv.data[j * d + c] * g[i * d + c];
                            }
                            s[j * k + i] = s[j * k + i] + dot;
                        }
                    }
                });
            }
            Op::GmmLogDensity { logits, mean, log_var, point } => {
                let (comp, resid) = self.gmm_terms(*logits, *mean, *log_var, *point);
                let lse = log_sum_exp(comp.iter().copied());
                let resp: Vec<T> = comp.iter().map(|&c| (c - lse).exp()).collect();
                let lw = val(*logits);
                let lse_w = log_sum_exp(lw.data.iter().copied());
                let k = resp.len();
                let dim = resid.len() / k;
                let g0 = g[0];
                acc(*logits, &|s| {
                    for i in 0..k {
                        s[i] = s[i] + g0 * (resp[i] - (lw.data[i] - lse_w).exp());
                    }
                });
                acc(*mean, &|s| {
                    for i in 0..k * dim {
                        s[i] = s[i] + g0 * resp[i / dim] * resid[i];
                    }
                });
                let lvv = val(*log_var);
                let mu = val(*mean);
                let pt = val(*point);
                acc(*log_var, &|s| {
                    for i in 0..k * dim {
                        let diff = pt.data[i % dim] - mu.data[i];
                        let q = diff * diff / lvv.data[i].exp();
                        s[i] = s[i] + g0 * resp[i / dim] * T::of(0.5) * (q - T::one());
                    }
                });
                acc(*point, &|s| {
                    for i in 0..k * dim {
                        s[i % dim] = s[i % dim] - g0 * resp[i / dim] * resid[i];
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::rel_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

    /// Loss = Σ w ⊙ op(inputs) with fixed random weights `w`, so every output
    /// entry contributes to the check.
    fn weighted(tape: &mut Tape<f64>, out: Var, rng_seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let v = tape.value(out);
        let w: Vec<f64> = (0..v.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv = tape.constant(Tensor { shape: v.shape.clone(), data: w });
        let prod = tape.mul(out, wv);
        tape.sum(prod)
    }

    fn check(name: &str, shapes: &[Vec<usize>], build: &Build, trials: usize, positive: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
        for trial in 0..trials {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product();
                    let data = (0..n)
                        .map(|_| if positive { rng.gen_range(0.2..2.0) } else { rng.gen_range(-1.5..1.5) })
                        .collect();
                    Tensor::new(s.clone(), data)
                })
                .collect();
            let seed = trial as u64;
            let eval = |inp: &[Tensor<f64>]| -> f64 {
                let mut t = Tape::new();
                let vs: Vec<Var> = inp.iter().map(|x| t.leaf(x.clone(), true)).collect();
                let out = build(&mut t, &vs);
                let l = weighted(&mut t, out, seed);
                t.scalar(l)
            };
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            let loss = weighted(&mut tape, out, seed);
            let grads = tape.backward(loss);
            for (k, v) in vars.iter().enumerate() {
                let analytic = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
                for i in 0..inputs[k].len() {
                    let h = 1e-5;
                    let mut up = inputs.clone();
                    up[k].data[i] += h;
                    let mut dn = inputs.clone();
                    dn[k].data[i] -= h;
                    let fd = (eval(&up) - eval(&dn)) / (2.0 * h);
                    let err = rel_error(analytic[i], fd, 1e-6);
                    assert!(err < 1e-4, "{name} trial {trial} input {k}[{i}]: analytic {} fd {fd} err {err}", analytic[i]);
                }
            }
        }
    }

    const TRIALS: usize = 100;

    #[test]
    fn grad_elementwise_binary() {
        check("add", &[vec![2, 3], vec![2, 3]], &|t, v| t.add(v[0], v[1]), TRIALS, false);
        check("sub", &[vec![2, 3], vec![2, 3]], &|t, v| t.sub(v[0], v[1]), TRIALS, false);
        check("mul", &[vec![2, 3], vec![2, 3]], &|t, v| t.mul(v[0], v[1]), TRIALS, false);
        check("add_row", &[vec![3, 2], vec![1, 2]], &|t, v| t.add_row(v[0], v[1]), TRIALS, false);
        check("scale_by", &[vec![3, 2], vec![1, 1]], &|t, v| t.scale_by(v[0], v[1]), TRIALS, false);
        check("lincomb", &[vec![2, 2], vec![2, 2]], &|t, v| t.lincomb(&[(v[0], 0.5), (v[1], -2.0), (v[0], 1.5)]), TRIALS, false);
        check("scale", &[vec![2, 2]], &|t, v| t.scale(v[0], -3.0), TRIALS, false);
    }

    #[test]
    fn grad_matmul_family() {
        check("matmul", &[vec![3, 4], vec![4, 2]], &|t, v| t.matmul(v[0], v[1]), TRIALS, false);
        check("matmul_nt", &[vec![3, 4], vec![5, 4]], &|t, v| t.matmul_nt(v[0], v[1]), TRIALS, false);
        check("affine", &[vec![3, 4], vec![4, 2], vec![1, 2]], &|t, v| t.affine(v[0], v[1], v[2]), TRIALS, false);
    }

    #[test]
    fn grad_shape_ops() {
        check("concat", &[vec![2, 3], vec![2, 1]], &|t, v| t.concat_cols(&[v[0], v[1], v[0]]), TRIALS, false);
        check("repeat", &[vec![1, 3]], &|t, v| t.repeat_rows(v[0], 4), TRIALS, false);
        check("slice", &[vec![3, 5]], &|t, v| t.slice_cols(v[0], 1, 3), TRIALS, false);
        check("reshape", &[vec![2, 6]], &|t, v| t.reshape(v[0], &[3, 4]), TRIALS, false);
        check("pairwise", &[vec![4, 2]], &|t, v| t.pairwise_diff(v[0]), TRIALS, false);
    }

    #[test]
    fn grad_activations() {
        check("tanh", &[vec![2, 3]], &|t, v| t.tanh(v[0]), TRIALS, false);
        check("sigmoid", &[vec![2, 3]], &|t, v| t.sigmoid(v[0]), TRIALS, false);
        check("softplus", &[vec![2, 3]], &|t, v| t.softplus(v[0]), TRIALS, false);
        check("silu", &[vec![2, 3]], &|t, v| t.silu(v[0]), TRIALS, false);
        check("exp", &[vec![2, 3]], &|t, v| t.exp(v[0]), TRIALS, false);
        check("log", &[vec![2, 3]], &|t, v| t.log(v[0]), TRIALS, true);
        check("square", &[vec![2, 3]], &|t, v| t.square(v[0]), TRIALS, false);
        check("clamp_min", &[vec![2, 3]], &|t, v| t.clamp_min(v[0], -20.0), TRIALS, false);
    }

    #[test]
    fn grad_reductions() {
        check("sum", &[vec![2, 3]], &|t, v| t.sum(v[0]), TRIALS, false);
        check("mean", &[vec![2, 3]], &|t, v| t.mean(v[0]), TRIALS, false);
        check("sq_norm", &[vec![2, 3]], &|t, v| t.sq_norm(v[0]), TRIALS, false);
        check("log_softmax", &[vec![5, 1]], &|t, v| t.log_softmax(v[0]), TRIALS, false);
        check("softmax", &[vec![5, 1]], &|t, v| t.softmax(v[0]), TRIALS, false);
    }

    #[test]
    fn grad_geometry_ops() {
        check("row_norm", &[vec![4, 2]], &|t, v| t.row_norm(v[0], 1e-12), TRIALS, false);
        check("row_normalize", &[vec![4, 2]], &|t, v| t.row_normalize(v[0], 1e-12), TRIALS, false);
        check("col_normalize", &[vec![4, 4]], &|t, v| t.col_normalize(v[0], 1e-8), TRIALS, true);
    }

    #[test]
    fn grad_edge_aggregate() {
        check("edge_aggregate", &[vec![3, 3], vec![9, 2], vec![3, 2]], &|t, v| t.edge_aggregate(v[0], v[1], v[2]), TRIALS, false);
    }

    #[test]
    fn grad_gmm_log_density() {
        check(
            "gmm",
            &[vec![3, 1], vec![3, 2], vec![3, 2], vec![1, 2]],
            &|t, v| t.gmm_log_density(v[0], v[1], v[2], v[3]),
            TRIALS,
            false,
        );
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let sq = t.square(w);
        let l = t.sum(sq);
        let g = t.backward(l);
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0), true);
        let y = t.softplus(x);
        assert!((t.scalar(y) - std::f64::consts::LN_2).abs() < 1e-15);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap()[0], 0.5);
    }

    #[test]
    fn degenerate_rows_have_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 2, vec![0.0, 0.0, 3.0, 4.0]), true);
        let n = t.row_normalize(x, 1e-12);
        assert_eq!(&t.value(n).data, &[0.0, 0.0, 0.6, 0.8]);
        let l = t.sum(n);
        let g = t.backward(l);
        assert_eq!(&g.get(x).unwrap()[..2], &[0.0, 0.0]);
        assert!(g.get(x).unwrap().iter().all(|v: &f64| v.is_finite()));
    }

    #[test]
    fn non_finite_node_is_reported() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(-1.0), true);
        let y = t.log(x);
        let _ = t.exp(y);
        let bad = t.first_non_finite().unwrap();
        assert_eq!(bad.node, y.index());
        assert_eq!(bad.op, "log");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(3.0), true);
        let y = t.mul(c, x);
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap()[0], 2.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let build = |t: &mut Tape<f64>| {
            let a = t.leaf(Tensor::matrix(2, 2, vec![0.3, -0.1, 0.7, 0.2]), true);
            let b = t.tanh(a);
            let c = t.matmul(b, a);
            let d = t.softplus(c);
            let s = t.sum(d);
            t.scalar(s)
        };
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        assert_eq!(build(&mut t1).to_bits(), build(&mut t2).to_bits());
    }
}
