//! Recorded-expression reverse-mode differentiation over matrices.
//!
//! Every node holds its forward value. Values are computed eagerly while the
//! graph is built, so the graph doubles as the evaluator; [`Graph::backward`]
//! sweeps the nodes in reverse creation order.
//!
//! Shape violations while building are programmer errors and panic with the
//! name of the primitive. Non-finite forward values are recorded and reported
//! by [`Graph::backward`] as [`DiffError::NonFinite`].

use super::{DiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    /// `x · wᵀ + b` with `x: n×in`, `w: out×in`, `b: out`.
    Affine(NodeId, NodeId, NodeId),
    /// `a · b` with `a: n×k`, `b: k×m`.
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    BroadcastCols(NodeId, usize),
    RepeatRows(NodeId, usize),
    TileRows(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Affine(..) => "affine",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Neg(..) => "neg",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LogSumExpRows(..) => "logsumexp",
            Op::SumAll(..) => "sum",
            Op::SumRows(..) => "row_sum",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::RepeatRows(..) => "repeat_rows",
            Op::TileRows(..) => "tile_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// An expression graph with eagerly evaluated nodes.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<(NodeId, &'static str)>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `id`; `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max) - log_norm;
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `c = a · b` for row-major `a: m×k`, `b: k×n`; `b_transposed` reads `b` as `n×k`.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], b_transposed: bool, c: &mut [f64]) {
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = aᵀ · b` for row-major `a: k×m`, `b: k×n`.
fn gemm_at_b(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The first node whose forward value was not finite, with its primitive name.
    pub fn first_nonfinite(&self) -> Option<(NodeId, &'static str)> {
        self.first_nonfinite
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node { value, op });
        id
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    fn dims(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok = sa == sb || (self.value(a).len() == self.value(b).len() && self.dims(a) == self.dims(b));
        assert!(ok, "shape mismatch in {op}: {sa:?} vs {sb:?}");
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        self.push(v, op)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        self.same_shape(a, b, op.name());
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(out, op)
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, input) = self.dims(x);
        let (out, w_in) = self.dims(w);
        assert_eq!(self.value(w).rank(), 2, "affine weight must be a matrix");
        assert_eq!(input, w_in, "shape mismatch in affine: input has {input} columns, weight expects {w_in}");
        assert_eq!(self.value(b).len(), out, "shape mismatch in affine: bias length {} vs {out} rows", self.value(b).len());
        let mut data = vec![0.0; n * out];
        gemm(n, input, out, self.value(x).data(), self.value(w).data(), true, &mut data);
        let bias = self.value(b).data();
        for row in data.chunks_mut(out.max(1)) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(n, out, data), Op::Affine(x, w, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "shape mismatch in matmul: {m}x{k} · {k2}x{n}");
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), false, &mut data);
        self.push(Tensor::matrix(m, n, data), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise clamp into `[lo, hi]`; the gradient is passed only strictly inside.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn clamp_min(&mut self, a: NodeId, lo: f64) -> NodeId {
        self.clamp(a, lo, f64::INFINITY)
    }

    /// Row-wise softmax, evaluated through the max-shifted form.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.shape());
        let c = v.cols().max(1);
        for (row, o) in v.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            log_softmax_row(row, o);
            o.iter_mut().for_each(|x| *x = x.exp());
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Tensor::zeros(v.shape());
        let c = v.cols().max(1);
        for (row, o) in v.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
            log_softmax_row(row, o);
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Row-wise log-sum-exp, `n×c → n×1`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data: Vec<f64> = v.row_iter().map(logsumexp).collect();
        let n = data.len();
        self.push(Tensor::matrix(n, 1, data), Op::LogSumExpRows(a))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `n×c → n×1`.
    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data: Vec<f64> = v.row_iter().map(|r| r.iter().sum()).collect();
        let n = v.rows();
        self.push(Tensor::matrix(n, 1, data), Op::SumRows(a))
    }

    /// Inner product of two equally shaped tensors, as a scalar.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.sum(p)
    }

    /// Repeats a column `n×1 → n×c`.
    pub fn broadcast_cols(&mut self, a: NodeId, c: usize) -> NodeId {
        let (n, w) = self.dims(a);
        assert_eq!(w, 1, "broadcast_cols expects a single column, got {w}");
        let v = self.value(a).data();
        let data = v.iter().flat_map(|&x| std::iter::repeat_n(x, c)).collect();
        self.push(Tensor::matrix(n, c, data), Op::BroadcastCols(a, c))
    }

    /// Repeats each row `times` times consecutively: row `i` lands at `i*times..(i+1)*times`.
    pub fn repeat_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        if times == 1 {
            return a;
        }
        let (n, c) = self.dims(a);
        let v = self.value(a);
        let mut data = Vec::with_capacity(n * c * times);
        for r in v.row_iter() {
            for _ in 0..times {
                data.extend_from_slice(r);
            }
        }
        self.push(Tensor::matrix(n * times, c, data), Op::RepeatRows(a, times))
    }

    /// Stacks the whole block `times` times: row `i` lands at `i, i+n, i+2n, …`.
    pub fn tile_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let (n, c) = self.dims(a);
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(n * c * times);
        for _ in 0..times {
            data.extend_from_slice(v);
        }
        self.push(Tensor::matrix(n * times, c, data), Op::TileRows(a, times))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one input");
        let n = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.dims(p);
                assert_eq!(r, n, "shape mismatch in concat_cols: {r} rows vs {n}");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::matrix(n, total, data), Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let (n, c) = self.dims(a);
        assert!(start <= end && end <= c, "slice_cols {start}..{end} out of {c} columns");
        let v = self.value(a).data();
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&v[i * c + start..i * c + end]);
        }
        self.push(Tensor::matrix(n, end - start, data), Op::SliceCols(a, start, end))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .reshape(shape.to_vec())
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, DiffError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(DiffError::NonScalarObjective(out.shape().to_vec()));
        }
        if let Some((id, primitive)) = self.first_nonfinite {
            if id.0 <= output.0 {
                return Err(DiffError::NonFinite { primitive, node: id.0 });
            }
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match *op {
            Op::Leaf | Op::Constant => {}
            Op::Affine(x, w, b) => {
                let (n, input) = self.dims(x);
                let out = self.dims(w).0;
                let mut dx = vec![0.0; n * input];
                gemm(n, out, input, gd, self.value(w).data(), false, &mut dx);
                accumulate(grads, x, self.value(x).shape(), dx);
                let mut dw = vec![0.0; out * input];
                gemm_at_b(out, n, input, gd, self.value(x).data(), &mut dw);
                accumulate(grads, w, self.value(w).shape(), dw);
                let mut db = vec![0.0; out];
                for row in gd.chunks(out.max(1)) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, b, self.value(b).shape(), db);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(a);
                let n = self.dims(b).1;
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, gd, self.value(b).data(), true, &mut da);
                accumulate(grads, a, self.value(a).shape(), da);
                let mut db = vec![0.0; k * n];
                gemm_at_b(k, m, n, self.value(a).data(), gd, &mut db);
                accumulate(grads, b, self.value(b).shape(), db);
            }
            Op::Add(a, b) => {
                accumulate(grads, a, self.value(a).shape(), gd.to_vec());
                accumulate(grads, b, self.value(b).shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, self.value(a).shape(), gd.to_vec());
                accumulate(grads, b, self.value(b).shape(), gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                accumulate(grads, a, self.value(a).shape(), zip_map(gd, vb, |g, y| g * y));
                accumulate(grads, b, self.value(b).shape(), zip_map(gd, va, |g, x| g * x));
            }
            Op::Div(a, b) => {
                let vb = self.value(b).data();
                let out = value.data();
                accumulate(grads, a, self.value(a).shape(), zip_map(gd, vb, |g, y| g / y));
                let db = gd.iter().zip(out).zip(vb).map(|((g, o), y)| -g * o / y).collect();
                accumulate(grads, b, self.value(b).shape(), db);
            }
            Op::AddScalar(a) => accumulate(grads, a, self.value(a).shape(), gd.to_vec()),
            Op::Scale(a, c) => accumulate(grads, a, self.value(a).shape(), gd.iter().map(|g| g * c).collect()),
            Op::Neg(a) => accumulate(grads, a, self.value(a).shape(), gd.iter().map(|g| -g).collect()),
            Op::Tanh(a) => {
                let d = zip_map(gd, value.data(), |g, t| g * (1.0 - t * t));
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::Softplus(a) => {
                let d = zip_map(gd, self.value(a).data(), |g, x| g * sigmoid(x));
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::Sigmoid(a) => {
                let d = zip_map(gd, value.data(), |g, s| g * s * (1.0 - s));
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::Exp(a) => {
                let d = zip_map(gd, value.data(), |g, e| g * e);
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::Log(a) => {
                let d = zip_map(gd, self.value(a).data(), |g, x| g / x);
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::Square(a) => {
                let d = zip_map(gd, self.value(a).data(), |g, x| 2.0 * g * x);
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = zip_map(gd, self.value(a).data(), |g, x| if x > lo && x < hi { g } else { 0.0 });
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::SoftmaxRows(a) => {
                let c = value.cols().max(1);
                let mut d = vec![0.0; gd.len()];
                for ((gr, yr), dr) in gd.chunks(c).zip(value.data().chunks(c)).zip(d.chunks_mut(c)) {
                    let s: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = y * (g - s);
                    }
                }
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::LogSoftmaxRows(a) => {
                let c = value.cols().max(1);
                let mut d = vec![0.0; gd.len()];
                for ((gr, lr), dr) in gd.chunks(c).zip(value.data().chunks(c)).zip(d.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for ((o, g), l) in dr.iter_mut().zip(gr).zip(lr) {
                        *o = g - l.exp() * s;
                    }
                }
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::LogSumExpRows(a) => {
                let input = self.value(a);
                let c = input.cols().max(1);
                let mut d = vec![0.0; input.len()];
                for ((xr, dr), (&g, &l)) in input.data().chunks(c).zip(d.chunks_mut(c)).zip(gd.iter().zip(value.data())) {
                    for (o, x) in dr.iter_mut().zip(xr) {
                        *o = g * (x - l).exp();
                    }
                }
                accumulate(grads, a, input.shape(), d);
            }
            Op::SumAll(a) => {
                let n = self.value(a).len();
                accumulate(grads, a, self.value(a).shape(), vec![gd[0]; n]);
            }
            Op::SumRows(a) => {
                let c = self.value(a).cols();
                let d = gd.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect();
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::BroadcastCols(a, c) => {
                let d = gd.chunks(c.max(1)).map(|r| r.iter().sum()).collect();
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::RepeatRows(a, times) => {
                let (n, c) = self.dims(a);
                let mut d = vec![0.0; n * c];
                for (i, gr) in gd.chunks(c.max(1)).enumerate() {
                    let src = i / times;
                    for (o, g) in d[src * c..(src + 1) * c].iter_mut().zip(gr) {
                        *o += g;
                    }
                }
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::TileRows(a, times) => {
                let len = self.value(a).len();
                let mut d = vec![0.0; len];
                for t in 0..times {
                    for (o, g) in d.iter_mut().zip(&gd[t * len..(t + 1) * len]) {
                        *o += g;
                    }
                }
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::ConcatCols(ref parts) => {
                let n = value.rows();
                let total = value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut d = Vec::with_capacity(n * w);
                    for i in 0..n {
                        d.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, self.value(p).shape(), d);
                    offset += w;
                }
            }
            Op::SliceCols(a, start, end) => {
                let (n, c) = self.dims(a);
                let w = end - start;
                let mut d = vec![0.0; n * c];
                for i in 0..n {
                    d[i * c + start..i * c + end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                accumulate(grads, a, self.value(a).shape(), d);
            }
            Op::Reshape(a) => accumulate(grads, a, self.value(a).shape(), gd.to_vec()),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], d: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(d) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), d).expect("gradient shape")),
    }
}
