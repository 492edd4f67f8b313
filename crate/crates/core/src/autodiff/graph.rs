//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node; `backward` walks the tape in reverse creation
//! order. Nodes whose inputs carry no gradient are skipped.

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self) -> (usize, usize) {
        let p = self.pad();
        (
            (self.height + 2 * p - self.kernel) / self.stride + 1,
            (self.width + 2 * p - self.kernel) / self.stride + 1,
        )
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Var,
        height: usize,
        width: usize,
        stride: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
    SegmentMean(Var, Vec<usize>, Vec<f64>),
    WeightedGather(Var, Vec<Vec<(usize, f64)>>),
    SoftmaxRows(Var),
    RowDot(Var, Var),
    MulCol(Var, Var),
    Sum(Var),
    BceLogits(Var, Vec<f64>),
    SmoothL1(Var, Vec<f64>, f64),
    SoftmaxCe(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input; its gradient is available after `backward`.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.params.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        assert_eq!(k, tb.rows(), "matmul inner dims {:?} x {:?}", ta.shape, tb.shape);
        let m = tb.cols();
        let mut out = vec![0.0; n * m];
        gemm_acc(&ta.data, &tb.data, &mut out, n, k, m);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(n, m, out), Op::MatMul(a, b), ng)
    }

    /// `a * b^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = (ta.rows(), ta.cols());
        assert_eq!(m, tb.cols(), "matmul_bt dims {:?} x {:?}", ta.shape, tb.shape);
        let k = tb.rows();
        let mut out = vec![0.0; n * k];
        gemm_a_bt_acc(&ta.data, &tb.data, &mut out, n, m, k);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(n, k, out), Op::MatMulBt(a, b), ng)
    }

    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(bias);
        let c = ta.cols();
        assert_eq!(tb.numel(), c, "bias width");
        let mut out = ta.clone();
        for row in out.data.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(&tb.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddRowBias(a, bias), ng)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "elementwise shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape.clone(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v *= s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    /// `x` is an `(H*W) x Cin` map, `w` is `(k*k*Cin) x Cout`, `b` is `1 x Cout`.
    /// Zero padding of `k/2`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(b);
        let cin = tx.cols();
        assert_eq!(tx.rows(), spec.height * spec.width, "conv2d input rows");
        assert_eq!(tw.rows(), spec.kernel * spec.kernel * cin, "conv2d weight rows");
        let cout = tw.cols();
        let (ho, wo) = spec.out_dims();
        let pad = spec.pad() as isize;
        let mut out = vec![0.0; ho * wo * cout];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                orow.copy_from_slice(&tb.data);
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= spec.height as isize {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= spec.width as isize {
                            continue;
                        }
                        let q = iy as usize * spec.width + ix as usize;
                        let xrow = &tx.data[q * cin..(q + 1) * cin];
                        let wblk = &tw.data[(ky * spec.kernel + kx) * cin * cout..][..cin * cout];
                        gemm_acc(xrow, wblk, orow, 1, cin, cout);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::matrix(ho * wo, cout, out),
            Op::Conv2d { x, w, b, spec },
            ng,
        )
    }

    /// Transposed convolution with kernel == stride (non-overlapping upsampling).
    /// `w` is `(s*s*Cin) x Cout`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Var, height: usize, width: usize, stride: usize) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        let tb = self.value(b);
        let cin = tx.cols();
        assert_eq!(tx.rows(), height * width);
        assert_eq!(tw.rows(), stride * stride * cin);
        let cout = tw.cols();
        let (ho, wo) = (height * stride, width * stride);
        let mut out = vec![0.0; ho * wo * cout];
        for iy in 0..height {
            for ix in 0..width {
                let xrow = &tx.data[(iy * width + ix) * cin..][..cin];
                for a in 0..stride {
                    for bb in 0..stride {
                        let o = (iy * stride + a) * wo + ix * stride + bb;
                        let orow = &mut out[o * cout..(o + 1) * cout];
                        orow.copy_from_slice(&tb.data);
                        let wblk = &tw.data[(a * stride + bb) * cin * cout..][..cin * cout];
                        gemm_acc(xrow, wblk, orow, 1, cin, cout);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            Tensor::matrix(ho * wo, cout, out),
            Op::ConvTranspose {
                x,
                w,
                b,
                height,
                width,
                stride,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(t.row(r));
            }
            off += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        assert!(start + len <= c, "slice_cols out of range");
        let rows = t.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(rows, len, out), Op::SliceCols(a, start), ng)
    }

    /// Same data viewed as a `rows x cols` matrix.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.numel(), rows * cols, "reshape size mismatch");
        let out = Tensor::matrix(rows, cols, t.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(idx.len(), c, out), Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Places row `i` of `a` at row `idx[i]` of a zero `rows x C` output.
    /// Indices must be unique.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; rows * c];
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < rows, "scatter index {r} outside {rows} rows");
            out[r * c..(r + 1) * c].copy_from_slice(t.row(i));
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(rows, c, out), Op::ScatterRows(a, idx.to_vec()), ng)
    }

    /// Column-wise max over rows grouped by `seg[i]` in `0..nseg`. Empty segments
    /// yield zero rows; ties go to the first row in input order.
    pub fn segment_max(&mut self, a: Var, seg: &[usize], nseg: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        assert_eq!(seg.len(), t.rows());
        let mut out = vec![0.0; nseg * c];
        let mut winner = vec![usize::MAX; nseg * c];
        for (i, &s) in seg.iter().enumerate() {
            let row = t.row(i);
            for j in 0..c {
                let k = s * c + j;
                if winner[k] == usize::MAX || row[j] > out[k] {
                    out[k] = row[j];
                    winner[k] = i;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(nseg, c, out), Op::SegmentMax(a, winner), ng)
    }

    pub fn segment_mean(&mut self, a: Var, seg: &[usize], nseg: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        assert_eq!(seg.len(), t.rows());
        let mut counts = vec![0.0; nseg];
        let mut out = vec![0.0; nseg * c];
        for (i, &s) in seg.iter().enumerate() {
            counts[s] += 1.0;
            for (o, v) in out[s * c..(s + 1) * c].iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for (s, &n) in counts.iter().enumerate() {
            if n > 0.0 {
                out[s * c..(s + 1) * c].iter_mut().for_each(|v| *v /= n);
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(nseg, c, out), Op::SegmentMean(a, seg.to_vec(), counts), ng)
    }

    /// Output row `r` is `sum_k w_k * a[i_k]` over `entries[r] = [(i_k, w_k)]`.
    pub fn weighted_gather(&mut self, a: Var, entries: Vec<Vec<(usize, f64)>>) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = vec![0.0; entries.len() * c];
        for (r, e) in entries.iter().enumerate() {
            let orow = &mut out[r * c..(r + 1) * c];
            for &(i, w) in e {
                for (o, v) in orow.iter_mut().zip(t.row(i)) {
                    *o += w * v;
                }
            }
        }
        let ng = self.ng(a);
        let rows = entries.len();
        self.push(Tensor::matrix(rows, c, out), Op::WeightedGather(a, entries), ng)
    }

    /// Row softmax; `-inf` entries receive weight exactly 0 and rows that are
    /// entirely `-inf` produce all zeros.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let c = t.cols();
        for row in t.data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(a);
        self.push(t, Op::SoftmaxRows(a), ng)
    }

    /// Per-row inner product, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape);
        let c = ta.cols();
        let out: Vec<f64> = ta
            .data
            .chunks(c)
            .zip(tb.data.chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let n = out.len();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::matrix(n, 1, out), Op::RowDot(a, b), ng)
    }

    /// Scale each row of `a` (`n x m`) by `w[r]` (`n x 1`).
    pub fn mul_col(&mut self, a: Var, w: Var) -> Var {
        let (ta, tw) = (self.value(a), self.value(w));
        assert_eq!(ta.rows(), tw.numel());
        let c = ta.cols();
        let mut out = ta.clone();
        for (row, &s) in out.data.chunks_mut(c).zip(&tw.data) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(a) || self.ng(w);
        self.push(out, Op::MulCol(a, w), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Mean sigmoid cross-entropy of logits against targets in `[0, 1]`.
    pub fn bce_logits_mean(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.numel(), targets.len());
        let n = targets.len().max(1) as f64;
        let s: f64 = t.data.iter().zip(&targets).map(|(&x, &y)| bce_logit(x, y)).sum();
        let ng = self.ng(logits);
        self.push(Tensor::scalar(s / n), Op::BceLogits(logits, targets), ng)
    }

    /// Summed elementwise Huber loss with threshold `beta`.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: Vec<f64>, beta: f64) -> Var {
        let t = self.value(pred);
        assert_eq!(t.numel(), target.len());
        let s: f64 = t.data.iter().zip(&target).map(|(&p, &g)| huber(p - g, beta)).sum();
        let ng = self.ng(pred);
        self.push(Tensor::scalar(s), Op::SmoothL1(pred, target, beta), ng)
    }

    /// Summed softmax cross-entropy over rows against class indices.
    pub fn softmax_ce_sum(&mut self, logits: Var, target: Vec<usize>) -> Var {
        let t = self.value(logits);
        assert_eq!(t.rows(), target.len());
        let s: f64 = t
            .data
            .chunks(t.cols())
            .zip(&target)
            .map(|(row, &k)| log_sum_exp(row) - row[k])
            .sum();
        let ng = self.ng(logits);
        self.push(Tensor::scalar(s), Op::SoftmaxCe(logits, target), ng)
    }

    /// Reverse pass from a scalar node. Gradients of all differentiable leaves
    /// become available through [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).numel(), 1, "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> Vec<(ParamId, Option<&[f64]>)> {
        self.params.iter().map(|&(p, v)| (p, self.grad(v))).collect()
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |ga| gemm_a_bt_acc(g, &tb.data, ga, n, m, k));
                acc(*b, &mut |gb| gemm_at_b_acc(&ta.data, g, gb, n, k, m));
            }
            Op::MatMulBt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, m, k) = (ta.rows(), ta.cols(), tb.rows());
                acc(*a, &mut |ga| gemm_acc(g, &tb.data, ga, n, k, m));
                acc(*b, &mut |gb| gemm_at_b_acc(g, &ta.data, gb, n, k, m));
            }
            Op::AddRowBias(a, b) => {
                let c = val(*a).cols();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, v)| *o += s * v)),
            Op::Relu(a) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, gv), x) in ga.iter_mut().zip(g).zip(&ta.data) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &nodes[idx].value;
                acc(*a, &mut |ga| {
                    for ((o, gv), s) in ga.iter_mut().zip(g).zip(&y.data) {
                        *o += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Conv2d { x, w, b, spec } => conv2d_backward(val(*x), val(*w), g, *spec, &mut |v, f| match v {
                0 => acc(*x, f),
                1 => acc(*w, f),
                _ => acc(*b, f),
            }),
            Op::ConvTranspose {
                x,
                w,
                b,
                height,
                width,
                stride,
            } => {
                let (tx, tw) = (val(*x), val(*w));
                let cin = tx.cols();
                let cout = tw.cols();
                let s = *stride;
                let wo = width * s;
                let out_index = |iy: usize, ix: usize, a: usize, bb: usize| (iy * s + a) * wo + ix * s + bb;
                acc(*x, &mut |gx| {
                    for iy in 0..*height {
                        for ix in 0..*width {
                            let gxrow = &mut gx[(iy * width + ix) * cin..][..cin];
                            for a in 0..s {
                                for bb in 0..s {
                                    let o = out_index(iy, ix, a, bb);
                                    let grow = &g[o * cout..(o + 1) * cout];
                                    let wblk = &tw.data[(a * s + bb) * cin * cout..][..cin * cout];
                                    gemm_a_bt_acc(grow, wblk, gxrow, 1, cout, cin);
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for iy in 0..*height {
                        for ix in 0..*width {
                            let xrow = &tx.data[(iy * width + ix) * cin..][..cin];
                            for a in 0..s {
                                for bb in 0..s {
                                    let o = out_index(iy, ix, a, bb);
                                    let grow = &g[o * cout..(o + 1) * cout];
                                    let gblk = &mut gw[(a * s + bb) * cin * cout..][..cin * cout];
                                    gemm_at_b_acc(xrow, grow, gblk, 1, cin, cout);
                                }
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for row in g.chunks(cout) {
                        add_into(gb, row);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = nodes[idx].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let c = val(*a).cols();
                let len = nodes[idx].value.cols();
                acc(*a, &mut |ga| {
                    for (row, grow) in ga.chunks_mut(c).zip(g.chunks(len)) {
                        add_into(&mut row[*start..*start + len], grow);
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |ga| add_into(ga, g));
            }
            Op::GatherRows(a, ix) => {
                let c = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (r, &i) in ix.iter().enumerate() {
                        add_into(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ScatterRows(a, ix) => {
                let c = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (r, &i) in ix.iter().enumerate() {
                        add_into(&mut ga[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::SegmentMax(a, winner) => {
                let c = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (k, &wi) in winner.iter().enumerate() {
                        if wi != usize::MAX {
                            ga[wi * c + k % c] += g[k];
                        }
                    }
                });
            }
            Op::SegmentMean(a, seg, counts) => {
                let c = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (i, &s) in seg.iter().enumerate() {
                        let inv = 1.0 / counts[s];
                        for (o, v) in ga[i * c..(i + 1) * c].iter_mut().zip(&g[s * c..(s + 1) * c]) {
                            *o += inv * v;
                        }
                    }
                });
            }
            Op::WeightedGather(a, entries) => {
                let c = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (r, e) in entries.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        for &(i, w) in e {
                            for (o, v) in ga[i * c..(i + 1) * c].iter_mut().zip(grow) {
                                *o += w * v;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let y = &nodes[idx].value;
                let c = y.cols();
                acc(*a, &mut |ga| {
                    for ((orow, yrow), grow) in ga.chunks_mut(c).zip(y.data.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for ((o, &yv), &gv) in orow.iter_mut().zip(yrow).zip(grow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                acc(*a, &mut |ga| {
                    for ((orow, brow), gv) in ga.chunks_mut(c).zip(tb.data.chunks(c)).zip(g) {
                        orow.iter_mut().zip(brow).for_each(|(o, y)| *o += gv * y);
                    }
                });
                acc(*b, &mut |gb| {
                    for ((orow, arow), gv) in gb.chunks_mut(c).zip(ta.data.chunks(c)).zip(g) {
                        orow.iter_mut().zip(arow).for_each(|(o, x)| *o += gv * x);
                    }
                });
            }
            Op::MulCol(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let c = ta.cols();
                acc(*a, &mut |ga| {
                    for ((orow, grow), s) in ga.chunks_mut(c).zip(g.chunks(c)).zip(&tw.data) {
                        orow.iter_mut().zip(grow).for_each(|(o, gv)| *o += s * gv);
                    }
                });
                acc(*w, &mut |gw| {
                    for ((o, grow), arow) in gw.iter_mut().zip(g.chunks(c)).zip(ta.data.chunks(c)) {
                        *o += grow.iter().zip(arow).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0])),
            Op::BceLogits(a, targets) => {
                let ta = val(*a);
                let n = targets.len().max(1) as f64;
                acc(*a, &mut |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(&ta.data).zip(targets) {
                        *o += g[0] * (sigmoid(x) - y) / n;
                    }
                });
            }
            Op::SmoothL1(a, target, beta) => {
                let ta = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, &p), &t) in ga.iter_mut().zip(&ta.data).zip(target) {
                        *o += g[0] * huber_grad(p - t, *beta);
                    }
                });
            }
            Op::SoftmaxCe(a, target) => {
                let ta = val(*a);
                let c = ta.cols();
                acc(*a, &mut |ga| {
                    for ((orow, xrow), &k) in ga.chunks_mut(c).zip(ta.data.chunks(c)).zip(target) {
                        let mut p = xrow.to_vec();
                        softmax_in_place(&mut p);
                        for (j, (o, pj)) in orow.iter_mut().zip(&p).enumerate() {
                            let onehot = if j == k { 1.0 } else { 0.0 };
                            *o += g[0] * (pj - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn conv2d_backward(
    tx: &Tensor,
    tw: &Tensor,
    g: &[f64],
    spec: ConvSpec,
    acc: &mut dyn FnMut(usize, &mut dyn FnMut(&mut [f64])),
) {
    let cin = tx.cols();
    let cout = tw.cols();
    let (ho, wo) = spec.out_dims();
    let pad = spec.pad() as isize;
    let taps = |oy: usize, ox: usize| {
        let mut v = Vec::with_capacity(spec.kernel * spec.kernel);
        for ky in 0..spec.kernel {
            let iy = (oy * spec.stride) as isize + ky as isize - pad;
            if iy < 0 || iy >= spec.height as isize {
                continue;
            }
            for kx in 0..spec.kernel {
                let ix = (ox * spec.stride) as isize + kx as isize - pad;
                if ix < 0 || ix >= spec.width as isize {
                    continue;
                }
                v.push((ky * spec.kernel + kx, iy as usize * spec.width + ix as usize));
            }
        }
        v
    };
    acc(0, &mut |gx| {
        for oy in 0..ho {
            for ox in 0..wo {
                let grow = &g[(oy * wo + ox) * cout..][..cout];
                for (k, q) in taps(oy, ox) {
                    let wblk = &tw.data[k * cin * cout..][..cin * cout];
                    gemm_a_bt_acc(grow, wblk, &mut gx[q * cin..(q + 1) * cin], 1, cout, cin);
                }
            }
        }
    });
    acc(1, &mut |gw| {
        for oy in 0..ho {
            for ox in 0..wo {
                let grow = &g[(oy * wo + ox) * cout..][..cout];
                for (k, q) in taps(oy, ox) {
                    let xrow = &tx.data[q * cin..(q + 1) * cin];
                    gemm_at_b_acc(xrow, grow, &mut gw[k * cin * cout..][..cin * cout], 1, cin, cout);
                }
            }
        }
    });
    acc(2, &mut |gb| {
        for row in g.chunks(cout) {
            add_into(gb, row);
        }
    });
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `-(y ln s(x) + (1-y) ln(1-s(x)))`.
pub fn bce_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn huber(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d / beta
    } else {
        a - 0.5 * beta
    }
}

fn huber_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - m).exp() };
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}
