//! A small reverse-mode tape over dense matrices.
//!
//! Every forward operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. The op set is exactly
//! what the model needs, each with a hand-written adjoint.

use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse row recombination: output row `i` is `sum_j c_ij * input_row_j`.
pub type RowMix = Vec<Vec<(usize, f64)>>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Mat,
        inv_std: Vec<f64>,
    },
    RowScale(Var, Var),
    RowMix(Var, RowMix),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    HeadwiseDot(Var, Var, usize),
    SegmentSoftmax(Var, Vec<Vec<usize>>),
    MeanCols(Var),
    FlatGather(Var, Vec<Option<usize>>),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Mat,
        eps: f64,
    },
    WeightedBce {
        logits: Var,
        targets: Mat,
        weights: Vec<f64>,
        probs: Mat,
        eps: f64,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a * b^T`; with `b` a `[out, in]` weight this is a linear layer.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row bias must be a row vector");
        assert_eq!(b.cols(), self.value(a).cols(), "add_row width");
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Var {
        let y = self.matmul_nt(x, weight);
        self.add_row(y, bias)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let v = Mat::from_vec(va.rows(), va.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            v.row_mut(r)
                .copy_from_slice(&crate::tensor::softmax(va.row(r)));
        }
        self.push(v, Op::RowSoftmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let n = vx.cols();
        assert_eq!(g.shape(), (1, n), "layer_norm gain");
        assert_eq!(b.shape(), (1, n), "layer_norm bias");
        let mut normed = Mat::zeros(vx.rows(), n);
        let mut inv_std = Vec::with_capacity(vx.rows());
        let mut out = Mat::zeros(vx.rows(), n);
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                normed[(r, c)] = xh;
                out[(r, c)] = xh * g.data()[c] + b.data()[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        )
    }

    /// Scales row `i` of `a` by `w[i, 0]`.
    pub fn row_scale(&mut self, a: Var, w: Var) -> Var {
        let (va, vw) = (self.value(a), self.value(w));
        assert_eq!(vw.shape(), (va.rows(), 1), "row_scale weights");
        let mut v = va.clone();
        for r in 0..v.rows() {
            let s = vw.data()[r];
            v.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        self.push(v, Op::RowScale(a, w))
    }

    pub fn row_mix(&mut self, a: Var, mix: RowMix) -> Var {
        let va = self.value(a);
        let mut v = Mat::zeros(mix.len(), va.cols());
        for (i, terms) in mix.iter().enumerate() {
            let out = &mut v.row_mut(i);
            for &(j, c) in terms {
                for (o, x) in out.iter_mut().zip(va.row(j)) {
                    *o += c * x;
                }
            }
        }
        self.push(v, Op::RowMix(a, mix))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let mix = idx.iter().map(|&j| vec![(j, 1.0)]).collect();
        self.row_mix(a, mix)
    }

    /// Mean over all rows, as a `[1, cols]` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        let w = 1.0 / n as f64;
        self.row_mix(a, vec![(0..n).map(|j| (j, w)).collect()])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let vp = self.value(*p);
                assert_eq!(vp.rows(), rows, "concat_cols rows");
                v.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
                off += vp.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.cols(), cols, "concat_rows cols");
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        assert!(start + len <= va.cols(), "slice_cols range");
        let mut v = Mat::zeros(va.rows(), len);
        for r in 0..va.rows() {
            v.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    /// Row-wise dot products within each of `heads` equal column chunks.
    pub fn headwise_dot(&mut self, a: Var, b: Var, heads: usize) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "headwise_dot shape");
        assert_eq!(va.cols() % heads, 0, "headwise_dot head split");
        let dh = va.cols() / heads;
        let mut v = Mat::zeros(va.rows(), heads);
        for r in 0..va.rows() {
            for h in 0..heads {
                let s = h * dh;
                v[(r, h)] = crate::tensor::dot(&va.row(r)[s..s + dh], &vb.row(r)[s..s + dh]);
            }
        }
        self.push(v, Op::HeadwiseDot(a, b, heads))
    }

    /// Softmax over the rows of each segment, independently per column.
    /// Every row must belong to exactly one segment.
    pub fn segment_softmax(&mut self, a: Var, segments: Vec<Vec<usize>>) -> Var {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), va.cols());
        for seg in &segments {
            for c in 0..va.cols() {
                let max = seg
                    .iter()
                    .map(|&r| va[(r, c)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = seg.iter().map(|&r| (va[(r, c)] - max).exp()).sum();
                for &r in seg {
                    v[(r, c)] = (va[(r, c)] - max).exp() / total;
                }
            }
        }
        self.push(v, Op::SegmentSoftmax(a, segments))
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols() as f64;
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum::<f64>() / n).collect();
        self.push(Mat::from_vec(va.rows(), 1, data), Op::MeanCols(a))
    }

    /// Column vector of selected flat entries of `a`; `None` yields zero.
    pub fn flat_gather(&mut self, a: Var, idx: Vec<Option<usize>>) -> Var {
        let va = self.value(a);
        let data = idx
            .iter()
            .map(|i| i.map_or(0.0, |i| va.data()[i]))
            .collect();
        self.push(Mat::from_vec(idx.len(), 1, data), Op::FlatGather(a, idx))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    /// Mean over the batch of `-log(clamp(softmax(logits)[label]))`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], eps: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.rows(), labels.len(), "one label per logit row");
        let mut probs = Mat::zeros(vl.rows(), vl.cols());
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let p = crate::tensor::softmax(vl.row(r));
            loss -= p[y].clamp(eps, 1.0 - eps).ln();
            probs.row_mut(r).copy_from_slice(&p);
        }
        loss /= labels.len() as f64;
        self.push(
            Mat::filled(1, 1, loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                eps,
            },
        )
    }

    /// Class-weighted binary cross-entropy on sigmoid probabilities.
    pub fn weighted_bce(&mut self, logits: Var, targets: &Mat, weights: &[f64], eps: f64) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "targets shape");
        assert_eq!(weights.len(), vl.cols(), "one weight per attribute");
        let probs = vl.map(sigmoid);
        let loss = crate::training::loss::weighted_cross_entropy_unchecked(
            targets, &probs, weights, eps,
        );
        self.push(
            Mat::filled(1, 1, loss),
            Op::WeightedBce {
                logits,
                targets: targets.clone(),
                weights: weights.to_vec(),
                probs,
                eps,
            },
        )
    }

    /// Adjoints of every node with respect to the scalar `output`.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate_adjoint(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate_adjoint(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, d: Mat| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(self.value(*b)));
                acc(*b, self.value(*a).matmul_tn(g));
            }
            Op::MatMulNt(a, b) => {
                acc(*a, g.matmul(self.value(*b)));
                acc(*b, g.matmul_tn(self.value(*a)));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, bias) => {
                acc(*a, g.clone());
                let mut db = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                acc(*bias, db);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let db = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                acc(*a, Mat::from_vec(g.rows(), g.cols(), da));
                acc(*b, Mat::from_vec(g.rows(), g.cols(), db));
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| x * c)),
            Op::Relu(a) => {
                let va = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                    .collect();
                acc(*a, Mat::from_vec(g.rows(), g.cols(), d));
            }
            Op::RowSoftmax(a) => {
                let mut d = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row(r);
                    let gy = g.row(r);
                    let inner = crate::tensor::dot(y, gy);
                    for c in 0..g.cols() {
                        d[(r, c)] = y[c] * (gy[c] - inner);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain);
                let n = g.cols();
                let mut dg = Mat::zeros(1, n);
                let mut db = Mat::zeros(1, n);
                let mut dx = Mat::zeros(g.rows(), n);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let xh = normed.row(r);
                    let mut dxh = vec![0.0; n];
                    for c in 0..n {
                        dg.data_mut()[c] += gr[c] * xh[c];
                        db.data_mut()[c] += gr[c];
                        dxh[c] = gr[c] * gv.data()[c];
                    }
                    let mean_d = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dx = crate::tensor::dot(&dxh, xh) / n as f64;
                    for c in 0..n {
                        dx[(r, c)] = inv_std[r] * (dxh[c] - mean_d - xh[c] * mean_dx);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::RowScale(a, w) => {
                let (va, vw) = (self.value(*a), self.value(*w));
                let mut da = g.clone();
                let mut dw = Mat::zeros(vw.rows(), 1);
                for r in 0..g.rows() {
                    let s = vw.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    dw.data_mut()[r] = crate::tensor::dot(g.row(r), va.row(r));
                }
                acc(*a, da);
                acc(*w, dw);
            }
            Op::RowMix(a, mix) => {
                let va = self.value(*a);
                let mut d = Mat::zeros(va.rows(), va.cols());
                for (i, terms) in mix.iter().enumerate() {
                    let gi = g.row(i);
                    for &(j, c) in terms {
                        for (o, x) in d.row_mut(j).iter_mut().zip(gi) {
                            *o += c * x;
                        }
                    }
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols();
                    let mut d = Mat::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    off += cols;
                    acc(*p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    let d = g.data()[off * cols..(off + rows) * cols].to_vec();
                    off += rows;
                    acc(*p, Mat::from_vec(rows, cols, d));
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let mut d = Mat::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::HeadwiseDot(a, b, heads) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let dh = va.cols() / heads;
                let mut da = Mat::zeros(va.rows(), va.cols());
                let mut db = Mat::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    for c in 0..va.cols() {
                        let gh = g[(r, c / dh)];
                        da[(r, c)] = gh * vb[(r, c)];
                        db[(r, c)] = gh * va[(r, c)];
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SegmentSoftmax(a, segments) => {
                let mut d = Mat::zeros(g.rows(), g.cols());
                for seg in segments {
                    for c in 0..g.cols() {
                        let inner: f64 = seg.iter().map(|&r| out[(r, c)] * g[(r, c)]).sum();
                        for &r in seg {
                            d[(r, c)] = out[(r, c)] * (g[(r, c)] - inner);
                        }
                    }
                }
                acc(*a, d);
            }
            Op::MeanCols(a) => {
                let va = self.value(*a);
                let n = va.cols() as f64;
                let mut d = Mat::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let s = g.data()[r] / n;
                    d.row_mut(r).iter_mut().for_each(|x| *x = s);
                }
                acc(*a, d);
            }
            Op::FlatGather(a, idx) => {
                let va = self.value(*a);
                let mut d = Mat::zeros(va.rows(), va.cols());
                for (m, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        d.data_mut()[*i] += g.data()[m];
                    }
                }
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let (rows, cols) = self.value(*a).shape();
                acc(*a, g.clone().reshaped(rows, cols));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                eps,
            } => {
                let scale = g.data()[0] / labels.len() as f64;
                let mut d = Mat::zeros(probs.rows(), probs.cols());
                for (r, &y) in labels.iter().enumerate() {
                    let py = probs[(r, y)];
                    if py < *eps || py > 1.0 - eps {
                        continue;
                    }
                    for c in 0..probs.cols() {
                        let onehot = if c == y { 1.0 } else { 0.0 };
                        d[(r, c)] = scale * (probs[(r, c)] - onehot);
                    }
                }
                acc(*logits, d);
            }
            Op::WeightedBce {
                logits,
                targets,
                weights,
                probs,
                eps,
            } => {
                let scale = g.data()[0] / probs.rows() as f64;
                let mut d = Mat::zeros(probs.rows(), probs.cols());
                for r in 0..probs.rows() {
                    for c in 0..probs.cols() {
                        let p = probs[(r, c)];
                        if p < *eps || p > 1.0 - eps {
                            continue;
                        }
                        d[(r, c)] = scale * weights[c] * (p - targets[(r, c)]);
                    }
                }
                acc(*logits, d);
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Adjoint of `v`, zero-filled when `v` does not reach the output.
    pub fn get(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}
