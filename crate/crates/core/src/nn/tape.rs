//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters enter the tape
//! through [`Tape::param`]; [`Tape::backward`] accumulates their gradients into
//! the owning [`ParamStore`]. Shape violations inside a tape are programming
//! errors and panic with both shapes; public entry points validate inputs first.

use super::{Matrix, ParamId, ParamStore, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    Mask(Var, Matrix),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    FeatureEmbed { x: Var, w: Var, b: Var },
    WeightedCombine { weights: Var, emb: Var },
    Attention(Box<AttentionCache>),
    Mean(Var),
    HalfSumSq(Var),
    Pinball { pred: Var, target: Matrix, quantiles: Vec<f64> },
    Mse { pred: Var, target: Matrix },
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    batch: usize,
    steps: usize,
    scale: f64,
    weights: Matrix,
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter node; repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_vars.len() <= id.0 {
            self.param_vars.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::MatMul(a, b))
    }

    /// `x [n×m] + bias [1×m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert!(
            bv.rows() == 1 && bv.cols() == xv.cols(),
            "add_bias: {:?} vs {:?}",
            xv.shape(),
            bv.shape()
        );
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    /// `x·W + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }

    fn assert_same(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "add");
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "sub");
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.assert_same(a, b, "mul");
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 - x);
        self.push(out, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_row_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Inverted dropout. Identity (same node) when not training or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, training: bool, rng: &mut RngStream) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0,1)");
        if !training || p == 0.0 {
            return a;
        }
        let (r, c) = self.shape(a);
        let keep = 1.0 / (1.0 - p);
        let mut mask = Matrix::zeros(r, c);
        for m in mask.data_mut() {
            *m = if rng.uniform() < p { 0.0 } else { keep };
        }
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push(out, Op::Mask(a, mask))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols: row mismatch");
                out.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows: col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let out = Matrix::from_vec(rows, cols, data).expect("concat_rows");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let c = av.cols();
        let out = Matrix::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec())
            .expect("slice_rows");
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row lookup, e.g. an embedding table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros(idx.len(), tv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(i));
        }
        self.push(out, Op::GatherRows(table, idx.to_vec()))
    }

    /// One column per row: `out[i] = a[i][cols[i]]`, shape `[n×1]`.
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), cols.len(), "pick_cols: one index per row");
        let data = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let out = Matrix::from_vec(cols.len(), 1, data).expect("pick_cols");
        self.push(out, Op::PickCols(a, cols.to_vec()))
    }

    /// Per-feature scalar embedding: `x [B×n]`, `w, b [n×h]` → `[B × n·h]`
    /// with `out[r][i·h + k] = x[r][i]·w[i][k] + b[i][k]`.
    pub fn feature_embed(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(wv.shape(), bv.shape(), "feature_embed: w/b shapes");
        assert_eq!(xv.cols(), wv.rows(), "feature_embed: {:?} vs {:?}", xv.shape(), wv.shape());
        let (n, h) = wv.shape();
        let mut out = Matrix::zeros(xv.rows(), n * h);
        for r in 0..xv.rows() {
            let orow = out.row_mut(r);
            for i in 0..n {
                let xi = xv.get(r, i);
                for k in 0..h {
                    orow[i * h + k] = xi * wv.get(i, k) + bv.get(i, k);
                }
            }
        }
        self.push(out, Op::FeatureEmbed { x, w, b })
    }

    /// `weights [B×n]`, `emb [B × n·h]` → `[B×h]`, `out[r] = Σᵢ weights[r][i]·emb[r][i]`.
    pub fn weighted_combine(&mut self, weights: Var, emb: Var) -> Var {
        let (wv, ev) = (self.value(weights), self.value(emb));
        let n = wv.cols();
        assert_eq!(wv.rows(), ev.rows(), "weighted_combine: rows");
        assert_eq!(ev.cols() % n, 0, "weighted_combine: {:?} vs {:?}", wv.shape(), ev.shape());
        let h = ev.cols() / n;
        let mut out = Matrix::zeros(wv.rows(), h);
        for r in 0..wv.rows() {
            let erow = ev.row(r);
            let wrow = wv.row(r);
            let orow = out.row_mut(r);
            for i in 0..n {
                for k in 0..h {
                    orow[k] += wrow[i] * erow[i * h + k];
                }
            }
        }
        self.push(out, Op::WeightedCombine { weights, emb })
    }

    /// Scaled dot-product attention over `batch` sequences of `steps` positions.
    ///
    /// Rows are time-major: row `t·batch + b` belongs to sequence `b` at step `t`.
    /// Returns the output node; the `[steps·batch × steps]` weights (same row layout)
    /// are available through [`Tape::attention_weights`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, steps: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.shape(), kv.shape(), "attention: Q vs K");
        assert_eq!(qv.rows(), batch * steps, "attention: rows != batch*steps");
        assert_eq!(vv.rows(), batch * steps, "attention: V rows");
        let d_k = qv.cols();
        assert!(d_k > 0, "attention: d_k = 0");
        let scale = 1.0 / (d_k as f64).sqrt();
        let dv = vv.cols();
        let mut weights = Matrix::zeros(batch * steps, steps);
        let mut out = Matrix::zeros(batch * steps, dv);
        let mut scores = vec![0.0; steps];
        for b in 0..batch {
            for i in 0..steps {
                let qi = qv.row(i * batch + b);
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = if causal && j > i {
                        f64::NEG_INFINITY
                    } else {
                        let kj = kv.row(j * batch + b);
                        qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale
                    };
                }
                softmax_row_in_place(&mut scores);
                weights.row_mut(i * batch + b).copy_from_slice(&scores);
                let orow = out.row_mut(i * batch + b);
                for (j, &a) in scores.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    for (o, x) in orow.iter_mut().zip(vv.row(j * batch + b)) {
                        *o += a * x;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionCache {
                q,
                k,
                v,
                batch,
                steps,
                scale,
                weights,
            })),
        )
    }

    pub fn attention_weights(&self, node: Var) -> Option<&Matrix> {
        match &self.nodes[node.0].op {
            Op::Attention(cache) => Some(&cache.weights),
            _ => None,
        }
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.sum() / av.len() as f64;
        self.push(Matrix::filled(1, 1, m), Op::Mean(a))
    }

    /// `½‖a‖²`.
    pub fn half_sum_sq(&mut self, a: Var) -> Var {
        let s = 0.5 * self.value(a).sum_sq();
        self.push(Matrix::filled(1, 1, s), Op::HalfSumSq(a))
    }

    /// Mean pinball loss over rows and quantile columns: `pred [N×Q]`, `target [N×1]`.
    pub fn pinball_loss(&mut self, pred: Var, target: Matrix, quantiles: &[f64]) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.cols(), quantiles.len(), "pinball: one column per quantile");
        assert_eq!(target.shape(), (pv.rows(), 1), "pinball: target shape");
        let mut total = 0.0;
        for r in 0..pv.rows() {
            let y = target.get(r, 0);
            for (c, &tau) in quantiles.iter().enumerate() {
                total += pinball(y, pv.get(r, c), tau);
            }
        }
        let loss = total / pv.len() as f64;
        self.push(
            Matrix::filled(1, 1, loss),
            Op::Pinball {
                pred,
                target,
                quantiles: quantiles.to_vec(),
            },
        )
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse_loss(&mut self, pred: Var, target: Matrix) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse: {:?} vs {:?}", pv.shape(), target.shape());
        let loss = pv.zip_map(&target, |p, t| (p - t) * (p - t)).sum() / pv.len() as f64;
        self.push(Matrix::filled(1, 1, loss), Op::Mse { pred, target })
    }

    /// Backpropagates from a scalar node, adding parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) {
        assert_eq!(self.shape(loss), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, g, &mut grads, store);
        }
    }

    fn backprop_node(&self, idx: usize, g: Matrix, grads: &mut [Option<Matrix>], store: &mut ParamStore) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.get_mut(*id).grad.add_assign(&g),
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(self.value(*b)).expect("matmul grad");
                let gb = self.value(*a).t_matmul(&g).expect("matmul grad");
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                let mut gb = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *b, gb);
                accumulate(grads, *x, g);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, g.map(|x| -x));
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |x, y| x * y);
                let gb = g.zip_map(self.value(*a), |x, y| x * y);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s)),
            Op::OneMinus(a) => accumulate(grads, *a, g.map(|x| -x)),
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = g.zip_map(&node.value, |x, t| x * (1.0 - t * t));
                accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let s = &node.value;
                let mut ga = Matrix::zeros(s.rows(), s.cols());
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row(r), g.row(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for (o, (sv, gv)) in ga.row_mut(r).iter_mut().zip(sr.iter().zip(gr)) {
                        *o = sv * (gv - dot);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Mask(a, mask) => accumulate(grads, *a, g.zip_map(mask, |x, m| x * m)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    let mut gp = Matrix::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    accumulate(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let c = g.cols();
                for &p in parts {
                    let r = self.shape(p).0;
                    let gp = Matrix::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec())
                        .expect("concat_rows grad");
                    offset += r;
                    accumulate(grads, p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(table, idx) => {
                let (r, c) = self.shape(*table);
                let mut gt = Matrix::zeros(r, c);
                for (row, &i) in idx.iter().enumerate() {
                    for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(row)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::PickCols(a, cols) => {
                let (r, c) = self.shape(*a);
                let mut ga = Matrix::zeros(r, c);
                for (row, &col) in cols.iter().enumerate() {
                    ga.set(row, col, g.get(row, 0));
                }
                accumulate(grads, *a, ga);
            }
            Op::FeatureEmbed { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, h) = wv.shape();
                let mut gx = Matrix::zeros(xv.rows(), n);
                let mut gw = Matrix::zeros(n, h);
                let mut gb = Matrix::zeros(n, h);
                for r in 0..xv.rows() {
                    let grow = g.row(r);
                    for i in 0..n {
                        let xi = xv.get(r, i);
                        let mut acc = 0.0;
                        for k in 0..h {
                            let gv = grow[i * h + k];
                            acc += gv * wv.get(i, k);
                            gw.data_mut()[i * h + k] += gv * xi;
                            gb.data_mut()[i * h + k] += gv;
                        }
                        gx.set(r, i, acc);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *w, gw);
                accumulate(grads, *b, gb);
            }
            Op::WeightedCombine { weights, emb } => {
                let (wv, ev) = (self.value(*weights), self.value(*emb));
                let n = wv.cols();
                let h = ev.cols() / n;
                let mut gw = Matrix::zeros(wv.rows(), n);
                let mut ge = Matrix::zeros(ev.rows(), ev.cols());
                for r in 0..wv.rows() {
                    let grow = g.row(r);
                    for i in 0..n {
                        let wi = wv.get(r, i);
                        let mut acc = 0.0;
                        for k in 0..h {
                            acc += grow[k] * ev.get(r, i * h + k);
                            ge.set(r, i * h + k, grow[k] * wi);
                        }
                        gw.set(r, i, acc);
                    }
                }
                accumulate(grads, *weights, gw);
                accumulate(grads, *emb, ge);
            }
            Op::Attention(cache) => self.backprop_attention(cache, &g, grads),
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let v = g.get(0, 0) / (r * c) as f64;
                accumulate(grads, *a, Matrix::filled(r, c, v));
            }
            Op::HalfSumSq(a) => {
                let s = g.get(0, 0);
                accumulate(grads, *a, self.value(*a).map(|x| x * s));
            }
            Op::Pinball {
                pred,
                target,
                quantiles,
            } => {
                let pv = self.value(*pred);
                let scale = g.get(0, 0) / pv.len() as f64;
                let mut gp = Matrix::zeros(pv.rows(), pv.cols());
                for r in 0..pv.rows() {
                    let y = target.get(r, 0);
                    for (c, &tau) in quantiles.iter().enumerate() {
                        let p = pv.get(r, c);
                        // Subgradient at y == p taken as 0.
                        let d = if y > p {
                            -tau
                        } else if y < p {
                            1.0 - tau
                        } else {
                            0.0
                        };
                        gp.set(r, c, d * scale);
                    }
                }
                accumulate(grads, *pred, gp);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let s = 2.0 * g.get(0, 0) / pv.len() as f64;
                accumulate(grads, *pred, pv.zip_map(target, |p, t| s * (p - t)));
            }
        }
    }

    fn backprop_attention(&self, c: &AttentionCache, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (batch, steps) = (c.batch, c.steps);
        let mut gq = Matrix::zeros(qv.rows(), qv.cols());
        let mut gk = Matrix::zeros(kv.rows(), kv.cols());
        let mut gv = Matrix::zeros(vv.rows(), vv.cols());
        let mut d_a = vec![0.0; steps];
        for b in 0..batch {
            for i in 0..steps {
                let ri = i * batch + b;
                let a_row = c.weights.row(ri);
                let g_row = g.row(ri);
                for j in 0..steps {
                    let rj = j * batch + b;
                    d_a[j] = g_row.iter().zip(vv.row(rj)).map(|(x, y)| x * y).sum();
                    let aij = a_row[j];
                    if aij != 0.0 {
                        for (o, x) in gv.row_mut(rj).iter_mut().zip(g_row) {
                            *o += aij * x;
                        }
                    }
                }
                let dot: f64 = a_row.iter().zip(&d_a).map(|(x, y)| x * y).sum();
                for j in 0..steps {
                    let ds = a_row[j] * (d_a[j] - dot) * c.scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = j * batch + b;
                    for (o, x) in gq.row_mut(ri).iter_mut().zip(kv.row(rj)) {
                        *o += ds * x;
                    }
                    for (o, x) in gk.row_mut(rj).iter_mut().zip(qv.row(ri)) {
                        *o += ds * x;
                    }
                }
            }
        }
        accumulate(grads, c.q, gq);
        accumulate(grads, c.k, gk);
        accumulate(grads, c.v, gv);
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Pinball loss `max(τ(y − ŷ), (1 − τ)(ŷ − y))`.
#[inline]
pub fn pinball(y: f64, y_hat: f64, tau: f64) -> f64 {
    (tau * (y - y_hat)).max((1.0 - tau) * (y_hat - y))
}
