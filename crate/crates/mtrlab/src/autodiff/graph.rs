//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] records every forward operation as a node; [`Graph::backward`]
//! sweeps the tape in reverse and accumulates gradients for every parameter
//! leaf. Operations are intentionally matrix-shaped (2-D only): higher-rank
//! arrays are handled by flattening plus the grouped/segmented ops below,
//! which keeps every adjoint small enough to verify by hand.

use super::mat::{mat_mul, mat_mul_nt, mat_mul_tn, Mat};
use std::rc::Rc;

/// Handle to a parameter slot in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat registry of named trainable parameters.
///
/// Model structs hold `ParamId`s only; the store owns the values. This keeps
/// optimizers, checkpoints, and finite-difference probes trivially flat.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (ParamId(i), self.names[i].as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Read one scalar by flat coordinate (param-major, then row-major).
    pub fn flat_get(&self, flat: usize) -> f64 {
        let (p, off) = self.locate(flat);
        self.values[p].as_slice()[off]
    }

    /// Write one scalar by flat coordinate.
    pub fn flat_set(&mut self, flat: usize, v: f64) {
        let (p, off) = self.locate(flat);
        self.values[p].as_mut_slice()[off] = v;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, m) in self.values.iter().enumerate() {
            if flat < m.len() {
                return (i, flat);
            }
            flat -= m.len();
        }
        panic!("flat parameter index out of range");
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by a backward sweep.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    fn new(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    fn accumulate(&mut self, id: ParamId, g: &Mat) {
        match &mut self.grads[id.0] {
            Some(existing) => existing.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads[id.0].as_ref()
    }

    /// Merge another gradient set into this one (used for batch accumulation).
    pub fn merge(&mut self, other: &Grads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(c);
        }
    }

    /// Flat scalar read aligned with [`ParamStore`] flat coordinates.
    pub fn flat_get(&self, store: &ParamStore, mut flat: usize) -> f64 {
        for (i, m) in store.values.iter().enumerate() {
            if flat < m.len() {
                return self.grads[i]
                    .as_ref()
                    .map(|g| g.as_slice()[flat])
                    .unwrap_or(0.0);
            }
            flat -= m.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .fold(0.0, |m, g| m.max(g.max_abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Mat::all_finite)
    }
}

/// Node handle on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Relu(Var),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Tanh(Var),
    Ln(Var),
    Abs(Var),
    Neg(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    RowLogSumExp(Var),
    SumAll(Var),
    RowSum(Var),
    ScaleRows(Var, Var),
    RepeatRows(Var, usize),
    GroupSumRows(Var, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    MaskedMaxPool {
        x: Var,
        argmax: Vec<i64>,
    },
}

/// Forward tape. One graph per forward pass; parameters live in the
/// surrounding [`ParamStore`].
pub struct Graph<'a> {
    store: &'a ParamStore,
    values: Vec<Mat>,
    ops: Vec<Op>,
    param_vars: Vec<Option<Var>>,
    qk_pairs: u64,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            values: Vec::new(),
            ops: Vec::new(),
            param_vars: vec![None; store.len()],
            qk_pairs: 0,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.values[v.0].shape()
    }

    /// Count of attention query-key pairs evaluated so far (see encoder docs).
    pub fn qk_pairs(&self) -> u64 {
        self.qk_pairs
    }

    pub fn add_qk_pairs(&mut self, n: u64) {
        self.qk_pairs += n;
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.value(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let m = self.values[a.0].zip_map(&self.values[b.0], |x, y| x + y);
        self.push(m, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let m = self.values[a.0].zip_map(&self.values[b.0], |x, y| x - y);
        self.push(m, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let m = self.values[a.0].zip_map(&self.values[b.0], |x, y| x * y);
        self.push(m, Op::Mul(a, b))
    }

    /// `a` is `[m, n]`, `bias` is `[1, n]`; adds the bias to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(bias), (1, cols), "bias shape mismatch");
        let bias_row = self.values[bias.0].as_slice().to_vec();
        let mut out = self.values[a.0].clone();
        for r in 0..rows {
            for (o, bv) in out.row_mut(r).iter_mut().zip(&bias_row) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let m = self.values[a.0].map(|x| x * c);
        self.push(m, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let m = self.values[a.0].map(|x| x + c);
        self.push(m, Op::AddConst(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let m = mat_mul(&self.values[a.0], &self.values[b.0]);
        self.push(m, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let m = mat_mul_nt(&self.values[a.0], &self.values[b.0]);
        self.push(m, Op::MatMulNT(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(|x| x.max(0.0));
        self.push(m, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(f64::exp);
        self.push(m, Op::Exp(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(f64::sin);
        self.push(m, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(f64::cos);
        self.push(m, Op::Cos(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(f64::tanh);
        self.push(m, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(f64::ln);
        self.push(m, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(f64::abs);
        self.push(m, Op::Abs(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let m = self.values[a.0].map(|x| -x);
        self.push(m, Op::Neg(a))
    }

    /// Hard clamp; gradient passes through inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let m = self.values[a.0].map(|x| x.clamp(lo, hi));
        self.push(m, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in out.row_mut(r) {
                *o /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Per-row `log(sum(exp(x)))`, shape `[m, 1]`.
    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = Mat::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            out.set(r, 0, mx + s.ln());
        }
        self.push(out, Op::RowLogSumExp(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.values[a.0].as_slice().iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = &self.values[a.0];
        let mut out = Mat::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            out.set(r, 0, x.row(r).iter().sum());
        }
        self.push(out, Op::RowSum(a))
    }

    /// Multiply each row of `a` `[m, n]` by the scalar in `s` `[m, 1]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let x = &self.values[a.0];
        let sc = &self.values[s.0];
        assert_eq!(sc.shape(), (x.rows(), 1));
        let mut out = x.clone();
        for r in 0..x.rows() {
            let f = sc.get(r, 0);
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        self.push(out, Op::ScaleRows(a, s))
    }

    /// Repeat each row `k` times consecutively: `[m, n]` -> `[m*k, n]`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let x = &self.values[a.0];
        let mut out = Mat::zeros(x.rows() * k, x.cols());
        for r in 0..x.rows() {
            for i in 0..k {
                out.row_mut(r * k + i).copy_from_slice(x.row(r));
            }
        }
        self.push(out, Op::RepeatRows(a, k))
    }

    /// Sum consecutive groups of `k` rows: `[m*k, n]` -> `[m, n]`.
    pub fn group_sum_rows(&mut self, a: Var, k: usize) -> Var {
        let x = &self.values[a.0];
        assert_eq!(x.rows() % k, 0);
        let m = x.rows() / k;
        let mut out = Mat::zeros(m, x.cols());
        for r in 0..m {
            for i in 0..k {
                let src = x.row(r * k + i);
                for (o, &v) in out.row_mut(r).iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        self.push(out, Op::GroupSumRows(a, k))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let x = &self.values[a.0];
        let mut out = Mat::zeros(idx.len(), x.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Place row `i` of `a` at row `idx[i]` of a zero `[out_rows, n]` matrix.
    /// Indices must be unique.
    pub fn scatter_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, out_rows: usize) -> Var {
        let x = &self.values[a.0];
        assert_eq!(x.rows(), idx.len());
        let mut out = Mat::zeros(out_rows, x.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(r));
        }
        self.push(out, Op::ScatterRows(a, idx))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(xa.cols(), xb.cols());
        let mut data = xa.as_slice().to_vec();
        data.extend_from_slice(xb.as_slice());
        let m = Mat::from_vec(xa.rows() + xb.rows(), xa.cols(), data);
        self.push(m, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (xa, xb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(xa.rows(), xb.rows());
        let mut out = Mat::zeros(xa.rows(), xa.cols() + xb.cols());
        for r in 0..xa.rows() {
            out.row_mut(r)[..xa.cols()].copy_from_slice(xa.row(r));
            out.row_mut(r)[xa.cols()..].copy_from_slice(xb.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = &self.values[a.0];
        assert!(start <= end && end <= x.rows());
        let mut out = Mat::zeros(end - start, x.cols());
        for r in start..end {
            out.row_mut(r - start).copy_from_slice(x.row(r));
        }
        self.push(out, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = &self.values[a.0];
        assert!(start <= end && end <= x.cols());
        let mut out = Mat::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(a, start, end))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let m = self.values[a.0].reshaped(rows, cols);
        self.push(m, Op::Reshape(a))
    }

    /// Row-wise layer normalization with learnable affine `[1, n]` pairs.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = &self.values[x.0];
        let (rows, cols) = xv.shape();
        assert_eq!(self.values[gamma.0].shape(), (1, cols));
        assert_eq!(self.values[beta.0].shape(), (1, cols));
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                let xhat = (row[c] - mean) * inv;
                out.set(
                    r,
                    c,
                    xhat * self.values[gamma.0].get(0, c) + self.values[beta.0].get(0, c),
                );
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Masked max over consecutive groups of `group` rows:
    /// `[p*group, n]` -> `[p, n]`. Rows whose mask entry is false are ignored;
    /// groups with no valid row produce zeros.
    pub fn masked_max_pool(&mut self, x: Var, group: usize, mask: &[bool]) -> Var {
        let xv = &self.values[x.0];
        assert_eq!(xv.rows() % group, 0);
        assert_eq!(mask.len(), xv.rows());
        let p = xv.rows() / group;
        let n = xv.cols();
        let mut out = Mat::zeros(p, n);
        let mut argmax = vec![-1i64; p * n];
        for g in 0..p {
            for c in 0..n {
                let mut best = f64::NEG_INFINITY;
                let mut best_r = -1i64;
                for i in 0..group {
                    let r = g * group + i;
                    if mask[r] && xv.get(r, c) > best {
                        best = xv.get(r, c);
                        best_r = r as i64;
                    }
                }
                if best_r >= 0 {
                    out.set(g, c, best);
                    argmax[g * n + c] = best_r;
                }
            }
        }
        self.push(out, Op::MaskedMaxPool { x, argmax })
    }

    /// Mean of all entries as a `[1,1]` scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar loss node; returns parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Grads::new(self.store.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Param(pid) => out.accumulate(*pid, &g),
                Op::Add(a, b) => {
                    acc(&mut grads, a.0, &g);
                    acc(&mut grads, b.0, &g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a.0, &g);
                    let ng = g.map(|v| -v);
                    acc(&mut grads, b.0, &ng);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.values[b.0], |gv, bv| gv * bv);
                    let gb = g.zip_map(&self.values[a.0], |gv, av| gv * av);
                    acc(&mut grads, a.0, &ga);
                    acc(&mut grads, b.0, &gb);
                }
                Op::AddRow(a, bias) => {
                    acc(&mut grads, a.0, &g);
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, bias.0, &gb);
                }
                Op::Scale(a, c) => {
                    let ga = g.map(|v| v * c);
                    acc(&mut grads, a.0, &ga);
                }
                Op::AddConst(a) => acc(&mut grads, a.0, &g),
                Op::MatMul(a, b) => {
                    let ga = mat_mul_nt(&g, &self.values[b.0]);
                    let gb = mat_mul_tn(&self.values[a.0], &g);
                    acc(&mut grads, a.0, &ga);
                    acc(&mut grads, b.0, &gb);
                }
                Op::MatMulNT(a, b) => {
                    let ga = mat_mul(&g, &self.values[b.0]);
                    let gb = mat_mul_tn(&g, &self.values[a.0]);
                    acc(&mut grads, a.0, &ga);
                    acc(&mut grads, b.0, &gb);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(&self.values[a.0], |gv, av| if av > 0.0 { gv } else { 0.0 });
                    acc(&mut grads, a.0, &ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&self.values[i], |gv, yv| gv * yv);
                    acc(&mut grads, a.0, &ga);
                }
                Op::Sin(a) => {
                    let ga = g.zip_map(&self.values[a.0], |gv, av| gv * av.cos());
                    acc(&mut grads, a.0, &ga);
                }
                Op::Cos(a) => {
                    let ga = g.zip_map(&self.values[a.0], |gv, av| -gv * av.sin());
                    acc(&mut grads, a.0, &ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&self.values[i], |gv, yv| gv * (1.0 - yv * yv));
                    acc(&mut grads, a.0, &ga);
                }
                Op::Ln(a) => {
                    let ga = g.zip_map(&self.values[a.0], |gv, av| gv / av);
                    acc(&mut grads, a.0, &ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(&self.values[a.0], |gv, av| gv * av.signum() * if av == 0.0 { 0.0 } else { 1.0 });
                    acc(&mut grads, a.0, &ga);
                }
                Op::Neg(a) => {
                    let ga = g.map(|v| -v);
                    acc(&mut grads, a.0, &ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(&self.values[a.0], |gv, av| {
                        if av >= *lo && av <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, a.0, &ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.values[i];
                    let mut ga = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(&gv, &yv)| gv * yv).sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, (g.get(r, c) - dot) * y.get(r, c));
                        }
                    }
                    acc(&mut grads, a.0, &ga);
                }
                Op::RowLogSumExp(a) => {
                    let x = &self.values[a.0];
                    let mut ga = Mat::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                        let gr = g.get(r, 0);
                        for c in 0..x.cols() {
                            ga.set(r, c, gr * (row[c] - mx).exp() / sum);
                        }
                    }
                    acc(&mut grads, a.0, &ga);
                }
                Op::SumAll(a) => {
                    let shape = self.values[a.0].shape();
                    let ga = Mat::from_fn(shape.0, shape.1, |_, _| g.item());
                    acc(&mut grads, a.0, &ga);
                }
                Op::RowSum(a) => {
                    let shape = self.values[a.0].shape();
                    let ga = Mat::from_fn(shape.0, shape.1, |r, _| g.get(r, 0));
                    acc(&mut grads, a.0, &ga);
                }
                Op::ScaleRows(a, s) => {
                    let x = &self.values[a.0];
                    let sc = &self.values[s.0];
                    let ga = Mat::from_fn(x.rows(), x.cols(), |r, c| g.get(r, c) * sc.get(r, 0));
                    let mut gs = Mat::zeros(x.rows(), 1);
                    for r in 0..x.rows() {
                        let dot: f64 = g.row(r).iter().zip(x.row(r)).map(|(&gv, &xv)| gv * xv).sum();
                        gs.set(r, 0, dot);
                    }
                    acc(&mut grads, a.0, &ga);
                    acc(&mut grads, s.0, &gs);
                }
                Op::RepeatRows(a, k) => {
                    let m = self.values[a.0].rows();
                    let mut ga = Mat::zeros(m, g.cols());
                    for r in 0..m {
                        for rep in 0..*k {
                            let src = g.row(r * k + rep);
                            for (o, &v) in ga.row_mut(r).iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                    }
                    acc(&mut grads, a.0, &ga);
                }
                Op::GroupSumRows(a, k) => {
                    let rows = self.values[a.0].rows();
                    let ga = Mat::from_fn(rows, g.cols(), |r, c| g.get(r / k, c));
                    acc(&mut grads, a.0, &ga);
                }
                Op::GatherRows(a, idx) => {
                    let src = &self.values[a.0];
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for (r, &i_src) in idx.iter().enumerate() {
                        for (o, &v) in ga.row_mut(i_src).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, a.0, &ga);
                }
                Op::ScatterRows(a, idx) => {
                    let src = &self.values[a.0];
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for (r, &i_dst) in idx.iter().enumerate() {
                        ga.row_mut(r).copy_from_slice(g.row(i_dst));
                    }
                    acc(&mut grads, a.0, &ga);
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.values[a.0].rows();
                    let mut ga = Mat::zeros(ra, g.cols());
                    let mut gb = Mat::zeros(g.rows() - ra, g.cols());
                    for r in 0..ra {
                        ga.row_mut(r).copy_from_slice(g.row(r));
                    }
                    for r in ra..g.rows() {
                        gb.row_mut(r - ra).copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, a.0, &ga);
                    acc(&mut grads, b.0, &gb);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.values[a.0].cols();
                    let mut ga = Mat::zeros(g.rows(), ca);
                    let mut gb = Mat::zeros(g.rows(), g.cols() - ca);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(&mut grads, a.0, &ga);
                    acc(&mut grads, b.0, &gb);
                }
                Op::SliceRows(a, start, _end) => {
                    let src = &self.values[a.0];
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, a.0, &ga);
                }
                Op::SliceCols(a, start, _end) => {
                    let src = &self.values[a.0];
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, a.0, &ga);
                }
                Op::Reshape(a) => {
                    let shape = self.values[a.0].shape();
                    let ga = g.reshaped(shape.0, shape.1);
                    acc(&mut grads, a.0, &ga);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xv = &self.values[x.0];
                    let gv = &self.values[gamma.0];
                    let (rows, cols) = xv.shape();
                    let n = cols as f64;
                    let mut gx = Mat::zeros(rows, cols);
                    let mut ggamma = Mat::zeros(1, cols);
                    let mut gbeta = Mat::zeros(1, cols);
                    for r in 0..rows {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let gy: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv.get(0, c)).collect();
                        let mean_gy = gy.iter().sum::<f64>() / n;
                        let mean_gyx = gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for c in 0..cols {
                            gx.set(r, c, (gy[c] - mean_gy - xhat[c] * mean_gyx) * inv);
                            ggamma.set(0, c, ggamma.get(0, c) + g.get(r, c) * xhat[c]);
                            gbeta.set(0, c, gbeta.get(0, c) + g.get(r, c));
                        }
                    }
                    acc(&mut grads, x.0, &gx);
                    acc(&mut grads, gamma.0, &ggamma);
                    acc(&mut grads, beta.0, &gbeta);
                }
                Op::MaskedMaxPool { x, argmax } => {
                    let src = &self.values[x.0];
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    let n = g.cols();
                    for p in 0..g.rows() {
                        for c in 0..n {
                            let am = argmax[p * n + c];
                            if am >= 0 {
                                let r = am as usize;
                                ga.set(r, c, ga.get(r, c) + g.get(p, c));
                            }
                        }
                    }
                    acc(&mut grads, x.0, &ga);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], i: usize, g: &Mat) {
    match &mut grads[i] {
        Some(existing) => existing.add_assign(g),
        slot => *slot = Some(g.clone()),
    }
}
