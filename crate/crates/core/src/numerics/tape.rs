//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and whatever the backward rule needs. [`Tape::backward`] walks the
//! nodes in reverse and returns one gradient per node.

use std::collections::HashMap;
use std::sync::Arc;

use super::matrix::gemm;
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A contiguous run of rows belonging to one sequence, with a per-row mask
/// (`true` = attended, `false` = padding).
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub mask: Vec<bool>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn attended(&self) -> impl Iterator<Item = usize> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(move |(i, _)| self.start + i)
    }

    pub fn num_attended(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Backward rules that can be deliberately corrupted, for negative-control
/// tests of the gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    Gelu,
    LayerNorm,
    Attention,
    MaxSim,
    CrossEntropy,
}

impl std::str::FromStr for BackwardFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "gelu" => BackwardFault::Gelu,
            "layer-norm" | "layer_norm" => BackwardFault::LayerNorm,
            "attention" => BackwardFault::Attention,
            "maxsim" => BackwardFault::MaxSim,
            "cross-entropy" | "cross_entropy" => BackwardFault::CrossEntropy,
            other => return Err(format!("unknown backward rule {other:?}")),
        })
    }
}

const FAULT_FACTOR: f64 = 1.05;

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    MergeRows {
        a: Var,
        b: Var,
        from_a: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Arc<[Segment]>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    MaxSim {
        left: Var,
        right: Var,
        left_segs: Arc<[Segment]>,
        right_segs: Arc<[Segment]>,
        argmax: Vec<Vec<(usize, usize)>>,
    },
    Sum(Var),
    DotConst(Var, Matrix),
    AddScalars(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation for later differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    record: bool,
    fault: Option<BackwardFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            record: true,
            fault: None,
        }
    }

    /// A tape that computes values only; backward state is discarded.
    pub fn inference() -> Self {
        Tape {
            record: false,
            ..Tape::new()
        }
    }

    pub fn with_fault(mut self, fault: Option<BackwardFault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let op = if self.record { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(vb)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let mut out = Matrix::zeros(va.rows(), vb.rows());
        gemm(false, va, true, vb, &mut out, 0.0);
        Ok(self.push(out, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let mut out = self.value(a).clone();
        for (o, x) in out.as_mut_slice().iter_mut().zip(self.value(b).as_slice()) {
            *o *= x;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        if self.shape(row) != (1, ca) {
            return Err(Error::Dimension {
                op: "add_row",
                left: (ra, ca),
                right: self.shape(row),
            });
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).as_slice().to_vec();
        for r in 0..ra {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.as_mut_slice() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, cols) {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    left: (rows, cols),
                    right: self.shape(p),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).as_slice();
        let b = self.value(bias).as_slice();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for (c, v) in row.iter().enumerate() {
                xh[c] = (v - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Scales each row to unit L2 norm; all-zero rows pass through unchanged.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x: a, norms })
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= tv.rows() {
                return Err(Error::Index {
                    what: "embedding id",
                    index: id as i64,
                    limit: tv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rows of `x` at the given indices (repetition allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (r, &src) in rows.iter().enumerate() {
            if src >= xv.rows() {
                return Err(Error::Index {
                    what: "gather row",
                    index: src as i64,
                    limit: xv.rows(),
                });
            }
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        Ok(self.push(out, Op::Gather { x, rows: rows.to_vec() }))
    }

    /// Row `i` comes from `a` when `from_a[i]`, else from `b`.
    pub fn merge_rows(&mut self, a: Var, b: Var, from_a: Vec<bool>) -> Result<Var> {
        if self.shape(a) != self.shape(b) || from_a.len() != self.shape(a).0 {
            return Err(Error::Dimension {
                op: "merge_rows",
                left: self.shape(a),
                right: self.shape(b),
            });
        }
        let mut out = self.value(b).clone();
        let av = self.value(a);
        for (r, take) in from_a.iter().enumerate() {
            if *take {
                out.row_mut(r).copy_from_slice(av.row(r));
            }
        }
        Ok(self.push(out, Op::MergeRows { a, b, from_a }))
    }

    /// Weighted sum of per-row cross entropies
    /// `w_i · (logsumexp_{j∈allowed_i} z_ij − z_{i,t_i})`.
    ///
    /// Rows with a `None` target contribute nothing. `allowed`, when given, is
    /// a row-major `rows x cols` mask restricting the normalizer; the target
    /// itself need not be allowed.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: &[f64],
        allowed: Option<Vec<bool>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: (rows, cols),
                right: (targets.len(), weights.len()),
            });
        }
        if let Some(mask) = &allowed {
            if mask.len() != rows * cols {
                return Err(Error::Dimension {
                    op: "cross_entropy mask",
                    left: (rows, cols),
                    right: (mask.len(), 1),
                });
            }
        }
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for r in 0..rows {
            let Some(t) = targets[r] else { continue };
            if t >= cols {
                return Err(Error::Index {
                    what: "cross-entropy label",
                    index: t as i64,
                    limit: cols,
                });
            }
            let row = lv.row(r);
            let ok = |c: usize| allowed.as_ref().is_none_or(|m| m[r * cols + c]);
            if !(0..cols).any(ok) {
                return Err(Error::contract(format!(
                    "cross_entropy row {r} has an empty normalizer"
                )));
            }
            // f64::max skips NaN; carry it so the loss comes out non-finite
            let max = (0..cols)
                .filter(|&c| ok(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, |m, x| {
                    if x.is_nan() || m.is_nan() {
                        f64::NAN
                    } else {
                        m.max(x)
                    }
                });
            let mut z = 0.0;
            let p = probs.row_mut(r);
            for c in (0..cols).filter(|&c| ok(c)) {
                p[c] = (row[c] - max).exp();
                z += p[c];
            }
            for v in p.iter_mut() {
                *v /= z;
            }
            let lse = max + z.ln();
            total += weights[r] * (lse - row[t]);
        }
        Ok(self.push(
            Matrix::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention evaluated independently
    /// within each segment. Padding rows are excluded as keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Arc<[Segment]>, heads: usize) -> Result<Var> {
        let (rows, dim) = self.shape(q);
        if self.shape(k) != (rows, dim) || self.shape(v) != (rows, dim) {
            return Err(Error::Dimension {
                op: "attention",
                left: (rows, dim),
                right: self.shape(k),
            });
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::contract(format!("{heads} heads do not divide width {dim}")));
        }
        check_segments(&segments, rows)?;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(rows, dim);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments.iter() {
            let n = seg.len();
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Matrix::zeros(n, n);
                for i in 0..n {
                    let qi = &qv.row(seg.start + i)[c0..c0 + dh];
                    let pr = p.row_mut(i);
                    for j in 0..n {
                        pr[j] = if seg.mask[j] {
                            let kj = &kv.row(seg.start + j)[c0..c0 + dh];
                            dot(qi, kj) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(pr);
                    let orow = &mut out.row_mut(seg.start + i)[c0..c0 + dh];
                    for j in 0..n {
                        let w = pr[j];
                        if w != 0.0 {
                            let vj = &vv.row(seg.start + j)[c0..c0 + dh];
                            for (o, x) in orow.iter_mut().zip(vj) {
                                *o += w * x;
                            }
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
        ))
    }

    /// Late-interaction score matrix: entry `(a, b)` is
    /// `Σ_{i∈left_a} max_{j∈right_b} left_i · right_j` over attended rows.
    pub fn maxsim(
        &mut self,
        left: Var,
        left_segs: Arc<[Segment]>,
        right: Var,
        right_segs: Arc<[Segment]>,
    ) -> Result<Var> {
        let (lr, lc) = self.shape(left);
        let (rr, rc) = self.shape(right);
        if lc != rc {
            return Err(Error::Dimension {
                op: "maxsim",
                left: (lr, lc),
                right: (rr, rc),
            });
        }
        check_segments(&left_segs, lr)?;
        check_segments(&right_segs, rr)?;
        for s in left_segs.iter().chain(right_segs.iter()) {
            if s.num_attended() == 0 {
                return Err(Error::contract("maxsim over a span with no attended tokens"));
            }
        }
        let mut gram = Matrix::zeros(lr, rr);
        gemm(false, self.value(left), true, self.value(right), &mut gram, 0.0);
        let mut out = Matrix::zeros(left_segs.len(), right_segs.len());
        let mut argmax = Vec::with_capacity(left_segs.len() * right_segs.len());
        for (a, ls) in left_segs.iter().enumerate() {
            for (b, rs) in right_segs.iter().enumerate() {
                let mut picks = Vec::with_capacity(ls.num_attended());
                let mut total = 0.0;
                for i in ls.attended() {
                    let g = gram.row(i);
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for j in rs.attended() {
                        if g[j] > best.1 {
                            best = (j, g[j]);
                        }
                    }
                    total += best.1;
                    picks.push((i, best.0));
                }
                out[(a, b)] = total;
                argmax.push(picks);
            }
        }
        Ok(self.push(
            out,
            Op::MaxSim {
                left,
                right,
                left_segs,
                right_segs,
                argmax,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Frobenius product of `a` with a constant matrix.
    pub fn dot_const(&mut self, a: Var, c: Matrix) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::Dimension {
                op: "dot_const",
                left: self.shape(a),
                right: c.shape(),
            });
        }
        let s = self.value(a).dot(&c);
        Ok(self.push(Matrix::scalar(s), Op::DotConst(a, c)))
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for t in terms {
            s += self.scalar_value(*t)?;
        }
        Ok(self.push(Matrix::scalar(s), Op::AddScalars(terms.to_vec())))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::contract("backward on an inference-only tape"));
        }
        let seed = self.value(loss);
        if seed.shape() != (1, 1) {
            return Err(Error::contract(format!(
                "loss must be a scalar, found {}x{}",
                seed.rows(),
                seed.cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradients of every registered parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort_by_key(|(id, _)| **id);
        for (id, var) in ids {
            if let Some(g) = grads.wrt(*var) {
                store.get_mut(*id).gradient.add_assign(g);
            }
        }
    }

    fn fault_factor(&self, rule: BackwardFault) -> f64 {
        if self.fault == Some(rule) {
            FAULT_FACTOR
        } else {
            1.0
        }
    }

    fn backward_node(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(va.rows(), va.cols());
                gemm(false, g, true, vb, &mut da, 0.0);
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                gemm(true, va, false, g, &mut db, 0.0);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(va.rows(), va.cols());
                gemm(false, g, false, vb, &mut da, 0.0);
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                gemm(true, g, false, va, &mut db, 0.0);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = g.clone();
                for (d, x) in da.as_mut_slice().iter_mut().zip(vb.as_slice()) {
                    *d *= x;
                }
                let mut db = g.clone();
                for (d, x) in db.as_mut_slice().iter_mut().zip(va.as_slice()) {
                    *d *= x;
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::AddRow(a, row) => {
                let mut db = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (d, x) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, db);
            }
            Op::Scale(a, f) => {
                let mut d = g.clone();
                d.scale_in_place(*f);
                accumulate(grads, *a, d);
            }
            Op::Gelu(a) => {
                let f = self.fault_factor(BackwardFault::Gelu);
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *dv *= gelu_grad(*xv) * f;
                }
                accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let f = self.fault_factor(BackwardFault::LayerNorm);
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain).as_slice();
                let mut dx = Matrix::zeros(rows, cols);
                let mut dg = Matrix::zeros(1, cols);
                let mut db = Matrix::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = g.row(r);
                    let xh = xhat.row(r);
                    for c in 0..cols {
                        dxhat[c] = gr[c] * gv[c];
                        dg.as_mut_slice()[c] += gr[c] * xh[c];
                        db.as_mut_slice()[c] += gr[c];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    let out = dx.row_mut(r);
                    for c in 0..cols {
                        out[c] = rstd[r] * (dxhat[c] - m1 - xh[c] * m2) * f;
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
                accumulate(grads, *bias, db);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                        *dv = yr[c] * (gr[c] - s);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::L2Normalize { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..y.rows() {
                    let n = norms[r];
                    if n > 0.0 {
                        let yr = y.row(r);
                        let s = dot(yr, g.row(r));
                        for (c, dv) in d.row_mut(r).iter_mut().enumerate() {
                            *dv = (*dv - yr[c] * s) / n;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut d = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (dv, x) in d.row_mut(id).iter_mut().zip(g.row(r)) {
                        *dv += x;
                    }
                }
                accumulate(grads, *table, d);
            }
            Op::Gather { x, rows } => {
                let xv = self.value(*x);
                let mut d = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &src) in rows.iter().enumerate() {
                    for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::MergeRows { a, b, from_a } => {
                let mut da = Matrix::zeros(g.rows(), g.cols());
                let mut db = Matrix::zeros(g.rows(), g.cols());
                for (r, take) in from_a.iter().enumerate() {
                    let dst = if *take { &mut da } else { &mut db };
                    dst.row_mut(r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                ..
            } => {
                let f = self.fault_factor(BackwardFault::CrossEntropy);
                let up = g.as_slice()[0];
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    let w = up * weights[r] * f;
                    let dr = d.row_mut(r);
                    for (dv, p) in dr.iter_mut().zip(probs.row(r)) {
                        *dv = w * p;
                    }
                    dr[*t] -= w;
                }
                accumulate(grads, *logits, d);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let f = self.fault_factor(BackwardFault::Attention);
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, dim) = qv.shape();
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(rows, dim);
                let mut dk = Matrix::zeros(rows, dim);
                let mut dv = Matrix::zeros(rows, dim);
                let mut ds_row = Vec::new();
                for (s, seg) in segments.iter().enumerate() {
                    let n = seg.len();
                    for h in 0..*heads {
                        let p = &probs[s * heads + h];
                        let c0 = h * dh;
                        for i in 0..n {
                            let gi = &g.row(seg.start + i)[c0..c0 + dh];
                            let pr = p.row(i);
                            // dP_ij = dO_i · V_j ; dS = P ⊙ (dP − Σ_j P_ij dP_ij)
                            ds_row.clear();
                            ds_row.resize(n, 0.0);
                            let mut acc = 0.0;
                            for j in 0..n {
                                if pr[j] != 0.0 {
                                    let vj = &vv.row(seg.start + j)[c0..c0 + dh];
                                    ds_row[j] = dot(gi, vj);
                                    acc += pr[j] * ds_row[j];
                                    let dvj = &mut dv.row_mut(seg.start + j)[c0..c0 + dh];
                                    for (d, x) in dvj.iter_mut().zip(gi) {
                                        *d += pr[j] * x;
                                    }
                                }
                            }
                            let qi = qv.row(seg.start + i)[c0..c0 + dh].to_vec();
                            for j in 0..n {
                                if pr[j] == 0.0 {
                                    continue;
                                }
                                let ds = pr[j] * (ds_row[j] - acc) * scale * f;
                                let kj = &kv.row(seg.start + j)[c0..c0 + dh];
                                let dqi = &mut dq.row_mut(seg.start + i)[c0..c0 + dh];
                                for (d, x) in dqi.iter_mut().zip(kj) {
                                    *d += ds * x;
                                }
                                let dkj = &mut dk.row_mut(seg.start + j)[c0..c0 + dh];
                                for (d, x) in dkj.iter_mut().zip(&qi) {
                                    *d += ds * x;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::MaxSim {
                left,
                right,
                left_segs,
                right_segs,
                argmax,
            } => {
                let f = self.fault_factor(BackwardFault::MaxSim);
                let (lv, rv) = (self.value(*left), self.value(*right));
                let mut dl = Matrix::zeros(lv.rows(), lv.cols());
                let mut dr = Matrix::zeros(rv.rows(), rv.cols());
                let nr = right_segs.len();
                for a in 0..left_segs.len() {
                    for b in 0..nr {
                        let w = g[(a, b)] * f;
                        if w == 0.0 {
                            continue;
                        }
                        for &(i, j) in &argmax[a * nr + b] {
                            for (d, x) in dl.row_mut(i).iter_mut().zip(rv.row(j)) {
                                *d += w * x;
                            }
                            for (d, x) in dr.row_mut(j).iter_mut().zip(lv.row(i)) {
                                *d += w * x;
                            }
                        }
                    }
                }
                accumulate(grads, *left, dl);
                accumulate(grads, *right, dr);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::DotConst(a, c) => {
                let mut d = c.clone();
                d.scale_in_place(g.as_slice()[0]);
                accumulate(grads, *a, d);
            }
            Op::AddScalars(terms) => {
                for t in terms {
                    accumulate(grads, *t, g.clone());
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    for s in segments {
        if s.start + s.len() > rows {
            return Err(Error::Index {
                what: "segment end",
                index: (s.start + s.len()) as i64,
                limit: rows,
            });
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place softmax of a slice; `-inf` entries become exactly zero.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
