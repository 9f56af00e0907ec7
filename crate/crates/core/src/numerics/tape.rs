//! Define-by-run computation tape.
//!
//! Nodes are appended in evaluation order, so every node's inputs precede
//! it and a single reverse sweep visits each node once.

use std::rc::Rc;

use super::tensor::gemm;
use super::{ParamId, ParamSet, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    RowNormalize(Var),
    SegmentLogSoftmax(Var, Rc<[usize]>),
    SegmentSum(Var, Rc<[usize]>),
    Sum(Var),
    Mean(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    GroupScores {
        q: Var,
        k: Var,
        groups: usize,
        q_rows: usize,
        k_rows: usize,
        scale: f64,
    },
    GroupMix {
        a: Var,
        v: Var,
        groups: usize,
        q_rows: usize,
        k_rows: usize,
    },
    GroupMeanRows(Var, usize),
    GroupCombine(Var, Var),
    BatchedMatMul(Var, Var, usize),
    StackGroups(Vec<Var>),
    RepeatRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations and their values for one forward pass.
///
/// Parameters are borrowed from a [`ParamSet`] rather than copied; a tape
/// built without parameters can still carry inputs and constants.
pub struct Tape<'p> {
    params: Option<&'p ParamSet>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Result of a reverse sweep: gradients of the loss with respect to every
/// parameter and every input that requested one.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<usize>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for a parameter, or `None` when the loss does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(id.0)
            .copied()
            .flatten()
            .and_then(|n| self.nodes[n].as_deref())
    }

    pub fn param_or_zeros(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.param(id).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, var: Var) -> Option<Tensor> {
        self.nodes[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("shape recorded"))
    }
}

fn segments_valid(len: usize, segs: &[usize]) -> bool {
    segs.iter().sum::<usize>() == len
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(256),
        }
    }

    /// A tape with no parameter source; useful for constant-only graphs.
    pub fn detached() -> Tape<'static> {
        Tape {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.expect("param node has a source").get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shaped(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("sized buffer")
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let (r, c) = value.dims();
        let value = Self::shaped(r, c, value.into_data());
        self.nodes.push(Node {
            value,
            op: Op::Input,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Node for a registered parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Tensor::zeros(0, 0),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(TensorError::mismatch("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        Ok(self.push(Self::shaped(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::mismatch(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.push(Self::shaped(r, c, out), op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().map(|x| f(*x)).collect();
        self.push(Self::shaped(r, c, out), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("minimum", a, b)?;
        Ok(self.zip_with(a, b, Op::Minimum(a, b), f64::min))
    }

    /// `x + bias` with a `1 × c` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            return Err(TensorError::mismatch("add_row", self.value(x), self.value(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
        }
        Ok(self.push(Self::shaped(r, c, out), Op::AddRow(x, bias), &[x, bias]))
    }

    /// Scales row `i` of `x` by `s[i]` where `s` is `r × 1`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(x);
        if self.value(s).len() != r {
            return Err(TensorError::mismatch("mul_col", self.value(x), self.value(s)));
        }
        let sv = self.data(s);
        let mut out = self.data(x).to_vec();
        for (i, row) in out.chunks_mut(c.max(1)).enumerate() {
            row.iter_mut().for_each(|o| *o *= sv[i]);
        }
        Ok(self.push(Self::shaped(r, c, out), Op::MulCol(x, s), &[x, s]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, value: f64) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        self.push(Self::shaped(r, c, out), Op::SoftmaxRows(a), &[a])
    }

    /// Divides each row by its sum.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push(Self::shaped(r, c, out), Op::RowNormalize(a), &[a])
    }

    /// Log-softmax applied independently to consecutive segments of a
    /// flattened vector.
    pub fn segment_log_softmax(&mut self, a: Var, segments: Rc<[usize]>) -> Result<Var, TensorError> {
        let len = self.value(a).len();
        if !segments_valid(len, &segments) {
            return Err(TensorError::Configuration(format!(
                "segments cover {} of {len} entries",
                segments.iter().sum::<usize>()
            )));
        }
        let mut out = self.data(a).to_vec();
        let mut start = 0;
        for &s in segments.iter() {
            let seg = &mut out[start..start + s];
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + seg.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            seg.iter_mut().for_each(|v| *v -= lse);
            start += s;
        }
        Ok(self.push(Self::shaped(1, len, out), Op::SegmentLogSoftmax(a, segments), &[a]))
    }

    pub fn segment_sum(&mut self, a: Var, segments: Rc<[usize]>) -> Result<Var, TensorError> {
        let len = self.value(a).len();
        if !segments_valid(len, &segments) {
            return Err(TensorError::Configuration(format!(
                "segments cover {} of {len} entries",
                segments.iter().sum::<usize>()
            )));
        }
        let data = self.data(a);
        let mut out = Vec::with_capacity(segments.len());
        let mut start = 0;
        for &s in segments.iter() {
            out.push(data[start..start + s].iter().sum());
            start += s;
        }
        let n = out.len();
        Ok(self.push(Self::shaped(1, n, out), Op::SegmentSum(a, segments), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Self::shaped(1, 1, vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len() as f64;
        self.push(Self::shaped(1, 1, vec![s]), Op::Mean(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if start + len > c {
            return Err(TensorError::Index {
                index: start + len,
                len: c,
            });
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Self::shaped(r, len, out), Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = self.dims(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(TensorError::mismatch(
                    "concat_cols",
                    self.value(parts[0]),
                    self.value(p),
                ));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.data(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(Self::shaped(r, total, out), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        let t = self.value(a);
        if t.len() != rows * cols {
            return Err(TensorError::DataLength {
                shape: vec![rows, cols],
                len: t.len(),
            });
        }
        let out = t.data().to_vec();
        Ok(self.push(Self::shaped(rows, cols, out), Op::Reshape(a), &[a]))
    }

    /// Picks entries by flat row-major index into a `1 × k` row.
    pub fn gather(&mut self, a: Var, indices: Rc<[usize]>) -> Result<Var, TensorError> {
        let src = self.data(a);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices.iter() {
            out.push(*src.get(i).ok_or(TensorError::Index {
                index: i,
                len: src.len(),
            })?);
        }
        let n = out.len();
        Ok(self.push(Self::shaped(1, n, out), Op::Gather(a, indices), &[a]))
    }

    /// Scaled dot-product scores computed independently per group.
    ///
    /// `q` is `(groups·q_rows) × d`, `k` is `(groups·k_rows) × d`; the
    /// result is `(groups·q_rows) × k_rows`. With one group this is
    /// `scale · Q Kᵀ`.
    pub fn group_scores(
        &mut self,
        q: Var,
        k: Var,
        groups: usize,
        q_rows: usize,
        k_rows: usize,
        scale: f64,
    ) -> Result<Var, TensorError> {
        let (qr, d) = self.dims(q);
        let (kr, d2) = self.dims(k);
        if qr != groups * q_rows || kr != groups * k_rows || d != d2 {
            return Err(TensorError::mismatch("group_scores", self.value(q), self.value(k)));
        }
        let mut out = vec![0.0; groups * q_rows * k_rows];
        let (qd, kd) = (self.data(q), self.data(k));
        for g in 0..groups {
            gemm(
                q_rows,
                d,
                k_rows,
                &qd[g * q_rows * d..],
                false,
                &kd[g * k_rows * d..],
                true,
                &mut out[g * q_rows * k_rows..],
                0.0,
            );
        }
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(self.push(
            Self::shaped(groups * q_rows, k_rows, out),
            Op::GroupScores {
                q,
                k,
                groups,
                q_rows,
                k_rows,
                scale,
            },
            &[q, k],
        ))
    }

    /// Per-group `A · V`: `a` is `(groups·q_rows) × k_rows`, `v` is
    /// `(groups·k_rows) × dv`.
    pub fn group_mix(
        &mut self,
        a: Var,
        v: Var,
        groups: usize,
        q_rows: usize,
        k_rows: usize,
    ) -> Result<Var, TensorError> {
        let (ar, ac) = self.dims(a);
        let (vr, dv) = self.dims(v);
        if ar != groups * q_rows || ac != k_rows || vr != groups * k_rows {
            return Err(TensorError::mismatch("group_mix", self.value(a), self.value(v)));
        }
        let mut out = vec![0.0; groups * q_rows * dv];
        let (ad, vd) = (self.data(a), self.data(v));
        for g in 0..groups {
            gemm(
                q_rows,
                k_rows,
                dv,
                &ad[g * q_rows * k_rows..],
                false,
                &vd[g * k_rows * dv..],
                false,
                &mut out[g * q_rows * dv..],
                0.0,
            );
        }
        Ok(self.push(
            Self::shaped(groups * q_rows, dv, out),
            Op::GroupMix {
                a,
                v,
                groups,
                q_rows,
                k_rows,
            },
            &[a, v],
        ))
    }

    /// Mean over each block of `rows_per_group` consecutive rows.
    pub fn group_mean_rows(&mut self, a: Var, rows_per_group: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if rows_per_group == 0 || r % rows_per_group != 0 {
            return Err(TensorError::Configuration(format!(
                "{r} rows do not split into groups of {rows_per_group}"
            )));
        }
        let groups = r / rows_per_group;
        let src = self.data(a);
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            let dst = &mut out[g * c..(g + 1) * c];
            for i in 0..rows_per_group {
                let row = &src[(g * rows_per_group + i) * c..(g * rows_per_group + i + 1) * c];
                dst.iter_mut().zip(row).for_each(|(d, s)| *d += s);
            }
            dst.iter_mut().for_each(|d| *d /= rows_per_group as f64);
        }
        Ok(self.push(Self::shaped(groups, c, out), Op::GroupMeanRows(a, rows_per_group), &[a]))
    }

    /// Row `g` of the result is `Σ_k weights[g,k] · m[g·K + k]` where `K`
    /// is the number of weight columns.
    pub fn group_combine(&mut self, weights: Var, m: Var) -> Result<Var, TensorError> {
        let (g, k) = self.dims(weights);
        let (mr, c) = self.dims(m);
        if mr != g * k {
            return Err(TensorError::mismatch(
                "group_combine",
                self.value(weights),
                self.value(m),
            ));
        }
        let (w, md) = (self.data(weights), self.data(m));
        let mut out = vec![0.0; g * c];
        for gi in 0..g {
            let dst = &mut out[gi * c..(gi + 1) * c];
            for ki in 0..k {
                let wv = w[gi * k + ki];
                let row = &md[(gi * k + ki) * c..(gi * k + ki + 1) * c];
                dst.iter_mut().zip(row).for_each(|(d, s)| *d += wv * s);
            }
        }
        Ok(self.push(Self::shaped(g, c, out), Op::GroupCombine(weights, m), &[weights, m]))
    }

    /// Treats each row of `a` and `b` as a row-major `n × n` matrix and
    /// multiplies them pairwise.
    pub fn batched_matmul(&mut self, a: Var, b: Var, n: usize) -> Result<Var, TensorError> {
        let (ar, ac) = self.dims(a);
        if self.dims(b) != (ar, ac) || ac != n * n {
            return Err(TensorError::mismatch("batched_matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; ar * ac];
        let (ad, bd) = (self.data(a), self.data(b));
        for g in 0..ar {
            let s = g * ac;
            gemm(n, n, n, &ad[s..s + ac], false, &bd[s..s + ac], false, &mut out[s..s + ac], 0.0);
        }
        Ok(self.push(Self::shaped(ar, ac, out), Op::BatchedMatMul(a, b, n), &[a, b]))
    }

    /// Interleaves `m` tensors of shape `G × c` into `(G·m) × c` so that the
    /// rows belonging to group `g` are contiguous.
    pub fn stack_groups(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let (g, c) = self.dims(parts[0]);
        for &p in parts {
            if self.dims(p) != (g, c) {
                return Err(TensorError::mismatch(
                    "stack_groups",
                    self.value(parts[0]),
                    self.value(p),
                ));
            }
        }
        let m = parts.len();
        let mut out = Vec::with_capacity(g * m * c);
        for gi in 0..g {
            for &p in parts {
                out.extend_from_slice(&self.data(p)[gi * c..(gi + 1) * c]);
            }
        }
        Ok(self.push(Self::shaped(g * m, c, out), Op::StackGroups(parts.to_vec()), parts))
    }

    /// Repeats a single row `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        if r != 1 {
            return Err(TensorError::Configuration(format!(
                "repeat_rows expects one row, got {r}"
            )));
        }
        let src = self.data(a).to_vec();
        let mut out = Vec::with_capacity(times * c);
        for _ in 0..times {
            out.extend_from_slice(&src);
        }
        Ok(self.push(Self::shaped(times, c, out), Op::RepeatRows(a), &[a]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Keep only leaves; interior gradients are not part of the contract.
        let mut shapes = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            let leaf = matches!(node.op, Op::Input | Op::Param(_));
            if !leaf {
                grads[i] = None;
            }
            shapes.push(if leaf { self.value(Var(i)).shape().to_vec() } else { Vec::new() });
        }
        let params = self
            .param_vars
            .iter()
            .map(|v| v.map(|v| v.0))
            .collect();
        Ok(Gradients {
            nodes: grads,
            params,
            shapes,
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, self.data(*b), true, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, self.data(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bd = self.data(*b);
                    for j in 0..g.len() {
                        ga[j] += g[j] * bd[j];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let ad = self.data(*a);
                    for j in 0..g.len() {
                        gb[j] += g[j] * ad[j];
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if ad[j] <= bd[j] {
                            ga[j] += g[j];
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..g.len() {
                        if ad[j] > bd[j] {
                            gb[j] += g[j];
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::MulCol(x, s) => {
                let c = self.dims(*x).1.max(1);
                let sd = self.data(*s);
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (gxr, gr)) in gx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        gxr.iter_mut().zip(gr).for_each(|(d, s)| *d += s * sd[r]);
                    }
                }
                let xd = self.data(*x);
                if let Some(gs) = self.acc(grads, *s) {
                    for (r, (xr, gr)) in xd.chunks(c).zip(g.chunks(c)).enumerate() {
                        gs[r] += xr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += f * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Relu(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if ad[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = out.data();
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j];
                    }
                }
            }
            Op::Square(a) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        ga[j] += 2.0 * ad[j] * g[j];
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..g.len() {
                        if ad[j] > *lo && ad[j] < *hi {
                            ga[j] += g[j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                if let Some(ga) = self.acc(grads, *a) {
                    let y = out.data();
                    for ((gar, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::RowNormalize(a) => {
                let c = out.cols().max(1);
                let ad = self.data(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    let y = out.data();
                    for (r, (gar, gr)) in ga.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let yr = &y[r * c..(r + 1) * c];
                        let s: f64 = ad[r * c..(r + 1) * c].iter().sum();
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gar[j] += (gr[j] - dot) / s;
                        }
                    }
                }
            }
            Op::SegmentLogSoftmax(a, segs) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let y = out.data();
                    let mut start = 0;
                    for &s in segs.iter() {
                        let gs: f64 = g[start..start + s].iter().sum();
                        for j in start..start + s {
                            ga[j] += g[j] - y[j].exp() * gs;
                        }
                        start += s;
                    }
                }
            }
            Op::SegmentSum(a, segs) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let mut start = 0;
                    for (si, &s) in segs.iter().enumerate() {
                        ga[start..start + s].iter_mut().for_each(|d| *d += g[si]);
                        start += s;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SliceCols(a, start) => {
                let c = self.dims(*a).1;
                let len = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, gr) in g.chunks(len.max(1)).enumerate() {
                        ga[r * c + start..r * c + start + len]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..out.rows() {
                            gp[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + pc])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += pc;
                }
            }
            Op::Gather(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, &ix) in idx.iter().enumerate() {
                        ga[ix] += g[j];
                    }
                }
            }
            Op::GroupScores {
                q,
                k,
                groups,
                q_rows,
                k_rows,
                scale,
            } => {
                let d = self.dims(*q).1;
                let (qd, kd) = (self.data(*q), self.data(*k));
                let gs: Vec<f64> = g.iter().map(|v| v * scale).collect();
                if let Some(gq) = self.acc(grads, *q) {
                    for gi in 0..*groups {
                        gemm(
                            *q_rows,
                            *k_rows,
                            d,
                            &gs[gi * q_rows * k_rows..],
                            false,
                            &kd[gi * k_rows * d..],
                            false,
                            &mut gq[gi * q_rows * d..],
                            1.0,
                        );
                    }
                }
                if let Some(gk) = self.acc(grads, *k) {
                    for gi in 0..*groups {
                        gemm(
                            *k_rows,
                            *q_rows,
                            d,
                            &gs[gi * q_rows * k_rows..],
                            true,
                            &qd[gi * q_rows * d..],
                            false,
                            &mut gk[gi * k_rows * d..],
                            1.0,
                        );
                    }
                }
            }
            Op::GroupMix {
                a,
                v,
                groups,
                q_rows,
                k_rows,
            } => {
                let dv = self.dims(*v).1;
                let (ad, vd) = (self.data(*a), self.data(*v));
                if let Some(ga) = self.acc(grads, *a) {
                    for gi in 0..*groups {
                        gemm(
                            *q_rows,
                            dv,
                            *k_rows,
                            &g[gi * q_rows * dv..],
                            false,
                            &vd[gi * k_rows * dv..],
                            true,
                            &mut ga[gi * q_rows * k_rows..],
                            1.0,
                        );
                    }
                }
                if let Some(gv) = self.acc(grads, *v) {
                    for gi in 0..*groups {
                        gemm(
                            *k_rows,
                            *q_rows,
                            dv,
                            &ad[gi * q_rows * k_rows..],
                            true,
                            &g[gi * q_rows * dv..],
                            false,
                            &mut gv[gi * k_rows * dv..],
                            1.0,
                        );
                    }
                }
            }
            Op::GroupMeanRows(a, per) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (gi, gr) in g.chunks(c.max(1)).enumerate() {
                        for r in 0..*per {
                            let row = &mut ga[(gi * per + r) * c..(gi * per + r + 1) * c];
                            row.iter_mut().zip(gr).for_each(|(d, s)| *d += s / *per as f64);
                        }
                    }
                }
            }
            Op::GroupCombine(w, m) => {
                let (gcount, k) = self.dims(*w);
                let c = out.cols();
                let (wd, md) = (self.data(*w), self.data(*m));
                if let Some(gw) = self.acc(grads, *w) {
                    for gi in 0..gcount {
                        let gr = &g[gi * c..(gi + 1) * c];
                        for ki in 0..k {
                            let row = &md[(gi * k + ki) * c..(gi * k + ki + 1) * c];
                            gw[gi * k + ki] += gr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(gm) = self.acc(grads, *m) {
                    for gi in 0..gcount {
                        let gr = &g[gi * c..(gi + 1) * c];
                        for ki in 0..k {
                            let wv = wd[gi * k + ki];
                            let row = &mut gm[(gi * k + ki) * c..(gi * k + ki + 1) * c];
                            row.iter_mut().zip(gr).for_each(|(d, s)| *d += wv * s);
                        }
                    }
                }
            }
            Op::BatchedMatMul(a, b, n) => {
                let n = *n;
                let cols = n * n;
                let (ad, bd) = (self.data(*a), self.data(*b));
                let rows = out.rows();
                if let Some(ga) = self.acc(grads, *a) {
                    for r in 0..rows {
                        let s = r * cols;
                        gemm(n, n, n, &g[s..s + cols], false, &bd[s..s + cols], true, &mut ga[s..s + cols], 1.0);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for r in 0..rows {
                        let s = r * cols;
                        gemm(n, n, n, &ad[s..s + cols], true, &g[s..s + cols], false, &mut gb[s..s + cols], 1.0);
                    }
                }
            }
            Op::StackGroups(parts) => {
                let m = parts.len();
                let c = out.cols();
                for (pi, &p) in parts.iter().enumerate() {
                    if let Some(gp) = self.acc(grads, p) {
                        let groups = gp.len() / c.max(1);
                        for gi in 0..groups {
                            let src = &g[(gi * m + pi) * c..(gi * m + pi + 1) * c];
                            gp[gi * c..(gi + 1) * c]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::RepeatRows(a) => {
                let c = out.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for row in g.chunks(c.max(1)) {
                        ga.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
