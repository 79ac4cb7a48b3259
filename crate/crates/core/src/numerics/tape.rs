use rayon::prelude::*;

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::{dot, stable_softmax, Tensor};

thread_local! {
    static BACKWARD_SWEEPS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of reverse sweeps run on this thread since startup. Training uses
/// deltas of this counter to report forward-backward pass counts that were
/// actually measured rather than computed from the schedule.
pub fn backward_sweeps() -> u64 {
    BACKWARD_SWEEPS.with(|c| c.get())
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// One recorded primitive. The enum is closed: everything differentiable in
/// this crate is built from these, so `backward` is a total match and there
/// is no "unsupported op" failure mode at runtime.
#[derive(Debug, Clone)]
enum Op<T> {
    /// [m,k] x [k,n] -> [m,n]
    MatMul { a: VarId, b: VarId },
    /// [m,n] -> [n,m]
    Transpose { a: VarId },
    Add { a: VarId, b: VarId },
    /// [m,n] + [n] broadcast over rows
    AddRow { a: VarId, bias: VarId },
    Sub { a: VarId, b: VarId },
    /// elementwise product
    Mul { a: VarId, b: VarId },
    Scale { a: VarId, c: T },
    Relu { a: VarId },
    /// metadata-only change of shape
    Reshape { a: VarId },
    /// each row scaled to unit L2 norm
    NormalizeRows { a: VarId },
    SoftmaxRows { a: VarId },
    /// [m,n] -> [m], numerically shifted
    LogSumExpRows { a: VarId },
    Log { a: VarId },
    Exp { a: VarId },
    /// max(x, c) elementwise
    ClampMin { a: VarId, c: T },
    SumAll { a: VarId },
    MeanAll { a: VarId },
    /// out[i] = a[i, idx[i]]
    PickPerRow { a: VarId, idx: Vec<usize> },
    /// [m,p] ++ [m,n] -> [m,p+n]
    ConcatCols { a: VarId, b: VarId },
    /// out[i] = <a[i,:], b[i,:]>
    RowDot { a: VarId, b: VarId },
    /// a / s where s is a live [1] variable
    DivByScalar { a: VarId, s: VarId },
    /// stride-1 same-padding convolution, kernel [cout,cin,kh,kw]
    Conv2d {
        input: VarId,
        kernel: VarId,
        bias: VarId,
    },
    /// non-overlapping 2x2 mean pooling
    AvgPool2 { a: VarId },
}

struct Node<T> {
    val: Tensor<T>,
    needs_grad: bool,
    /// index into `ops` of the op that produced this node, if any
    producer: Option<usize>,
}

/// Reverse-mode tape. Forward evaluation is eager: each builder method
/// computes its output immediately and records the op; `backward` replays the
/// record in reverse accumulating vector-Jacobian products.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    ops: Vec<Op<T>>,
}

/// Gradients keyed by `VarId`, produced by `Tape::backward`. Variables the
/// loss never reached have no entry.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: VarId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `id`, or zeros of the given shape when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
        }
    }

    /// Register a differentiable leaf.
    pub fn input(&mut self, t: Tensor<T>) -> VarId {
        self.push_node(t, true, None)
    }

    /// Register a leaf the loss is never differentiated against. Backward
    /// skips whole VJP branches that only feed constants, which matters for
    /// large negative banks.
    pub fn constant(&mut self, t: Tensor<T>) -> VarId {
        self.push_node(t, false, None)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].val
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, val: Tensor<T>, needs_grad: bool, producer: Option<usize>) -> VarId {
        self.nodes.push(Node {
            val,
            needs_grad,
            producer,
        });
        VarId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op<T>, val: Tensor<T>, parents: &[VarId]) -> VarId {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op_idx = self.ops.len();
        self.ops.push(op);
        self.push_node(val, needs, Some(op_idx))
    }

    // ── builders ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = super::tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push_op(Op::MatMul { a, b }, out, &[a, b]))
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        if self.value(a).rank() > 2 {
            return Err(Error::shape(format!(
                "transpose expects a matrix, got {:?}",
                self.value(a).shape()
            )));
        }
        let out = super::tensor::transpose(self.value(a));
        Ok(self.push_op(Op::Transpose { a }, out, &[a]))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(Op::Add { a, b }, out, &[a, b]))
    }

    pub fn add_row(&mut self, a: VarId, bias: VarId) -> Result<VarId> {
        let (m, n) = (self.value(a).view_rows(), self.value(a).view_cols());
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(format!(
                "row broadcast: {:?} + {:?}",
                self.value(a).shape(),
                self.value(bias).shape()
            )));
        }
        let mut out = self.value(a).clone();
        let bias_v = self.value(bias).data().to_vec();
        for i in 0..m {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(&bias_v) {
                *o += bv;
            }
        }
        Ok(self.push_op(Op::AddRow { a, bias }, out, &[a, bias]))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(Op::Sub { a, b }, out, &[a, b]))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(Op::Mul { a, b }, out, &[a, b]))
    }

    pub fn scale(&mut self, a: VarId, c: T) -> VarId {
        let out = self.value(a).map(|x| x * c);
        self.push_op(Op::Scale { a, c }, out, &[a])
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(|x| x.max_s(T::ZERO));
        self.push_op(Op::Relu { a }, out, &[a])
    }

    pub fn reshape(&mut self, a: VarId, shape: Vec<usize>) -> Result<VarId> {
        let out = self.value(a).reshaped(shape)?;
        Ok(self.push_op(Op::Reshape { a }, out, &[a]))
    }

    pub fn normalize_rows(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a);
        let (m, n) = (v.view_rows(), v.view_cols());
        let mut out = v.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt();
            if norm <= T::ZERO_NORM_TOL {
                return Err(Error::ZeroNorm {
                    norm: norm.to_f64(),
                    tol: T::ZERO_NORM_TOL.to_f64(),
                });
            }
            for x in row {
                *x /= norm;
            }
        }
        Ok(self.push_op(Op::NormalizeRows { a }, out, &[a]))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let (m, n) = (v.view_rows(), v.view_cols());
        let mut out = v.clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let p = stable_softmax(row);
            row.copy_from_slice(&p);
        }
        self.push_op(Op::SoftmaxRows { a }, out, &[a])
    }

    pub fn log_sum_exp_rows(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let m = v.view_rows();
        let data: Vec<T> = (0..m)
            .map(|i| super::tensor::log_sum_exp(v.row(i)))
            .collect();
        let out = Tensor::vector(data);
        self.push_op(Op::LogSumExpRows { a }, out, &[a])
    }

    pub fn log(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(|x| x.ln());
        self.push_op(Op::Log { a }, out, &[a])
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let out = self.value(a).map(|x| x.exp());
        self.push_op(Op::Exp { a }, out, &[a])
    }

    pub fn clamp_min(&mut self, a: VarId, c: T) -> VarId {
        let out = self.value(a).map(|x| x.max_s(c));
        self.push_op(Op::ClampMin { a, c }, out, &[a])
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(Op::SumAll { a }, out, &[a])
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / T::from_f64(v.numel() as f64));
        self.push_op(Op::MeanAll { a }, out, &[a])
    }

    pub fn pick_per_row(&mut self, a: VarId, idx: &[usize]) -> Result<VarId> {
        let v = self.value(a);
        let (m, n) = (v.view_rows(), v.view_cols());
        if idx.len() != m {
            return Err(Error::shape(format!(
                "pick_per_row: {} indices for {} rows",
                idx.len(),
                m
            )));
        }
        let mut data = Vec::with_capacity(m);
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::InvalidLabel {
                    label: j,
                    classes: n,
                });
            }
            data.push(v.row(i)[j]);
        }
        let out = Tensor::vector(data);
        Ok(self.push_op(
            Op::PickPerRow {
                a,
                idx: idx.to_vec(),
            },
            out,
            &[a],
        ))
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, p) = (va.view_rows(), va.view_cols());
        let (mb, n) = (vb.view_rows(), vb.view_cols());
        if m != mb {
            return Err(Error::shape(format!(
                "concat_cols: {} rows vs {}",
                m, mb
            )));
        }
        let mut data = Vec::with_capacity(m * (p + n));
        for i in 0..m {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let out = Tensor::from_vec(vec![m, p + n], data)?;
        Ok(self.push_op(Op::ConcatCols { a, b }, out, &[a, b]))
    }

    pub fn row_dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!(
                "row_dot on {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let m = va.view_rows();
        let data: Vec<T> = (0..m).map(|i| dot(va.row(i), vb.row(i))).collect();
        let out = Tensor::vector(data);
        Ok(self.push_op(Op::RowDot { a, b }, out, &[a, b]))
    }

    pub fn div_by_scalar(&mut self, a: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(format!(
                "div_by_scalar: divisor has shape {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).item();
        let out = self.value(a).map(|x| x / sv);
        Ok(self.push_op(Op::DivByScalar { a, s }, out, &[a, s]))
    }

    /// Same-padding stride-1 convolution. Input [b,cin,h,w], kernel
    /// [cout,cin,kh,kw] with odd kh == kw, bias [cout]; output [b,cout,h,w].
    pub fn conv2d(&mut self, input: VarId, kernel: VarId, bias: VarId) -> Result<VarId> {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d wants rank-4 input/kernel, got {:?} and {:?}",
                ishape, kshape
            )));
        }
        let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kcin != cin || kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!(
                "conv2d kernel {:?} incompatible with input {:?}",
                kshape, ishape
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias {:?}, wanted [{}]",
                self.value(bias).shape(),
                cout
            )));
        }
        let pad = kh / 2;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = Tensor::zeros(&[b, cout, h, w]);
        {
            let od = out.data_mut();
            // One (batch, out-channel) plane per task: disjoint output
            // regions, each filled serially, so order of writes is fixed.
            od.par_chunks_mut(h * w).enumerate().for_each(|(plane, op)| {
                let bi = plane / cout;
                let co = plane % cout;
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bv[co];
                        for ci in 0..cin {
                            for dy in 0..kh {
                                let iy = y + dy;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for dx in 0..kw {
                                    let ix = xx + dx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    acc += x[((bi * cin + ci) * h + iy) * w + ix]
                                        * k[((co * cin + ci) * kh + dy) * kw + dx];
                                }
                            }
                        }
                        op[y * w + xx] = acc;
                    }
                }
            });
        }
        Ok(self.push_op(
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            out,
            &[input, kernel, bias],
        ))
    }

    /// 2x2 mean pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, a: VarId) -> Result<VarId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
            return Err(Error::shape(format!(
                "avg_pool2 wants rank-4 input with even spatial dims, got {:?}",
                shape
            )));
        }
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(a).data();
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        let quarter = T::from_f64(0.25);
        {
            let od = out.data_mut();
            for plane in 0..b * c {
                let src = &x[plane * h * w..(plane + 1) * h * w];
                let dst = &mut od[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let s = src[(2 * y) * w + 2 * xx]
                            + src[(2 * y) * w + 2 * xx + 1]
                            + src[(2 * y + 1) * w + 2 * xx]
                            + src[(2 * y + 1) * w + 2 * xx + 1];
                        dst[y * ow + xx] = s * quarter;
                    }
                }
            }
        }
        Ok(self.push_op(Op::AvgPool2 { a }, out, &[a]))
    }

    // ── backward ──────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns the gradient of `loss` with
    /// respect to every reachable differentiable variable.
    pub fn backward(&self, loss: VarId) -> Result<Gradients<T>> {
        BACKWARD_SWEEPS.with(|c| c.set(c.get() + 1));
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward from non-scalar {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));

        for node_idx in (0..=loss.0).rev() {
            let node = &self.nodes[node_idx];
            let Some(op_idx) = node.producer else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            // Take the output grad; nodes after `loss` on the tape, or side
            // branches the loss never consumed, simply have none.
            let Some(g) = grads[node_idx].take() else {
                continue;
            };
            self.backward_op(&self.ops[op_idx], node_idx, &g, &mut grads);
            grads[node_idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], id: VarId, delta: Tensor<T>) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign_scaled(&delta, T::ONE),
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_op(
        &self,
        op: &Op<T>,
        out_idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let out_val = &self.nodes[out_idx].val;
        match op {
            Op::MatMul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.view_rows(), va.view_cols());
                let n = vb.view_cols();
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    acc_matmul_nt(g.data(), vb.data(), da.data_mut(), m, n, k);
                    self.accum(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    acc_matmul_tn(va.data(), g.data(), db.data_mut(), m, k, n);
                    self.accum(grads, *b, db);
                }
            }
            Op::Transpose { a } => {
                if self.wants(*a) {
                    self.accum(grads, *a, super::tensor::transpose(g));
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accum(grads, *b, g.clone());
                }
            }
            Op::AddRow { a, bias } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.wants(*bias) {
                    let (m, n) = (g.view_rows(), g.view_cols());
                    let mut db = Tensor::zeros(&[n]);
                    for i in 0..m {
                        for (d, &gv) in db.data_mut().iter_mut().zip(g.row(i)) {
                            *d += gv;
                        }
                    }
                    self.accum(grads, *bias, db);
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accum(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv).unwrap());
                }
                if self.wants(*b) {
                    self.accum(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av).unwrap());
                }
            }
            Op::Scale { a, c } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.map(|x| x * *c));
                }
            }
            Op::Relu { a } => {
                if self.wants(*a) {
                    // Subgradient 0 at the kink: only strictly positive
                    // pre-activations pass gradient.
                    let da = g
                        .zip_map(self.value(*a), |gv, av| {
                            if av > T::ZERO {
                                gv
                            } else {
                                T::ZERO
                            }
                        })
                        .unwrap();
                    self.accum(grads, *a, da);
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    let da = g.reshaped(self.value(*a).shape().to_vec()).unwrap();
                    self.accum(grads, *a, da);
                }
            }
            Op::NormalizeRows { a } => {
                if self.wants(*a) {
                    let va = self.value(*a);
                    let (m, n) = (va.view_rows(), va.view_cols());
                    let mut da = Tensor::zeros(va.shape());
                    for i in 0..m {
                        let x = va.row(i);
                        let y = out_val.row(i);
                        let gr = g.row(i);
                        let r = dot(x, x).sqrt();
                        let yg = dot(y, gr);
                        let drow = &mut da.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] = (gr[j] - y[j] * yg) / r;
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::SoftmaxRows { a } => {
                if self.wants(*a) {
                    let (m, n) = (out_val.view_rows(), out_val.view_cols());
                    let mut da = Tensor::zeros(self.value(*a).shape());
                    for i in 0..m {
                        let y = out_val.row(i);
                        let gr = g.row(i);
                        let gy = dot(gr, y);
                        let drow = &mut da.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] = y[j] * (gr[j] - gy);
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::LogSumExpRows { a } => {
                if self.wants(*a) {
                    let va = self.value(*a);
                    let (m, n) = (va.view_rows(), va.view_cols());
                    let mut da = Tensor::zeros(va.shape());
                    for i in 0..m {
                        let p = stable_softmax(va.row(i));
                        let gi = g.data()[i];
                        let drow = &mut da.data_mut()[i * n..(i + 1) * n];
                        for j in 0..n {
                            drow[j] = p[j] * gi;
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::Log { a } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.zip_map(self.value(*a), |gv, x| gv / x).unwrap());
                }
            }
            Op::Exp { a } => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.zip_map(out_val, |gv, y| gv * y).unwrap());
                }
            }
            Op::ClampMin { a, c } => {
                if self.wants(*a) {
                    let da = g
                        .zip_map(self.value(*a), |gv, x| if x > *c { gv } else { T::ZERO })
                        .unwrap();
                    self.accum(grads, *a, da);
                }
            }
            Op::SumAll { a } => {
                if self.wants(*a) {
                    let gv = g.item();
                    self.accum(grads, *a, Tensor::full(self.value(*a).shape(), gv));
                }
            }
            Op::MeanAll { a } => {
                if self.wants(*a) {
                    let va = self.value(*a);
                    let gv = g.item() / T::from_f64(va.numel() as f64);
                    self.accum(grads, *a, Tensor::full(va.shape(), gv));
                }
            }
            Op::PickPerRow { a, idx } => {
                if self.wants(*a) {
                    let va = self.value(*a);
                    let n = va.view_cols();
                    let mut da = Tensor::zeros(va.shape());
                    for (i, &j) in idx.iter().enumerate() {
                        da.data_mut()[i * n + j] += g.data()[i];
                    }
                    self.accum(grads, *a, da);
                }
            }
            Op::ConcatCols { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, p) = (va.view_rows(), va.view_cols());
                let n = vb.view_cols();
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    for i in 0..m {
                        da.data_mut()[i * p..(i + 1) * p].copy_from_slice(&g.row(i)[..p]);
                    }
                    self.accum(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    for i in 0..m {
                        db.data_mut()[i * n..(i + 1) * n].copy_from_slice(&g.row(i)[p..]);
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::RowDot { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, n) = (va.view_rows(), va.view_cols());
                if self.wants(*a) {
                    let mut da = Tensor::zeros(va.shape());
                    for i in 0..m {
                        let gi = g.data()[i];
                        let drow = &mut da.data_mut()[i * n..(i + 1) * n];
                        for (d, &bv) in drow.iter_mut().zip(vb.row(i)) {
                            *d = gi * bv;
                        }
                    }
                    self.accum(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(vb.shape());
                    for i in 0..m {
                        let gi = g.data()[i];
                        let drow = &mut db.data_mut()[i * n..(i + 1) * n];
                        for (d, &av) in drow.iter_mut().zip(va.row(i)) {
                            *d = gi * av;
                        }
                    }
                    self.accum(grads, *b, db);
                }
            }
            Op::DivByScalar { a, s } => {
                let sv = self.value(*s).item();
                if self.wants(*a) {
                    self.accum(grads, *a, g.map(|gv| gv / sv));
                }
                if self.wants(*s) {
                    // d/ds (a/s) = -a/s^2 = -out/s
                    let mut acc = T::ZERO;
                    for (&gv, &ov) in g.data().iter().zip(out_val.data()) {
                        acc += gv * ov;
                    }
                    self.accum(grads, *s, Tensor::scalar(-acc / sv));
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                self.backward_conv2d(*input, *kernel, *bias, g, grads);
            }
            Op::AvgPool2 { a } => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::from_f64(0.25);
                    let mut da = Tensor::zeros(&shape);
                    {
                        let dd = da.data_mut();
                        for plane in 0..b * c {
                            let gsrc = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                            let dst = &mut dd[plane * h * w..(plane + 1) * h * w];
                            for y in 0..oh {
                                for xx in 0..ow {
                                    let gv = gsrc[y * ow + xx] * quarter;
                                    dst[(2 * y) * w + 2 * xx] += gv;
                                    dst[(2 * y) * w + 2 * xx + 1] += gv;
                                    dst[(2 * y + 1) * w + 2 * xx] += gv;
                                    dst[(2 * y + 1) * w + 2 * xx + 1] += gv;
                                }
                            }
                        }
                    }
                    self.accum(grads, *a, da);
                }
            }
        }
    }

    fn backward_conv2d(
        &self,
        input: VarId,
        kernel: VarId,
        bias: VarId,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let ishape = self.value(input).shape().to_vec();
        let kshape = self.value(kernel).shape().to_vec();
        let (b, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (cout, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        let pad = kh / 2;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let gd = g.data();

        if self.wants(input) {
            let mut da = Tensor::zeros(&ishape);
            da.data_mut()
                .par_chunks_mut(h * w)
                .enumerate()
                .for_each(|(plane, dp)| {
                    let bi = plane / cin;
                    let ci = plane % cin;
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut acc = T::ZERO;
                            for co in 0..cout {
                                for dy in 0..kh {
                                    // Output position that read (iy, ix) with
                                    // kernel offset dy: y = iy + pad - dy.
                                    let y = iy + pad;
                                    if y < dy || y - dy >= h {
                                        continue;
                                    }
                                    let y = y - dy;
                                    for dx in 0..kw {
                                        let xx = ix + pad;
                                        if xx < dx || xx - dx >= w {
                                            continue;
                                        }
                                        let xx = xx - dx;
                                        acc += gd[((bi * cout + co) * h + y) * w + xx]
                                            * k[((co * cin + ci) * kh + dy) * kw + dx];
                                    }
                                }
                            }
                            dp[iy * w + ix] += acc;
                        }
                    }
                });
            self.accum(grads, input, da);
        }

        if self.wants(kernel) {
            let mut dk = Tensor::zeros(&kshape);
            dk.data_mut()
                .par_chunks_mut(cin * kh * kw)
                .enumerate()
                .for_each(|(co, dslice)| {
                    for ci in 0..cin {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let mut acc = T::ZERO;
                                for bi in 0..b {
                                    for y in 0..h {
                                        let iy = y + dy;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for xx in 0..w {
                                            let ix = xx + dx;
                                            if ix < pad || ix - pad >= w {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            acc += gd[((bi * cout + co) * h + y) * w + xx]
                                                * x[((bi * cin + ci) * h + iy) * w + ix];
                                        }
                                    }
                                }
                                dslice[(ci * kh + dy) * kw + dx] += acc;
                            }
                        }
                    }
                });
            self.accum(grads, kernel, dk);
        }

        if self.wants(bias) {
            let mut db = Tensor::zeros(&[cout]);
            for co in 0..cout {
                let mut acc = T::ZERO;
                for bi in 0..b {
                    let base = (bi * cout + co) * h * w;
                    for v in &gd[base..base + h * w] {
                        acc += *v;
                    }
                }
                db.data_mut()[co] = acc;
            }
            self.accum(grads, bias, db);
        }
    }

    /// Bit pattern of every kink decision (relu and clamp activations) taken
    /// during the forward pass, in recording order. Finite-difference checks
    /// compare signatures of the two perturbed evaluations: a mismatch means
    /// the perturbation stepped across a kink and the derivative estimate at
    /// that coordinate is meaningless.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut bits = Vec::new();
        for op in &self.ops {
            match op {
                Op::Relu { a } => {
                    bits.extend(self.value(*a).data().iter().map(|&x| x > T::ZERO));
                }
                Op::ClampMin { a, c } => {
                    bits.extend(self.value(*a).data().iter().map(|&x| x > *c));
                }
                _ => {}
            }
        }
        bits
    }
}

/// da += g @ b^T without materializing the transpose:
/// da[i,kk] = sum_j g[i,j] * b[kk,j]. g is [m,n], b is [k,n], da is [m,k].
fn acc_matmul_nt<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, n: usize, k: usize) {
    let body = |i: usize, darow: &mut [T]| {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, dv) in darow.iter_mut().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            *dv += dot(grow, brow);
        }
    };
    if m * n * k >= 1 << 17 && m > 1 {
        da.par_chunks_mut(k).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in da.chunks_mut(k).enumerate() {
            body(i, row);
        }
    }
}

/// db += a^T @ g: db[kk,j] = sum_i a[i,kk] * g[i,j]. a is [m,k], g is [m,n],
/// db is [k,n].
fn acc_matmul_tn<T: Scalar>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    let body = |kk: usize, dbrow: &mut [T]| {
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik == T::ZERO {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            for (dv, &gv) in dbrow.iter_mut().zip(grow) {
                *dv += aik * gv;
            }
        }
    };
    if m * n * k >= 1 << 17 && k > 1 {
        db.par_chunks_mut(n).enumerate().for_each(|(kk, row)| body(kk, row));
    } else {
        for (kk, row) in db.chunks_mut(n).enumerate() {
            body(kk, row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_grads_match_manual() {
        // f = sum(A @ B); df/dA[i,k] = sum_j B[k,j], df/dB[k,j] = sum_i A[i,k]
        let mut tape = Tape::new();
        let a = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.input(t(&[3, 2], &[0.5, -1.0, 2.0, 0.25, -0.5, 1.5]));
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss).unwrap();
        let da = grads.get(a).unwrap();
        let db = grads.get(b).unwrap();
        assert_relative_eq!(da.data()[0], -0.5, epsilon = 1e-12); // 0.5 + (-1.0)
        assert_relative_eq!(da.data()[1], 2.25, epsilon = 1e-12); // 2.0 + 0.25
        assert_relative_eq!(da.data()[2], 1.0, epsilon = 1e-12); // -0.5 + 1.5
        assert_relative_eq!(db.data()[0], 5.0, epsilon = 1e-12); // 1 + 4
        assert_relative_eq!(db.data()[2], 7.0, epsilon = 1e-12); // 2 + 5
        assert_relative_eq!(db.data()[4], 9.0, epsilon = 1e-12); // 3 + 6
    }

    #[test]
    fn relu_gradient_zero_at_kink() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn constant_branch_gets_no_grad() {
        let mut tape = Tape::new();
        let a = tape.input(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(a, c).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn softmax_rows_grad_sums_to_zero() {
        // Softmax outputs sum to 1 regardless of input, so the gradient of
        // any loss through softmax must sum to zero per row.
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[0.1, -0.4, 1.2, 2.0, 0.0, -1.0]));
        let p = tape.softmax_rows(x);
        let w = tape.constant(t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0]));
        let q = tape.mul(p, w).unwrap();
        let loss = tape.sum_all(q);
        let grads = tape.backward(loss).unwrap();
        let dx = grads.get(x).unwrap();
        for i in 0..2 {
            let s: f64 = dx.row(i).iter().sum();
            assert_relative_eq!(s, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalize_rows_grad_is_tangent() {
        // y = x/|x| stays on the sphere, so dx must be orthogonal to y... in
        // the pullback sense: <x, dx> = 0 for any upstream gradient.
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 3], &[3.0, -4.0, 12.0]));
        let y = tape.normalize_rows(x).unwrap();
        let w = tape.constant(t(&[1, 3], &[0.3, 1.7, -0.9]));
        let q = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(q);
        let grads = tape.backward(loss).unwrap();
        let dx = grads.get(x).unwrap();
        let xv = [3.0, -4.0, 12.0];
        let ip: f64 = xv.iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert_relative_eq!(ip, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn normalize_rows_rejects_zero_row() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            tape.normalize_rows(x),
            Err(Error::ZeroNorm { .. })
        ));
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, -1000.0, 0.0, 1000.0]));
        let l = tape.log_sum_exp_rows(x);
        let direct0 = (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp()).ln();
        assert_relative_eq!(tape.value(l).data()[0], direct0, epsilon = 1e-12);
        assert_relative_eq!(tape.value(l).data()[1], 1000.0, epsilon = 1e-12);
    }

    #[test]
    fn pick_per_row_rejects_bad_label() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 3], &[0.0; 6]));
        assert!(matches!(
            tape.pick_per_row(x, &[0, 3]),
            Err(Error::InvalidLabel { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn div_by_scalar_grads() {
        // f = sum(a/s): df/da = 1/s, df/ds = -sum(a)/s^2
        let mut tape = Tape::new();
        let a = tape.input(t(&[2], &[4.0, 6.0]));
        let s = tape.input(t(&[1], &[2.0]));
        let y = tape.div_by_scalar(a, s).unwrap();
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.5, 0.5]);
        assert_relative_eq!(grads.get(s).unwrap().item(), -10.0 / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1-equivalent: 3x3 kernel with only the center set copies input.
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 4, 4], &(0..16).map(|i| i as f64).collect::<Vec<_>>()));
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0;
        let k = tape.input(t(&[1, 1, 3, 3], &kdata));
        let b = tape.input(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv2d_edge_padding_zeroes() {
        // All-ones 3x3 kernel on all-ones 3x3 input: corners see 4 cells,
        // edges 6, center 9.
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 3, 3], &[1.0; 9]));
        let k = tape.input(t(&[1, 1, 3, 3], &[1.0; 9]));
        let b = tape.input(t(&[1], &[0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v, &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn avg_pool_forward_and_grad() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let y = tape.avg_pool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        // f = sum(x) + sum(x*x): df/dx = 1 + 2x
        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[3.0, -2.0]));
        let s1 = tape.sum_all(x);
        let xx = tape.mul(x, x).unwrap();
        let s2 = tape.sum_all(xx);
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0, -3.0]);
    }

    #[test]
    fn kink_signature_tracks_relu_flips() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[3], &[-1.0, 0.5, 2.0]));
        let _ = tape.relu(x);
        assert_eq!(tape.kink_signature(), vec![false, true, true]);
    }
}
