//! Reverse-mode differentiation tape.
//!
//! Primitives append nodes in execution order; `backward` walks the nodes
//! once in reverse and accumulates gradients into every leaf that requires
//! them. A tape is single-use: after `backward` it rejects further ops and
//! a second `backward` with a stale-tape error.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::Tensor;

const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Statistics source for `feature_norm`.
#[derive(Debug, Clone)]
pub enum NormMode {
    /// Normalize with statistics of the current input (training).
    Batch,
    /// Normalize with frozen running statistics (inference).
    Running { mean: Arc<Vec<f64>>, var: Arc<Vec<f64>> },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Relu(NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId },
    SoftmaxRows(NodeId),
    SoftmaxGroups { x: NodeId, group: usize },
    FeatureNorm { x: NodeId, scale: NodeId, shift: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    MaxPool { x: NodeId, argmax: Vec<u32> },
    MeanPool { x: NodeId, idx: Arc<Vec<u32>>, k: usize },
    GlobalAvgPool(NodeId),
    Concat(NodeId, NodeId),
    GatherRows { x: NodeId, idx: Arc<Vec<u32>> },
    ScatterSum { x: NodeId, idx: Arc<Vec<u32>> },
    LogClamped(NodeId),
    PowScalar { x: NodeId, exponent: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Batch statistics captured by `feature_norm` for running-stat updates.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Gradient of the last `backward` target w.r.t. `id`, zeros if the
    /// node did not participate.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let v = &self.nodes[id.0].value;
                Tensor::zeros(v.rows(), v.cols())
            }
        }
    }

    /// Batch mean/variance captured by a `feature_norm` node in batch mode.
    pub fn norm_batch_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        self.nodes[id.0].batch_stats.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    /// Register a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.push(Op::Leaf, value, requires_grad, None)
    }

    fn push(
        &mut self,
        op: Op,
        value: Tensor,
        requires_grad: bool,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    ) -> Result<NodeId> {
        self.nodes.push(Node { op, value, requires_grad, batch_stats });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn record(&mut self, op: &'static str, op_node: Op, value: Tensor, requires: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.push(op_node, value, requires, None)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::StaleTape)
        } else {
            Ok(())
        }
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                msg: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                msg: format!("{:?} @ {:?}", va.shape(), vb.shape()),
            });
        }
        let out = matmul(va, vb);
        let req = self.requires(&[a, b]);
        self.record("matmul", Op::Matmul(a, b), out, req)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let req = self.requires(&[a, b]);
        self.record("add", Op::Add(a, b), out, req)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let req = self.requires(&[a, b]);
        self.record("sub", Op::Sub(a, b), out, req)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        self.same_shape("hadamard", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let req = self.requires(&[a, b]);
        self.record("hadamard", Op::Hadamard(a, b), out, req)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor::from_vec(
            v.rows(),
            v.cols(),
            v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
        )?;
        let req = self.requires(&[x]);
        self.record("relu", Op::Relu(x), out, req)
    }

    /// `x @ w + b` with the 1xM bias row added to every output row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.cols() != vw.rows() || vb.rows() != 1 || vb.cols() != vw.cols() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                msg: format!("x {:?}, w {:?}, b {:?}", vx.shape(), vw.shape(), vb.shape()),
            });
        }
        let mut out = matmul(vx, vw);
        let cols = out.cols();
        for r in 0..out.rows() {
            for c in 0..cols {
                out.data_mut()[r * cols + c] += vb.get(0, c);
            }
        }
        let req = self.requires(&[x, w, b]);
        self.record("linear", Op::Linear { x, w, b }, out, req)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let mut out = v.clone();
        let cols = out.cols();
        for r in 0..out.rows() {
            softmax_span(&mut out.data_mut()[r * cols..(r + 1) * cols], 1);
        }
        let req = self.requires(&[x]);
        self.record("softmax_rows", Op::SoftmaxRows(x), out, req)
    }

    /// Softmax over consecutive `group`-row blocks, independently per
    /// column: entry (b*group + j, c) is normalized over j.
    pub fn softmax_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if group == 0 || v.rows() % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "softmax_groups",
                msg: format!("{} rows not divisible into groups of {group}", v.rows()),
            });
        }
        let mut out = v.clone();
        let cols = out.cols();
        let span = group * cols;
        for b in 0..v.rows() / group {
            let block = &mut out.data_mut()[b * span..(b + 1) * span];
            for c in 0..cols {
                softmax_span(&mut block[c..], cols);
            }
        }
        let req = self.requires(&[x]);
        self.record("softmax_groups", Op::SoftmaxGroups { x, group }, out, req)
    }

    /// Per-feature normalization over the row (node) axis followed by a
    /// learned scale and shift.
    pub fn feature_norm(
        &mut self,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        eps: f64,
        mode: NormMode,
    ) -> Result<NodeId> {
        self.check_live()?;
        let (vx, vs, vh) = (self.value(x), self.value(scale), self.value(shift));
        let (n, cols) = vx.shape();
        if vs.shape() != (1, cols) || vh.shape() != (1, cols) {
            return Err(Error::ShapeMismatch {
                op: "feature_norm",
                msg: format!("x {:?}, scale {:?}, shift {:?}", vx.shape(), vs.shape(), vh.shape()),
            });
        }
        if n == 0 {
            return Err(Error::ShapeMismatch { op: "feature_norm", msg: "empty input".into() });
        }
        let (mean, var, batch) = match &mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                for r in 0..n {
                    for c in 0..cols {
                        mean[c] += vx.get(r, c);
                    }
                }
                for m in &mut mean {
                    *m /= n as f64;
                }
                for r in 0..n {
                    for c in 0..cols {
                        let d = vx.get(r, c) - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in &mut var {
                    *v /= n as f64;
                }
                (mean, var, true)
            }
            NormMode::Running { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::ShapeMismatch {
                        op: "feature_norm",
                        msg: format!("running stats of {} features, input has {cols}", mean.len()),
                    });
                }
                (mean.as_ref().clone(), var.as_ref().clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * cols];
        let mut out = Tensor::zeros(n, cols);
        for r in 0..n {
            for c in 0..cols {
                let h = (vx.get(r, c) - mean[c]) * inv_std[c];
                xhat[r * cols + c] = h;
                out.data_mut()[r * cols + c] = vs.get(0, c) * h + vh.get(0, c);
            }
        }
        if !out.all_finite() {
            return Err(Error::NonFinite { op: "feature_norm" });
        }
        let req = self.requires(&[x, scale, shift]);
        let stats = batch.then(|| (mean, var));
        self.push(
            Op::FeatureNorm { x, scale, shift, xhat, inv_std, batch },
            out,
            req,
            stats,
        )
    }

    /// Element-wise max over each row's index list: out[r][c] =
    /// max_j x[idx[r*k + j]][c]. Ties keep the first listed index.
    pub fn neighborhood_max_pool(&mut self, x: NodeId, idx: Arc<Vec<u32>>, k: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let (out_rows, cols) = self.pool_shape("neighborhood_max_pool", v, &idx, k)?;
        let mut out = Tensor::zeros(out_rows, cols);
        let mut argmax = vec![0u32; out_rows * cols];
        for r in 0..out_rows {
            for (slot, &src) in idx[r * k..(r + 1) * k].iter().enumerate() {
                for c in 0..cols {
                    let cand = v.get(src as usize, c);
                    let cur = out.get(r, c);
                    if slot == 0 || cand > cur {
                        out.set(r, c, cand);
                        argmax[r * cols + c] = src;
                    }
                }
            }
        }
        let req = self.requires(&[x]);
        self.record("neighborhood_max_pool", Op::MaxPool { x, argmax }, out, req)
    }

    /// Mean over each row's index list.
    pub fn neighborhood_mean(&mut self, x: NodeId, idx: Arc<Vec<u32>>, k: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let (out_rows, cols) = self.pool_shape("neighborhood_mean", v, &idx, k)?;
        let mut out = Tensor::zeros(out_rows, cols);
        for r in 0..out_rows {
            for &src in &idx[r * k..(r + 1) * k] {
                for c in 0..cols {
                    let cur = out.get(r, c);
                    out.set(r, c, cur + v.get(src as usize, c));
                }
            }
            for c in 0..cols {
                let cur = out.get(r, c);
                out.set(r, c, cur / k as f64);
            }
        }
        let req = self.requires(&[x]);
        self.record("neighborhood_mean", Op::MeanPool { x, idx, k }, out, req)
    }

    fn pool_shape(
        &self,
        op: &'static str,
        v: &Tensor,
        idx: &[u32],
        k: usize,
    ) -> Result<(usize, usize)> {
        if k == 0 || idx.len() % k != 0 {
            return Err(Error::ShapeMismatch {
                op,
                msg: format!("{} indices not divisible by k = {k}", idx.len()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= v.rows()) {
            return Err(Error::ShapeMismatch {
                op,
                msg: format!("index {bad} out of {} rows", v.rows()),
            });
        }
        Ok((idx.len() / k, v.cols()))
    }

    /// Column means over all rows, producing a 1xF row.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if v.rows() == 0 {
            return Err(Error::ShapeMismatch { op: "global_avg_pool", msg: "empty input".into() });
        }
        let mut out = Tensor::zeros(1, v.cols());
        for r in 0..v.rows() {
            for c in 0..v.cols() {
                out.data_mut()[c] += v.get(r, c);
            }
        }
        for c in out.data_mut() {
            *c /= v.rows() as f64;
        }
        let req = self.requires(&[x]);
        self.record("global_avg_pool", Op::GlobalAvgPool(x), out, req)
    }

    /// Horizontal concatenation of two equal-row tensors.
    pub fn concat_features(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_features",
                msg: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut out = Tensor::zeros(n, ca + cb);
        for r in 0..n {
            out.data_mut()[r * (ca + cb)..r * (ca + cb) + ca].copy_from_slice(va.row(r));
            out.data_mut()[r * (ca + cb) + ca..(r + 1) * (ca + cb)].copy_from_slice(vb.row(r));
        }
        let req = self.requires(&[a, b]);
        self.record("concat_features", Op::Concat(a, b), out, req)
    }

    /// out[r] = x[idx[r]].
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<u32>>) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= v.rows()) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                msg: format!("index {bad} out of {} rows", v.rows()),
            });
        }
        let cols = v.cols();
        let mut out = Tensor::zeros(idx.len(), cols);
        for (r, &src) in idx.iter().enumerate() {
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(v.row(src as usize));
        }
        let req = self.requires(&[x]);
        self.record("gather_rows", Op::GatherRows { x, idx }, out, req)
    }

    /// out has `out_rows` rows; row idx[r] accumulates x row r.
    pub fn scatter_sum(&mut self, x: NodeId, idx: Arc<Vec<u32>>, out_rows: usize) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        if idx.len() != v.rows() {
            return Err(Error::ShapeMismatch {
                op: "scatter_sum",
                msg: format!("{} indices for {} rows", idx.len(), v.rows()),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= out_rows) {
            return Err(Error::ShapeMismatch {
                op: "scatter_sum",
                msg: format!("target index {bad} out of {out_rows} rows"),
            });
        }
        let cols = v.cols();
        let mut out = Tensor::zeros(out_rows, cols);
        for (r, &dst) in idx.iter().enumerate() {
            let dst = dst as usize;
            for c in 0..cols {
                out.data_mut()[dst * cols + c] += v.get(r, c);
            }
        }
        let req = self.requires(&[x]);
        self.record("scatter_sum", Op::ScatterSum { x, idx }, out, req)
    }

    /// Natural log with the argument clamped at 1e-12.
    pub fn log_clamped(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor::from_vec(
            v.rows(),
            v.cols(),
            v.data().iter().map(|&x| x.max(LOG_CLAMP).ln()).collect(),
        )?;
        let req = self.requires(&[x]);
        self.record("log_clamped", Op::LogClamped(x), out, req)
    }

    /// Element-wise x^e for a fixed exponent.
    pub fn pow_scalar(&mut self, x: NodeId, exponent: f64) -> Result<NodeId> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor::from_vec(
            v.rows(),
            v.cols(),
            v.data().iter().map(|&x| x.powf(exponent)).collect(),
        )?;
        let req = self.requires(&[x]);
        self.record("pow_scalar", Op::PowScalar { x, exponent }, out, req)
    }

    fn add_grad(&mut self, id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gv, dv) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gv += dv;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Propagate from a scalar loss into every participating leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleTape);
        }
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "backward",
                msg: format!("loss must be scalar, got {:?}", lv.shape()),
            });
        }
        self.consumed = true;
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dy = self.grads[i].take().unwrap();
            self.propagate(i, &dy);
            self.grads[i] = Some(dy);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, dy: &Tensor) {
        // Ops only reference earlier nodes, so reading values by index
        // while mutating grads is safe through short-lived borrows.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let da = matmul_nt(dy, self.value(b));
                let db = matmul_tn(self.value(a), dy);
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, dy.clone());
                self.add_grad(b, dy.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.add_grad(a, dy.clone());
                let neg = Tensor::from_vec(dy.rows(), dy.cols(), dy.data().iter().map(|v| -v).collect()).unwrap();
                self.add_grad(b, neg);
            }
            Op::Hadamard(a, b) => {
                let (a, b) = (*a, *b);
                let da = zip_map(dy, self.value(b), |g, y| g * y);
                let db = zip_map(dy, self.value(a), |g, x| g * x);
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::Relu(x) => {
                let x = *x;
                let dx = zip_map(dy, self.value(x), |g, v| if v > 0.0 { g } else { 0.0 });
                self.add_grad(x, dx);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let dx = matmul_nt(dy, self.value(w));
                let dw = matmul_tn(self.value(x), dy);
                let mut db = Tensor::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for c in 0..dy.cols() {
                        db.data_mut()[c] += dy.get(r, c);
                    }
                }
                self.add_grad(x, dx);
                self.add_grad(w, dw);
                self.add_grad(b, db);
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let mut dx = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let dot: f64 = (0..cols).map(|c| dy.get(r, c) * y.get(r, c)).sum();
                    for c in 0..cols {
                        dx.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                    }
                }
                self.add_grad(x, dx);
            }
            Op::SoftmaxGroups { x, group } => {
                let (x, group) = (*x, *group);
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let blocks = y.rows() / group;
                let mut dx = Tensor::zeros(y.rows(), cols);
                for b in 0..blocks {
                    for c in 0..cols {
                        let dot: f64 = (0..group)
                            .map(|j| {
                                let r = b * group + j;
                                dy.get(r, c) * y.get(r, c)
                            })
                            .sum();
                        for j in 0..group {
                            let r = b * group + j;
                            dx.set(r, c, y.get(r, c) * (dy.get(r, c) - dot));
                        }
                    }
                }
                self.add_grad(x, dx);
            }
            Op::FeatureNorm { x, scale, shift, xhat, inv_std, batch } => {
                let (x, scale, shift, batch) = (*x, *scale, *shift, *batch);
                let (n, cols) = dy.shape();
                let xhat = xhat.clone();
                let inv_std = inv_std.clone();
                let sv = self.value(scale).clone();

                let mut dscale = Tensor::zeros(1, cols);
                let mut dshift = Tensor::zeros(1, cols);
                for r in 0..n {
                    for c in 0..cols {
                        dscale.data_mut()[c] += dy.get(r, c) * xhat[r * cols + c];
                        dshift.data_mut()[c] += dy.get(r, c);
                    }
                }
                let mut dx = Tensor::zeros(n, cols);
                if batch {
                    for c in 0..cols {
                        let g = sv.get(0, c);
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for r in 0..n {
                            let dh = dy.get(r, c) * g;
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * cols + c];
                        }
                        let inv_n = 1.0 / n as f64;
                        for r in 0..n {
                            let dh = dy.get(r, c) * g;
                            let h = xhat[r * cols + c];
                            dx.set(r, c, inv_std[c] * (dh - inv_n * sum_dh - h * inv_n * sum_dh_h));
                        }
                    }
                } else {
                    for c in 0..cols {
                        let g = sv.get(0, c) * inv_std[c];
                        for r in 0..n {
                            dx.set(r, c, dy.get(r, c) * g);
                        }
                    }
                }
                self.add_grad(x, dx);
                self.add_grad(scale, dscale);
                self.add_grad(shift, dshift);
            }
            Op::MaxPool { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                let src = self.value(x);
                let cols = src.cols();
                let mut dx = Tensor::zeros(src.rows(), cols);
                for r in 0..dy.rows() {
                    for c in 0..cols {
                        let winner = argmax[r * cols + c] as usize;
                        dx.data_mut()[winner * cols + c] += dy.get(r, c);
                    }
                }
                self.add_grad(x, dx);
            }
            Op::MeanPool { x, idx, k } => {
                let (x, k) = (*x, *k);
                let idx = idx.clone();
                let src = self.value(x);
                let cols = src.cols();
                let mut dx = Tensor::zeros(src.rows(), cols);
                let inv_k = 1.0 / k as f64;
                for r in 0..dy.rows() {
                    for &s in &idx[r * k..(r + 1) * k] {
                        for c in 0..cols {
                            dx.data_mut()[s as usize * cols + c] += dy.get(r, c) * inv_k;
                        }
                    }
                }
                self.add_grad(x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let x = *x;
                let src = self.value(x);
                let (n, cols) = src.shape();
                let inv_n = 1.0 / n as f64;
                let mut dx = Tensor::zeros(n, cols);
                for r in 0..n {
                    for c in 0..cols {
                        dx.set(r, c, dy.get(0, c) * inv_n);
                    }
                }
                self.add_grad(x, dx);
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.value(a).cols();
                let cb = self.value(b).cols();
                let n = dy.rows();
                let mut da = Tensor::zeros(n, ca);
                let mut db = Tensor::zeros(n, cb);
                for r in 0..n {
                    da.data_mut()[r * ca..(r + 1) * ca].copy_from_slice(&dy.row(r)[..ca]);
                    db.data_mut()[r * cb..(r + 1) * cb].copy_from_slice(&dy.row(r)[ca..]);
                }
                self.add_grad(a, da);
                self.add_grad(b, db);
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let src = self.value(x);
                let cols = src.cols();
                let mut dx = Tensor::zeros(src.rows(), cols);
                for (r, &s) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx.data_mut()[s as usize * cols + c] += dy.get(r, c);
                    }
                }
                self.add_grad(x, dx);
            }
            Op::ScatterSum { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                let src_rows = self.value(x).rows();
                let cols = dy.cols();
                let mut dx = Tensor::zeros(src_rows, cols);
                for (r, &dst) in idx.iter().enumerate() {
                    dx.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(dy.row(dst as usize));
                }
                self.add_grad(x, dx);
            }
            Op::LogClamped(x) => {
                let x = *x;
                let dx = zip_map(dy, self.value(x), |g, v| if v > LOG_CLAMP { g / v } else { 0.0 });
                self.add_grad(x, dx);
            }
            Op::PowScalar { x, exponent } => {
                let (x, e) = (*x, *exponent);
                let dx = zip_map(dy, self.value(x), |g, v| {
                    if e == 0.0 {
                        0.0
                    } else {
                        g * e * v.powf(e - 1.0)
                    }
                });
                self.add_grad(x, dx);
            }
        }
    }
}

/// In-place softmax over `data[0], data[stride], data[2*stride], ...`.
fn softmax_span(data: &mut [f64], stride: usize) {
    let mut max = f64::NEG_INFINITY;
    let mut i = 0;
    while i < data.len() {
        max = max.max(data[i]);
        i += stride;
    }
    let mut sum = 0.0;
    i = 0;
    while i < data.len() {
        data[i] = (data[i] - max).exp();
        sum += data[i];
        i += stride;
    }
    i = 0;
    while i < data.len() {
        data[i] /= sum;
        i += stride;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .unwrap()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.rows();
    let m = b.cols();
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        let orow = &mut out.data_mut()[i * m..(i + 1) * m];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data()[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// a @ b^T
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let n = a.rows();
    let m = b.rows();
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let brow = b.row(j);
            let dot: f64 = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out.set(i, j, dot);
        }
    }
    out
}

/// a^T @ b
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.shape();
    let m = b.cols();
    let mut out = Tensor::zeros(k, m);
    for i in 0..n {
        let arow = a.row(i);
        let brow = b.row(i);
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out.data_mut()[kk * m..(kk + 1) * m];
            for j in 0..m {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    /// Random values bounded away from zero, for kinked ops.
    fn rand_tensor_offset(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.05..1.0);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    /// Reduce any output to a scalar through a fixed weighting so every
    /// entry contributes a distinct gradient signal.
    fn scalarize(tape: &mut Tape, id: NodeId, weights: &Tensor) -> NodeId {
        let w = tape.constant(weights.clone()).unwrap();
        let prod = tape.hadamard(id, w).unwrap();
        let pooled = tape.global_avg_pool(prod).unwrap();
        let ones = tape.constant(Tensor::filled(weights.cols(), 1, 1.0)).unwrap();
        tape.matmul(pooled, ones).unwrap()
    }

    fn check_primitive<F>(name: &str, inputs: &[Tensor], build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let out = tape_out(&mut tape, &ids, &build);
        let mut wrng = ChaCha8Rng::seed_from_u64(0xBEEF);
        let weights = rand_tensor(&mut wrng, tape.value(out).rows(), tape.value(out).cols());
        let loss = scalarize(&mut tape, out, &weights);
        tape.backward(loss).unwrap();
        let analytic: Vec<Tensor> = ids.iter().map(|&id| tape.grad(id)).collect();

        let numeric = gradcheck::central_diff(
            inputs,
            |xs| {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = xs.iter().map(|x| t.param(x.clone()).unwrap()).collect();
                let out = tape_out(&mut t, &ids, &build);
                let loss = scalarize(&mut t, out, &weights);
                t.value(loss).item()
            },
            gradcheck::DEFAULT_STEP,
        );
        let err = gradcheck::max_rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "{name}: max relative error {err}");
    }

    fn tape_out<F>(tape: &mut Tape, ids: &[NodeId], build: &F) -> NodeId
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        build(tape, ids)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0]])).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![-1.0, 2.0]])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn max_pool_picks_neighborhood_maximum() {
        // Neighbors [1, 2] of node 0 over features [[0], [3], [5]] -> [5].
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.0], vec![3.0], vec![5.0]])).unwrap();
        let y = tape
            .neighborhood_max_pool(x, Arc::new(vec![1, 2]), 2)
            .unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn linear_map_gradient_is_the_input() {
        // loss = sum(W @ x) with x = [1, 2]: dW has [1, 2] in every row.
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![0.3, -0.2], vec![0.1, 0.4]])).unwrap();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]])).unwrap();
        let y = tape.matmul(w, x).unwrap();
        let ones = tape.constant(Tensor::from_rows(&[vec![1.0, 1.0]])).unwrap();
        let loss = tape.matmul(ones, y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn constant_loss_yields_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[vec![0.5, -0.5]])).unwrap();
        let c = tape.constant(Tensor::scalar(3.0)).unwrap();
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let loss = tape.hadamard(c, zero).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[0.0, 0.0]);
    }

    #[test]
    fn second_backward_is_a_stale_tape_error() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0)).unwrap();
        let loss = tape.hadamard(w, w).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::StaleTape)));
        assert!(matches!(tape.relu(w), Err(Error::StaleTape)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(3, 3)).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::scalar(1e308)).unwrap();
        assert!(matches!(tape.hadamard(big, big), Err(Error::NonFinite { .. })));
        assert!(tape.constant(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_lie_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, 40, 7)).unwrap();
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        for r in 0..v.rows() {
            let sum: f64 = v.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            assert!(v.row(r).iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn softmax_groups_normalizes_each_neighborhood_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, k, cols) = (5, 3, 4);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, n * k, cols)).unwrap();
        let y = tape.softmax_groups(x, k).unwrap();
        let v = tape.value(y);
        for b in 0..n {
            for c in 0..cols {
                let sum: f64 = (0..k).map(|j| v.get(b * k + j, c)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn feature_norm_centers_and_scales_the_node_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&mut rng, 128, 6)).unwrap();
        let scale = tape.constant(Tensor::filled(1, 6, 1.0)).unwrap();
        let shift = tape.constant(Tensor::zeros(1, 6)).unwrap();
        let y = tape.feature_norm(x, scale, shift, 1e-8, NormMode::Batch).unwrap();
        let v = tape.value(y);
        let n = v.rows() as f64;
        for c in 0..6 {
            let mean: f64 = (0..v.rows()).map(|r| v.get(r, c)).sum::<f64>() / n;
            let var: f64 = (0..v.rows()).map(|r| (v.get(r, c) - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "feature {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "feature {c} variance {var}");
        }
        assert!(tape.norm_batch_stats(y).is_some());
    }

    #[test]
    fn gradients_match_finite_differences_per_primitive() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let idx3 = Arc::new(vec![1u32, 2, 0, 2, 2, 1]);

        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        check_primitive("matmul", &[a, b], |t, ids| t.matmul(ids[0], ids[1]).unwrap());

        let a = rand_tensor(&mut rng, 3, 3);
        let b = rand_tensor(&mut rng, 3, 3);
        check_primitive("add", &[a.clone(), b.clone()], |t, ids| t.add(ids[0], ids[1]).unwrap());
        check_primitive("sub", &[a.clone(), b.clone()], |t, ids| t.sub(ids[0], ids[1]).unwrap());
        check_primitive("hadamard", &[a, b], |t, ids| t.hadamard(ids[0], ids[1]).unwrap());

        let x = rand_tensor_offset(&mut rng, 4, 5);
        check_primitive("relu", &[x], |t, ids| t.relu(ids[0]).unwrap());

        let x = rand_tensor(&mut rng, 5, 3);
        let w = rand_tensor(&mut rng, 3, 4);
        let bias = rand_tensor(&mut rng, 1, 4);
        check_primitive("linear", &[x, w, bias], |t, ids| t.linear(ids[0], ids[1], ids[2]).unwrap());

        let x = rand_tensor(&mut rng, 4, 5);
        check_primitive("softmax_rows", &[x], |t, ids| t.softmax_rows(ids[0]).unwrap());

        let x = rand_tensor(&mut rng, 6, 4);
        check_primitive("softmax_groups", &[x], |t, ids| t.softmax_groups(ids[0], 3).unwrap());

        let x = rand_tensor(&mut rng, 6, 3);
        let scale = rand_tensor(&mut rng, 1, 3);
        let shift = rand_tensor(&mut rng, 1, 3);
        check_primitive("feature_norm_batch", &[x, scale, shift], |t, ids| {
            t.feature_norm(ids[0], ids[1], ids[2], 1e-8, NormMode::Batch).unwrap()
        });

        let x = rand_tensor(&mut rng, 6, 3);
        let scale = rand_tensor(&mut rng, 1, 3);
        let shift = rand_tensor(&mut rng, 1, 3);
        let mean = Arc::new(vec![0.1, -0.2, 0.3]);
        let var = Arc::new(vec![0.5, 1.5, 2.0]);
        check_primitive("feature_norm_running", &[x, scale, shift], move |t, ids| {
            t.feature_norm(
                ids[0],
                ids[1],
                ids[2],
                1e-8,
                NormMode::Running { mean: mean.clone(), var: var.clone() },
            )
            .unwrap()
        });

        let x = rand_tensor(&mut rng, 3, 4);
        let idx = idx3.clone();
        check_primitive("neighborhood_max_pool", &[x], move |t, ids| {
            t.neighborhood_max_pool(ids[0], idx.clone(), 2).unwrap()
        });

        let x = rand_tensor(&mut rng, 3, 4);
        let idx = idx3.clone();
        check_primitive("neighborhood_mean", &[x], move |t, ids| {
            t.neighborhood_mean(ids[0], idx.clone(), 2).unwrap()
        });

        let x = rand_tensor(&mut rng, 5, 4);
        check_primitive("global_avg_pool", &[x], |t, ids| t.global_avg_pool(ids[0]).unwrap());

        let a = rand_tensor(&mut rng, 4, 2);
        let b = rand_tensor(&mut rng, 4, 3);
        check_primitive("concat_features", &[a, b], |t, ids| {
            t.concat_features(ids[0], ids[1]).unwrap()
        });

        let x = rand_tensor(&mut rng, 4, 3);
        let idx = Arc::new(vec![2u32, 0, 3, 3, 1]);
        check_primitive("gather_rows", &[x], move |t, ids| {
            t.gather_rows(ids[0], idx.clone()).unwrap()
        });

        let x = rand_tensor(&mut rng, 5, 3);
        let idx = Arc::new(vec![1u32, 0, 1, 2, 0]);
        check_primitive("scatter_sum", &[x], move |t, ids| {
            t.scatter_sum(ids[0], idx.clone(), 3).unwrap()
        });

        let x = Tensor::from_vec(3, 3, (0..9).map(|i| 0.1 + 0.1 * i as f64).collect()).unwrap();
        check_primitive("log_clamped", &[x], |t, ids| t.log_clamped(ids[0]).unwrap());

        let x = Tensor::from_vec(3, 3, (0..9).map(|i| 0.2 + 0.09 * i as f64).collect()).unwrap();
        check_primitive("pow_scalar", &[x], |t, ids| t.pow_scalar(ids[0], 2.0).unwrap());
        let x = Tensor::from_vec(2, 2, vec![0.3, 0.5, 0.7, 0.9]).unwrap();
        check_primitive("pow_scalar_fractional", &[x], |t, ids| {
            t.pow_scalar(ids[0], 1.7).unwrap()
        });
    }

    #[test]
    fn gradient_accumulates_over_reused_nodes() {
        // loss = x*x + x: grad = 2x + 1.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5)).unwrap();
        let sq = tape.hadamard(x, x).unwrap();
        let loss = tape.add(sq, x).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(x).item() - 4.0).abs() < 1e-12);
    }
}
