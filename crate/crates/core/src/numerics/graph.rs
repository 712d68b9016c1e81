//! Reverse-mode automatic differentiation over a fixed op set.
//!
//! The graph is eager: every op computes its value when the node is created, so
//! intermediate results can be inspected mid-build (the maxpool trainer uses
//! this to pick top-k token indices before wiring the loss). `backward`
//! replays the tape in reverse and accumulates parameter gradients by name.
//!
//! Only the ops below exist; anything else simply cannot be expressed, which
//! is the build-time error contract for unsupported operations.

use std::rc::Rc;

use indexmap::IndexMap;

use crate::numerics::kernels::{axpy, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use crate::numerics::params::ParameterStore;
use crate::numerics::real::Real;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Attention-style row masks for `softmax_rows_masked`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Row i may attend to columns j <= i.
    Causal,
    /// Row i may attend to columns in [i-w+1, i].
    Window(usize),
}

impl Mask {
    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        match *self {
            Mask::Causal => j <= i,
            Mask::Window(w) => j <= i && i < j + w,
        }
    }
}

enum Op<T: Real> {
    Input,
    Param(String),
    Matmul(NodeId, NodeId),
    /// a(m,k) × b(n,k)ᵀ
    MatmulBT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// (m,n) + row vector (n)
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Abs(NodeId),
    PowConst(NodeId, T),
    MinElem(NodeId, NodeId),
    ClampConst(NodeId, T, T),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor<T>, inv_std: Vec<T> },
    SoftmaxMasked { x: NodeId, mask: Mask },
    LogSoftmax(NodeId),
    GatherRows { x: NodeId, idx: Rc<Vec<usize>> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols(Vec<NodeId>),
    PickPerRow { x: NodeId, idx: Rc<Vec<usize>> },
    RowSums(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    MulScalarNode(NodeId, NodeId),
    BceWithLogitsMean { logits: NodeId, targets: Rc<Vec<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; gradients do not flow into it.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    pub fn scalar(&mut self, value: T) -> NodeId {
        self.input(Tensor::scalar(value))
    }

    /// Trainable leaf bound to a named parameter in a store. The value is
    /// snapshot at bind time; `backward_into` accumulates by the same name.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> NodeId {
        self.push(store.get(name).clone(), Op::Param(name.to_string()), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn_acc(va.data(), vb.data(), out.data_mut(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul(a, b), rg)
    }

    /// a(m,k) × b(n,k)ᵀ → (m,n)
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (va.rows(), va.cols());
        let (n, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_bt inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nt_acc(va.data(), vb.data(), out.data_mut(), m, k, n);
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::MatmulBT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data).unwrap();
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.scale(b, T::from_f64_c(-1.0));
        self.add(a, nb)
    }

    /// (m,n) + (n) broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let n = vx.cols();
        assert_eq!(vb.numel(), n, "bias length mismatch");
        let mut out = vx.clone();
        for r in 0..vx.rows() {
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            for (o, &bv) in row.iter_mut().zip(vb.data()) {
                *o = *o + bv;
            }
        }
        let rg = self.needs(x) || self.needs(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data).unwrap();
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v * c);
        let rg = self.needs(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v + c);
        let rg = self.needs(x);
        self.push(out, Op::AddScalar(x, c), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(gelu_tanh);
        let rg = self.needs(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(sigmoid_stable);
        let rg = self.needs(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.exp());
        let rg = self.needs(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.ln());
        let rg = self.needs(x);
        self.push(out, Op::Ln(x), rg)
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.abs());
        let rg = self.needs(x);
        self.push(out, Op::Abs(x), rg)
    }

    /// Elementwise x^p for positive x.
    pub fn pow_const(&mut self, x: NodeId, p: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| v.powf(p));
        let rg = self.needs(x);
        self.push(out, Op::PowConst(x, p), rg)
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "min_elem shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| if x <= y { x } else { y }).collect();
        let out = Tensor::from_vec(va.shape().to_vec(), data).unwrap();
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::MinElem(a, b), rg)
    }

    pub fn clamp_const(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let out = self.nodes[x.0].value.map(|v| if v < lo { lo } else if v > hi { hi } else { v });
        let rg = self.needs(x);
        self.push(out, Op::ClampConst(x, lo, hi), rg)
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        assert_eq!(self.nodes[gain.0].value.numel(), n);
        assert_eq!(self.nodes[bias.0].value.numel(), n);
        let mut xhat = Tensor::zeros(vec![m, n]);
        let mut inv_std = vec![T::zero(); m];
        let nf = T::from_f64_c(n as f64);
        for r in 0..m {
            let row = vx.row(r);
            let mut mean = T::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / nf;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / nf;
            let istd = T::one() / (var + eps).sqrt();
            inv_std[r] = istd;
            let xh = &mut xhat.data_mut()[r * n..(r + 1) * n];
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * istd;
            }
        }
        let vg = &self.nodes[gain.0].value;
        let vb = &self.nodes[bias.0].value;
        let mut out = Tensor::zeros(vec![m, n]);
        for r in 0..m {
            let xh = xhat.row(r);
            let o = &mut out.data_mut()[r * n..(r + 1) * n];
            for j in 0..n {
                o[j] = xh[j] * vg.data()[j] + vb.data()[j];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    /// Row-wise softmax over positions the mask allows; masked entries are 0.
    pub fn softmax_rows_masked(&mut self, x: NodeId, mask: Mask) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = vx.row(i);
            let mut mx = T::neg_infinity();
            for j in 0..n {
                if mask.allows(i, j) && row[j] > mx {
                    mx = row[j];
                }
            }
            let o = &mut out.data_mut()[i * n..(i + 1) * n];
            let mut z = T::zero();
            for j in 0..n {
                if mask.allows(i, j) {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    z = z + e;
                }
            }
            for v in o.iter_mut() {
                *v = *v / z;
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::SoftmaxMasked { x, mask }, rg)
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            let row = vx.row(i);
            let mut mx = T::neg_infinity();
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut z = T::zero();
            for &v in row {
                z = z + (v - mx).exp();
            }
            let lz = z.ln() + mx;
            let o = &mut out.data_mut()[i * n..(i + 1) * n];
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = v - lz;
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    /// Select rows by index (with repetition); also the embedding lookup.
    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let n = vx.cols();
        let mut out = Tensor::zeros(vec![idx.len(), n]);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < vx.rows(), "gather_rows index {i} out of {}", vx.rows());
            out.data_mut()[r * n..(r + 1) * n].copy_from_slice(vx.row(i));
        }
        let rg = self.needs(x);
        self.push(out, Op::GatherRows { x, idx: Rc::new(idx) }, rg)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Tensor::zeros(vec![m, len]);
        for r in 0..m {
            out.data_mut()[r * len..(r + 1) * len].copy_from_slice(&vx.row(r)[start..start + len]);
        }
        let rg = self.needs(x);
        self.push(out, Op::SliceCols { x, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut out = Tensor::zeros(vec![m, total]);
        let mut col = 0;
        for &p in parts {
            let vp = &self.nodes[p.0].value;
            assert_eq!(vp.rows(), m, "concat_cols row mismatch");
            let w = vp.cols();
            for r in 0..m {
                out.data_mut()[r * total + col..r * total + col + w].copy_from_slice(vp.row(r));
            }
            col += w;
        }
        let rg = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// out[r] = x[r, idx[r]] as an (m,1) column.
    pub fn pick_per_row(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert_eq!(idx.len(), vx.rows(), "pick_per_row needs one index per row");
        let data: Vec<T> = idx.iter().enumerate().map(|(r, &j)| vx.at(r, j)).collect();
        let out = Tensor::from_vec(vec![idx.len(), 1], data).unwrap();
        let rg = self.needs(x);
        self.push(out, Op::PickPerRow { x, idx: Rc::new(idx) }, rg)
    }

    /// (m,n) → (m,1) row sums.
    pub fn row_sums(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let (m, n) = (vx.rows(), vx.cols());
        let data: Vec<T> = (0..m)
            .map(|r| {
                let mut s = T::zero();
                for &v in vx.row(r) {
                    s = s + v;
                }
                let _ = n;
                s
            })
            .collect();
        let out = Tensor::from_vec(vec![m, 1], data).unwrap();
        let rg = self.needs(x);
        self.push(out, Op::RowSums(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        let mut s = T::zero();
        for &v in vx.data() {
            s = s + v;
        }
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x.0].value;
        assert!(vx.numel() > 0, "mean_all over empty tensor");
        let mut s = T::zero();
        for &v in vx.data() {
            s = s + v;
        }
        let mean = s / T::from_f64_c(vx.numel() as f64);
        let rg = self.needs(x);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), rg)
    }

    /// Multiply a tensor by a single-element node, broadcast everywhere.
    pub fn mul_scalar_node(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let sv = self.nodes[s.0].value.item();
        let out = self.nodes[x.0].value.map(|v| v * sv);
        let rg = self.needs(x) || self.needs(s);
        self.push(out, Op::MulScalarNode(x, s), rg)
    }

    /// Numerically stable mean binary cross-entropy on logits.
    pub fn bce_with_logits_mean(&mut self, logits: NodeId, targets: Vec<T>) -> NodeId {
        let vx = &self.nodes[logits.0].value;
        assert_eq!(vx.numel(), targets.len(), "bce target length mismatch");
        assert!(!targets.is_empty(), "bce over empty batch");
        let mut s = T::zero();
        for (&z, &y) in vx.data().iter().zip(targets.iter()) {
            let pos = if z > T::zero() { z } else { T::zero() };
            s = s + pos - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        let mean = s / T::from_f64_c(targets.len() as f64);
        let rg = self.needs(logits);
        self.push(Tensor::scalar(mean), Op::BceWithLogitsMean { logits, targets: Rc::new(targets) }, rg)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients for the
    /// nodes that required them.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    /// Run backward and accumulate parameter gradients into the store.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParameterStore<T>) -> crate::error::Result<()> {
        let grads = self.backward(loss);
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads.grads[id] {
                    store.accumulate_grad(name, g)?;
                }
            }
        }
        Ok(())
    }

    /// Parameter gradients keyed by name (summed over re-bound params).
    pub fn param_grads(&self, loss: NodeId) -> IndexMap<String, Tensor<T>> {
        let grads = self.backward(loss);
        let mut out: IndexMap<String, Tensor<T>> = IndexMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads.grads[id] {
                    match out.get_mut(name) {
                        Some(acc) => {
                            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a = *a + b;
                            }
                        }
                        None => {
                            out.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
        }
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let value = &self.nodes[id].value;
        match &self.nodes[id].op {
            Op::Input | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(vec![m, k]);
                    matmul_nt_acc(g.data(), vb.data(), da.data_mut(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(vec![k, n]);
                    matmul_tn_acc(va.data(), g.data(), db.data_mut(), m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatmulBT(a, b) => {
                // c(m,n) = a(m,k) b(n,k)^T
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (va.rows(), va.cols(), vb.rows());
                if self.needs(*a) {
                    let mut da = Tensor::zeros(vec![m, k]);
                    matmul_nn_acc(g.data(), vb.data(), da.data_mut(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Tensor::zeros(vec![n, k]);
                    matmul_tn_acc(g.data(), va.data(), db.data_mut(), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let n = g.cols();
                    let mut db = Tensor::zeros(vec![n]);
                    for r in 0..g.rows() {
                        axpy(T::one(), g.row(r), db.data_mut());
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let vb = &self.nodes[b.0].value;
                    let data = g.data().iter().zip(vb.data()).map(|(&gv, &bv)| gv * bv).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
                }
                if self.needs(*b) {
                    let va = &self.nodes[a.0].value;
                    let data = g.data().iter().zip(va.data()).map(|(&gv, &av)| gv * av).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * *c));
            }
            Op::AddScalar(x, _) => {
                self.accumulate(grads, *x, g.clone());
            }
            Op::Gelu(x) => {
                let vx = &self.nodes[x.0].value;
                let data = g.data().iter().zip(vx.data()).map(|(&gv, &xv)| gv * gelu_tanh_grad(xv)).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::Relu(x) => {
                let vx = &self.nodes[x.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::Sigmoid(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(value.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::Exp(x) => {
                let data = g.data().iter().zip(value.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::Ln(x) => {
                let vx = &self.nodes[x.0].value;
                let data = g.data().iter().zip(vx.data()).map(|(&gv, &xv)| gv / xv).collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::Abs(x) => {
                let vx = &self.nodes[x.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::PowConst(x, p) => {
                let vx = &self.nodes[x.0].value;
                let pm1 = *p - T::one();
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| gv * *p * xv.powf(pm1))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::MinElem(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&gv, (&av, &bv))| if av <= bv { gv } else { T::zero() })
                        .collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
                }
                if self.needs(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(&gv, (&av, &bv))| if av <= bv { T::zero() } else { gv })
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
                }
            }
            Op::ClampConst(x, lo, hi) => {
                let vx = &self.nodes[x.0].value;
                let data = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape().to_vec(), data).unwrap());
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = (xhat.rows(), xhat.cols());
                let vg = &self.nodes[gain.0].value;
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(vec![m, n]);
                    let nf = T::from_f64_c(n as f64);
                    for r in 0..m {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        // dxhat = dy * gain
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..n {
                            let dxh = gr[j] * vg.data()[j];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xr[j];
                        }
                        let mean_dxhat = sum_dxhat / nf;
                        let mean_dxhat_xhat = sum_dxhat_xhat / nf;
                        let o = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for j in 0..n {
                            let dxh = gr[j] * vg.data()[j];
                            o[j] = inv_std[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*gain) {
                    let mut dg = Tensor::zeros(vec![n]);
                    for r in 0..m {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        for j in 0..n {
                            dg.data_mut()[j] = dg.data()[j] + gr[j] * xr[j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = Tensor::zeros(vec![n]);
                    for r in 0..m {
                        axpy(T::one(), g.row(r), db.data_mut());
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::SoftmaxMasked { x, mask } => {
                let (m, n) = (value.rows(), value.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let y = value.row(i);
                    let gr = g.row(i);
                    let mut dotv = T::zero();
                    for j in 0..n {
                        dotv = dotv + gr[j] * y[j];
                    }
                    let o = &mut dx.data_mut()[i * n..(i + 1) * n];
                    for j in 0..n {
                        if mask.allows(i, j) {
                            o[j] = y[j] * (gr[j] - dotv);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmax(x) => {
                let (m, n) = (value.rows(), value.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for i in 0..m {
                    let gr = g.row(i);
                    let mut gsum = T::zero();
                    for &v in gr {
                        gsum = gsum + v;
                    }
                    let o = &mut dx.data_mut()[i * n..(i + 1) * n];
                    let yr = value.row(i);
                    for j in 0..n {
                        o[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GatherRows { x, idx } => {
                let vx = &self.nodes[x.0].value;
                let n = vx.cols();
                let mut dx = Tensor::zeros(vec![vx.rows(), n]);
                for (r, &i) in idx.iter().enumerate() {
                    axpy(T::one(), g.row(r), &mut dx.data_mut()[i * n..(i + 1) * n]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let vx = &self.nodes[x.0].value;
                let (m, n) = (vx.rows(), vx.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    dx.data_mut()[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let m = value.rows();
                let total = value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    if self.needs(p) {
                        let mut dp = Tensor::zeros(vec![m, w]);
                        for r in 0..m {
                            dp.data_mut()[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + col..r * total + col + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    col += w;
                }
            }
            Op::PickPerRow { x, idx } => {
                let vx = &self.nodes[x.0].value;
                let (m, n) = (vx.rows(), vx.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for (r, &j) in idx.iter().enumerate() {
                    dx.data_mut()[r * n + j] = g.data()[r];
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowSums(x) => {
                let vx = &self.nodes[x.0].value;
                let (m, n) = (vx.rows(), vx.cols());
                let mut dx = Tensor::zeros(vec![m, n]);
                for r in 0..m {
                    let gv = g.data()[r];
                    for v in dx.data_mut()[r * n..(r + 1) * n].iter_mut() {
                        *v = gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let vx = &self.nodes[x.0].value;
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(vx.shape().to_vec(), gv));
            }
            Op::MeanAll(x) => {
                let vx = &self.nodes[x.0].value;
                let gv = g.item() / T::from_f64_c(vx.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(vx.shape().to_vec(), gv));
            }
            Op::MulScalarNode(x, s) => {
                let sv = self.nodes[s.0].value.item();
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * sv));
                }
                if self.needs(*s) {
                    let vx = &self.nodes[x.0].value;
                    let mut acc = T::zero();
                    for (&gv, &xv) in g.data().iter().zip(vx.data()) {
                        acc = acc + gv * xv;
                    }
                    self.accumulate(grads, *s, Tensor::scalar(acc));
                }
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let vx = &self.nodes[logits.0].value;
                let scale = g.item() / T::from_f64_c(targets.len() as f64);
                let data = vx
                    .data()
                    .iter()
                    .zip(targets.iter())
                    .map(|(&z, &y)| scale * (sigmoid_stable(z) - y))
                    .collect();
                self.accumulate(grads, *logits, Tensor::from_vec(vx.shape().to_vec(), data).unwrap());
            }
        }
    }
}

pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

fn sigmoid_stable<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// tanh-approximation GELU, matching the usual transformer MLP activation.
fn gelu_tanh<T: Real>(x: T) -> T {
    let c = T::from_f64_c(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64_c(0.044715);
    let half = T::from_f64_c(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_tanh_grad<T: Real>(x: T) -> T {
    let c = T::from_f64_c(0.7978845608028654);
    let a = T::from_f64_c(0.044715);
    let half = T::from_f64_c(0.5);
    let three_a = T::from_f64_c(3.0 * 0.044715);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three_a * x * x)
}

/// Convenience free function mirroring the probe forward's sigmoid.
pub fn sigmoid<T: Real>(z: T) -> T {
    sigmoid_stable(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_random_coords, finite_difference_gradient, max_rel_err};
    use crate::numerics::rng::RngState;

    fn store_from(parts: &[(&str, Vec<usize>, f64)]) -> ParameterStore<f64> {
        let mut rng = RngState::new(91);
        let mut store = ParameterStore::new();
        for (name, shape, scale) in parts {
            let t = rng.normal_tensor(shape.clone(), 1.0).to_f64().map(|v| v * scale);
            store.insert(name, t);
        }
        store
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::from_vec(vec![4], vec![0.3, -1.2, 4.5, 0.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let loss = g.sum_all(w);
        let grads = g.param_grads(loss);
        assert_eq!(grads["w"].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_half_norm_sq_is_w() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::from_vec(vec![3], vec![0.5, -2.0, 3.0]).unwrap());
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let sq = g.mul(w, w);
        let s = g.sum_all(sq);
        let loss = g.scale(s, 0.5);
        let grads = g.param_grads(loss);
        for (got, want) in grads["w"].data().iter().zip(store.get("w").data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    /// Random 3-layer MLP loss: gradients match central differences.
    #[test]
    fn mlp_matches_finite_differences() {
        let store = store_from(&[
            ("w1", vec![5, 8], 0.6),
            ("b1", vec![8], 0.2),
            ("w2", vec![8, 7], 0.6),
            ("b2", vec![7], 0.2),
            ("w3", vec![7, 1], 0.6),
        ]);
        let x = RngState::new(5).normal_tensor(vec![4, 5], 1.0).to_f64();
        let build = |p: &ParameterStore<f64>| -> (Graph<f64>, NodeId) {
            let mut g = Graph::new();
            let xin = g.input(x.clone());
            let w1 = g.param(p, "w1");
            let b1 = g.param(p, "b1");
            let w2 = g.param(p, "w2");
            let b2 = g.param(p, "b2");
            let w3 = g.param(p, "w3");
            let h1 = g.matmul(xin, w1);
            let h1 = g.add_bias(h1, b1);
            let h1 = g.gelu(h1);
            let h2 = g.matmul(h1, w2);
            let h2 = g.add_bias(h2, b2);
            let h2 = g.sigmoid(h2);
            let h3 = g.matmul(h2, w3);
            let sq = g.mul(h3, h3);
            let loss = g.mean_all(sq);
            (g, loss)
        };
        let (g, loss) = build(&store);
        let analytic = g.param_grads(loss);
        let mut f = |p: &ParameterStore<f64>| {
            let (g, loss) = build(p);
            g.value(loss).item()
        };
        let mut rng = RngState::new(17);
        let checks = check_random_coords(&mut f, &store, &analytic, 100, 1e-3, &mut rng);
        assert!(max_rel_err(&checks) < 1e-3, "max rel err {}", max_rel_err(&checks));
    }

    /// One gradcheck per op family that has a non-trivial backward rule.
    #[test]
    fn op_gradients_match_finite_differences() {
        let store = store_from(&[
            ("a", vec![3, 4], 0.8),
            ("b", vec![4, 5], 0.8),
            ("bt", vec![5, 4], 0.8),
            ("bias", vec![5], 0.3),
            ("g", vec![4], 0.7),
            ("gb", vec![4], 0.2),
            ("sc", vec![1], 0.9),
        ]);
        type Build = fn(&mut Graph<f64>, &ParameterStore<f64>) -> NodeId;
        let builds: Vec<(&str, Build)> = vec![
            ("matmul", |g, p| {
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let c = g.matmul(a, b);
                let c = g.exp(c);
                g.mean_all(c)
            }),
            ("matmul_bt", |g, p| {
                let a = g.param(p, "a");
                let b = g.param(p, "bt");
                let c = g.matmul_bt(a, b);
                let c = g.sigmoid(c);
                g.mean_all(c)
            }),
            ("add_bias_relu", |g, p| {
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let c = g.matmul(a, b);
                let bias = g.param(p, "bias");
                let c = g.add_bias(c, bias);
                let c = g.relu(c);
                let c = g.mul(c, c);
                g.sum_all(c)
            }),
            ("layer_norm", |g, p| {
                let a = g.param(p, "a");
                let gain = g.param(p, "g");
                let bias = g.param(p, "gb");
                let y = g.layer_norm(a, gain, bias, 1e-5);
                let y = g.gelu(y);
                g.mean_all(y)
            }),
            ("softmax_causal", |g, p| {
                let a = g.param(p, "a");
                let s = g.matmul_bt(a, a);
                let y = g.softmax_rows_masked(s, Mask::Causal);
                let y = g.ln(y); // only unmasked entries feed the loss
                let picked = g.pick_per_row(y, vec![0, 1, 2]);
                g.sum_all(picked)
            }),
            ("softmax_window", |g, p| {
                let a = g.param(p, "a");
                let s = g.matmul_bt(a, a);
                let y = g.softmax_rows_masked(s, Mask::Window(2));
                let picked = g.pick_per_row(y, vec![0, 0, 1]);
                g.sum_all(picked)
            }),
            ("log_softmax_pick", |g, p| {
                let a = g.param(p, "a");
                let y = g.log_softmax_rows(a);
                let picked = g.pick_per_row(y, vec![1, 3, 0]);
                g.mean_all(picked)
            }),
            ("gather_slice_concat", |g, p| {
                let a = g.param(p, "a");
                let gathered = g.gather_rows(a, vec![2, 0, 0, 1]);
                let left = g.slice_cols(gathered, 0, 2);
                let right = g.slice_cols(gathered, 2, 2);
                let cat = g.concat_cols(&[right, left]);
                let e = g.exp(cat);
                g.mean_all(e)
            }),
            ("min_clamp_abs", |g, p| {
                let a = g.param(p, "a");
                let b = g.param(p, "bt");
                let c = g.matmul_bt(a, b);
                let cl = g.clamp_const(c, -0.45, 0.55);
                let m = g.min_elem(c, cl);
                let m = g.abs(m);
                g.sum_all(m)
            }),
            ("rowsums_pow_scalar", |g, p| {
                let a = g.param(p, "a");
                let sq = g.mul(a, a);
                let rs = g.row_sums(sq);
                let rs = g.add_scalar(rs, 0.1);
                let pw = g.pow_const(rs, -0.5);
                let s = g.param(p, "sc");
                let scaled = g.mul_scalar_node(pw, s);
                g.sum_all(scaled)
            }),
            ("bce_with_logits", |g, p| {
                let a = g.param(p, "a");
                let b = g.param(p, "b");
                let z = g.matmul(a, b);
                g.bce_with_logits_mean(z, vec![
                    1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0,
                ])
            }),
        ];
        for (name, build) in builds {
            let mut g = Graph::new();
            let loss = build(&mut g, &store);
            let analytic = g.param_grads(loss);
            let mut f = |p: &ParameterStore<f64>| {
                let mut g = Graph::new();
                let loss = build(&mut g, p);
                g.value(loss).item()
            };
            let mut rng = RngState::new(23);
            let checks = check_random_coords(&mut f, &store, &analytic, 60, 1e-4, &mut rng);
            let err = max_rel_err(&checks);
            assert!(err < 1e-3, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn reused_param_accumulates_both_paths() {
        // loss = sum(w·wᵀ) uses w twice; d/dw = 2·(col sums broadcast)
        let mut store = ParameterStore::<f64>::new();
        store.insert("w", Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let build = |p: &ParameterStore<f64>| {
            let mut g = Graph::new();
            let w1 = g.param(p, "w");
            let w2 = g.param(p, "w");
            let prod = g.matmul_bt(w1, w2);
            let loss = g.sum_all(prod);
            (g, loss)
        };
        let (g, loss) = build(&store);
        let analytic = g.param_grads(loss);
        let mut f = |p: &ParameterStore<f64>| {
            let (g, loss) = build(p);
            g.value(loss).item()
        };
        let fd = finite_difference_gradient(&mut f, &store, 1e-5);
        for (a, b) in analytic["w"].data().iter().zip(fd["w"].data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn no_grad_inputs_short_circuit() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mul(x, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn forward_values_finite_on_extreme_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_vec(vec![2, 3], vec![1000.0, -1000.0, 0.0, 50.0, 49.0, -80.0]).unwrap());
        let ls = g.log_softmax_rows(x);
        assert!(g.value(ls).is_finite());
        let sm = g.softmax_rows_masked(x, Mask::Causal);
        assert!(g.value(sm).is_finite());
        let sg = g.sigmoid(x);
        assert!(g.value(sg).is_finite());
    }
}
