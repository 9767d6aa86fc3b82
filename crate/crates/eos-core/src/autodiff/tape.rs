//! Eager Wengert tape with a node-building backward pass.
//!
//! Ops compute their forward value when recorded. `backward` walks the tape
//! in reverse and emits the adjoint computations as *new tape nodes*, so the
//! gradient is itself a differentiable function of the parameter leaves. The
//! primitive set is closed under this construction: every op's VJP is
//! expressed with ops from the same set, bottoming out in mask ops whose
//! derivative is identically zero.

use std::sync::Arc;

use super::kernels;
use super::{AdError, Layout, ParamVector, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad(NodeId),
    Reshape(NodeId),
    Neg(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarMul(NodeId, f32),
    AddScalar(NodeId, f32),
    Recip(NodeId),
    Log(NodeId),
    Relu(NodeId),
    ReluMask(NodeId),
    /// g ⊙ (x > 0): the ReLU adjoint in one op.
    ReluBack { g: NodeId, x: NodeId },
    Huber(NodeId),
    HuberDeriv(NodeId),
    QuadMask(NodeId),
    MatMul(NodeId, NodeId),
    /// aᵀ·b without materializing the transpose.
    MatMulATB(NodeId, NodeId),
    Transpose(NodeId),
    Corr2d { x: NodeId, k: NodeId },
    ZeroPad2d { x: NodeId, ph: usize, pw: usize },
    Crop2d { x: NodeId, ph: usize, pw: usize },
    FlipKernel(NodeId),
    KernelGrad { x: NodeId, dy: NodeId, kh: usize, kw: usize },
    RepeatRows { v: NodeId, rows: usize },
    /// x[R,C] + v[C] broadcast over rows.
    AddRowVec { x: NodeId, v: NodeId },
    ColSum(NodeId),
    ChanBroadcast { v: NodeId, b: usize, h: usize, w: usize },
    /// x[B,H,W,C] + v[C] broadcast over all leading dims.
    AddChanBias { x: NodeId, v: NodeId },
    ChanSum(NodeId),
    RowSum(NodeId),
    RowBroadcast { v: NodeId, cols: usize },
    SumAll(NodeId),
    BroadcastScalar { s: NodeId, shape: Vec<usize> },
    Softmax(NodeId),
    LogSumExp(NodeId),
    MaxRow { x: NodeId, argmax: Arc<Vec<u32>> },
    GatherRows { x: NodeId, idx: Arc<Vec<u32>>, block: usize },
    ScatterRows { v: NodeId, idx: Arc<Vec<u32>>, groups: usize },
    Dot(NodeId, NodeId),
    ScaleByNode { s: NodeId, x: NodeId },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Ordered list of primitive operations; topological by construction since
/// an op can only reference already-recorded nodes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

macro_rules! shape_err {
    ($op:expr, $($arg:tt)*) => {
        AdError::ShapeMismatch { op: $op, detail: format!($($arg)*) }
    };
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded at or after `watermark`.
    pub fn truncate(&mut self, watermark: usize) {
        self.nodes.truncate(watermark);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.idx()].value.shape()
    }

    fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    /// Constant input: no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Parameter leaf: gradients and HVPs are taken with respect to these.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.idx()].value.clone();
        self.push(Op::StopGrad(x), value, false)
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        if shape.iter().product::<usize>() != v.numel() {
            return Err(shape_err!("reshape", "{:?} -> {:?}", v.shape(), shape));
        }
        let value = v.reshaped(shape);
        let ng = self.needs_grad(x);
        Ok(self.push(Op::Reshape(x), value, ng))
    }

    fn unary_elementwise(
        &mut self,
        x: NodeId,
        op: impl FnOnce(NodeId) -> Op,
        f: impl (Fn(f32) -> f32) + Sync,
        propagates: bool,
    ) -> NodeId {
        let v = &self.nodes[x.idx()].value;
        let data = map_maybe_parallel(v.data(), f);
        let value = Tensor::new(v.shape().to_vec(), data);
        let ng = propagates && self.needs_grad(x);
        self.push(op(x), value, ng)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Neg, |a| -a, true)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Recip, |a| 1.0 / a, true)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Log, |a| a.ln(), true)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Relu, |a| a.max(0.0), true)
    }

    /// 1 where x > 0, else 0. Derivative-free: the subgradient of ReLU is
    /// treated as constant, so no adjoint flows through the mask itself.
    pub fn relu_mask(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::ReluMask, |a| if a > 0.0 { 1.0 } else { 0.0 }, false)
    }

    /// Fused ReLU adjoint: out = g where x > 0, else 0. Only `g` receives
    /// gradient (the mask factor is piecewise constant).
    pub fn relu_back(&mut self, g: NodeId, x: NodeId) -> Result<NodeId, AdError> {
        let (vg, vx) = (&self.nodes[g.idx()].value, &self.nodes[x.idx()].value);
        if vg.shape() != vx.shape() {
            return Err(shape_err!("relu_back", "{:?} vs {:?}", vg.shape(), vx.shape()));
        }
        let data =
            zip_maybe_parallel(vg.data(), vx.data(), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
        let value = Tensor::new(vg.shape().to_vec(), data);
        let ng = self.needs_grad(g);
        Ok(self.push(Op::ReluBack { g, x }, value, ng))
    }

    pub fn huber(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::Huber, kernels::huber, true)
    }

    pub fn huber_deriv(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::HuberDeriv, kernels::huber_deriv, true)
    }

    /// 1 on the quadratic branch of the Huber loss (x² ≤ 1), else 0.
    pub fn quad_mask(&mut self, x: NodeId) -> NodeId {
        self.unary_elementwise(x, Op::QuadMask, |a| if a * a <= 1.0 { 1.0 } else { 0.0 }, false)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary_elementwise(x, |n| Op::ScalarMul(n, c), |a| a * c, true)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        self.unary_elementwise(x, |n| Op::AddScalar(n, c), |a| a + c, true)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        op: fn(NodeId, NodeId) -> Op,
        f: impl (Fn(f32, f32) -> f32) + Sync,
    ) -> Result<NodeId, AdError> {
        let (va, vb) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        if va.shape() != vb.shape() {
            return Err(shape_err!(name, "{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = zip_maybe_parallel(va.data(), vb.data(), f);
        let value = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(op(a, b), value, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary_elementwise("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary_elementwise("sub", a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.binary_elementwise("mul", a, b, Op::Mul, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        match (va.shape(), vb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => {
                let data = kernels::matmul(va.data(), vb.data(), m, k, n);
                let value = Tensor::new(vec![m, n], data);
                let ng = self.needs_grad(a) || self.needs_grad(b);
                Ok(self.push(Op::MatMul(a, b), value, ng))
            }
            (sa, sb) => Err(shape_err!("matmul", "{:?} x {:?}", sa, sb)),
        }
    }

    /// out = aᵀ·b for a[k,m], b[k,n].
    pub fn matmul_atb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        match (va.shape(), vb.shape()) {
            (&[k, m], &[k2, n]) if k == k2 => {
                let data = kernels::matmul_atb(va.data(), vb.data(), k, m, n);
                let value = Tensor::new(vec![m, n], data);
                let ng = self.needs_grad(a) || self.needs_grad(b);
                Ok(self.push(Op::MatMulATB(a, b), value, ng))
            }
            (sa, sb) => Err(shape_err!("matmul_atb", "{:?}ᵀ x {:?}", sa, sb)),
        }
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[r, c] => {
                let value = Tensor::new(vec![c, r], kernels::transpose(v.data(), r, c));
                let ng = self.needs_grad(x);
                Ok(self.push(Op::Transpose(x), value, ng))
            }
            s => Err(shape_err!("transpose", "expected rank 2, got {:?}", s)),
        }
    }

    pub fn corr2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId, AdError> {
        let (vx, vk) = (&self.nodes[x.idx()].value, &self.nodes[k.idx()].value);
        match (vx.shape(), vk.shape()) {
            (&[b, h, w, ci], &[kh, kw, ci2, co]) if ci == ci2 && kh <= h && kw <= w => {
                let data = kernels::corr2d(vx.data(), vk.data(), b, h, w, ci, kh, kw, co);
                let value = Tensor::new(vec![b, h - kh + 1, w - kw + 1, co], data);
                let ng = self.needs_grad(x) || self.needs_grad(k);
                Ok(self.push(Op::Corr2d { x, k }, value, ng))
            }
            (sx, sk) => Err(shape_err!("corr2d", "input {:?}, kernel {:?}", sx, sk)),
        }
    }

    pub fn zero_pad2d(&mut self, x: NodeId, ph: usize, pw: usize) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[b, h, w, c] => {
                let data = kernels::zero_pad2d(v.data(), b, h, w, c, ph, pw);
                let value = Tensor::new(vec![b, h + 2 * ph, w + 2 * pw, c], data);
                let ng = self.needs_grad(x);
                Ok(self.push(Op::ZeroPad2d { x, ph, pw }, value, ng))
            }
            s => Err(shape_err!("zero_pad2d", "expected rank 4, got {:?}", s)),
        }
    }

    pub fn crop2d(&mut self, x: NodeId, ph: usize, pw: usize) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[b, h, w, c] if h > 2 * ph && w > 2 * pw => {
                let data = kernels::crop2d(v.data(), b, h, w, c, ph, pw);
                let value = Tensor::new(vec![b, h - 2 * ph, w - 2 * pw, c], data);
                let ng = self.needs_grad(x);
                Ok(self.push(Op::Crop2d { x, ph, pw }, value, ng))
            }
            s => Err(shape_err!("crop2d", "cannot crop {:?} by ({}, {})", s, ph, pw)),
        }
    }

    pub fn flip_kernel(&mut self, k: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[k.idx()].value;
        match v.shape() {
            &[kh, kw, ci, co] => {
                let data = kernels::flip_kernel(v.data(), kh, kw, ci, co);
                let value = Tensor::new(vec![kh, kw, co, ci], data);
                let ng = self.needs_grad(k);
                Ok(self.push(Op::FlipKernel(k), value, ng))
            }
            s => Err(shape_err!("flip_kernel", "expected rank 4, got {:?}", s)),
        }
    }

    pub fn kernel_grad(&mut self, x: NodeId, dy: NodeId, kh: usize, kw: usize) -> Result<NodeId, AdError> {
        let (vx, vdy) = (&self.nodes[x.idx()].value, &self.nodes[dy.idx()].value);
        match (vx.shape(), vdy.shape()) {
            (&[b, h, w, ci], &[b2, ho, wo, co])
                if b == b2 && ho == h - kh + 1 && wo == w - kw + 1 =>
            {
                let data = kernels::kernel_grad(vx.data(), vdy.data(), b, h, w, ci, kh, kw, co);
                let value = Tensor::new(vec![kh, kw, ci, co], data);
                let ng = self.needs_grad(x) || self.needs_grad(dy);
                Ok(self.push(Op::KernelGrad { x, dy, kh, kw }, value, ng))
            }
            (sx, sd) => Err(shape_err!("kernel_grad", "input {:?}, upstream {:?}", sx, sd)),
        }
    }

    pub fn repeat_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId, AdError> {
        let t = &self.nodes[v.idx()].value;
        match t.shape() {
            &[c] => {
                let mut data = Vec::with_capacity(rows * c);
                for _ in 0..rows {
                    data.extend_from_slice(t.data());
                }
                let value = Tensor::new(vec![rows, c], data);
                let ng = self.needs_grad(v);
                Ok(self.push(Op::RepeatRows { v, rows }, value, ng))
            }
            s => Err(shape_err!("repeat_rows", "expected rank 1, got {:?}", s)),
        }
    }

    /// x[R,C] + v[C], broadcasting v across rows without materializing it.
    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, AdError> {
        let (vx, vv) = (&self.nodes[x.idx()].value, &self.nodes[v.idx()].value);
        match (vx.shape(), vv.shape()) {
            (&[r, c], &[c2]) if c == c2 => {
                let mut data = vx.data().to_vec();
                for row in data.chunks_exact_mut(c) {
                    for (o, &bv) in row.iter_mut().zip(vv.data()) {
                        *o += bv;
                    }
                }
                let value = Tensor::new(vec![r, c], data);
                let ng = self.needs_grad(x) || self.needs_grad(v);
                Ok(self.push(Op::AddRowVec { x, v }, value, ng))
            }
            (sx, sv) => Err(shape_err!("add_row_vec", "{:?} + {:?}", sx, sv)),
        }
    }

    /// x[B,H,W,C] + v[C], broadcast over every leading dim.
    pub fn add_chan_bias(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, AdError> {
        let (vx, vv) = (&self.nodes[x.idx()].value, &self.nodes[v.idx()].value);
        match (vx.shape(), vv.shape()) {
            (&[b, h, w, c], &[c2]) if c == c2 => {
                let mut data = vx.data().to_vec();
                for row in data.chunks_exact_mut(c) {
                    for (o, &bv) in row.iter_mut().zip(vv.data()) {
                        *o += bv;
                    }
                }
                let value = Tensor::new(vec![b, h, w, c], data);
                let ng = self.needs_grad(x) || self.needs_grad(v);
                Ok(self.push(Op::AddChanBias { x, v }, value, ng))
            }
            (sx, sv) => Err(shape_err!("add_chan_bias", "{:?} + {:?}", sx, sv)),
        }
    }

    pub fn col_sum(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[r, c] => {
                let value = Tensor::new(vec![c], kernels::col_sum(v.data(), r, c));
                let ng = self.needs_grad(x);
                Ok(self.push(Op::ColSum(x), value, ng))
            }
            s => Err(shape_err!("col_sum", "expected rank 2, got {:?}", s)),
        }
    }

    pub fn chan_broadcast(&mut self, v: NodeId, b: usize, h: usize, w: usize) -> Result<NodeId, AdError> {
        let t = &self.nodes[v.idx()].value;
        match t.shape() {
            &[c] => {
                let mut data = Vec::with_capacity(b * h * w * c);
                for _ in 0..b * h * w {
                    data.extend_from_slice(t.data());
                }
                let value = Tensor::new(vec![b, h, w, c], data);
                let ng = self.needs_grad(v);
                Ok(self.push(Op::ChanBroadcast { v, b, h, w }, value, ng))
            }
            s => Err(shape_err!("chan_broadcast", "expected rank 1, got {:?}", s)),
        }
    }

    pub fn chan_sum(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[b, h, w, c] => {
                let value = Tensor::new(vec![c], kernels::col_sum(v.data(), b * h * w, c));
                let ng = self.needs_grad(x);
                Ok(self.push(Op::ChanSum(x), value, ng))
            }
            s => Err(shape_err!("chan_sum", "expected rank 4, got {:?}", s)),
        }
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[r, c] => {
                let value = Tensor::new(vec![r], kernels::row_sum(v.data(), r, c));
                let ng = self.needs_grad(x);
                Ok(self.push(Op::RowSum(x), value, ng))
            }
            s => Err(shape_err!("row_sum", "expected rank 2, got {:?}", s)),
        }
    }

    pub fn row_broadcast(&mut self, v: NodeId, cols: usize) -> Result<NodeId, AdError> {
        let t = &self.nodes[v.idx()].value;
        match t.shape() {
            &[r] => {
                let mut data = Vec::with_capacity(r * cols);
                for &x in t.data() {
                    data.extend(std::iter::repeat(x).take(cols));
                }
                let value = Tensor::new(vec![r, cols], data);
                let ng = self.needs_grad(v);
                Ok(self.push(Op::RowBroadcast { v, cols }, value, ng))
            }
            s => Err(shape_err!("row_broadcast", "expected rank 1, got {:?}", s)),
        }
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.idx()].value;
        let value = Tensor::scalar(kernels::sum_all(v.data()));
        let ng = self.needs_grad(x);
        self.push(Op::SumAll(x), value, ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.idx()].value.numel();
        let s = self.sum_all(x);
        self.scalar_mul(s, 1.0 / n as f32)
    }

    pub fn broadcast_scalar(&mut self, s: NodeId, shape: Vec<usize>) -> Result<NodeId, AdError> {
        let t = &self.nodes[s.idx()].value;
        if !t.is_scalar() {
            return Err(shape_err!("broadcast_scalar", "source has shape {:?}", t.shape()));
        }
        let n: usize = shape.iter().product();
        let value = Tensor::new(shape.clone(), vec![t.item(); n]);
        let ng = self.needs_grad(s);
        Ok(self.push(Op::BroadcastScalar { s, shape }, value, ng))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[r, c] => {
                let value = Tensor::new(vec![r, c], kernels::softmax_rows(v.data(), r, c));
                let ng = self.needs_grad(x);
                Ok(self.push(Op::Softmax(x), value, ng))
            }
            s => Err(shape_err!("softmax", "expected rank 2, got {:?}", s)),
        }
    }

    pub fn logsumexp(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[r, c] => {
                let value = Tensor::new(vec![r], kernels::logsumexp_rows(v.data(), r, c));
                let ng = self.needs_grad(x);
                Ok(self.push(Op::LogSumExp(x), value, ng))
            }
            s => Err(shape_err!("logsumexp", "expected rank 2, got {:?}", s)),
        }
    }

    /// Row-wise max with the subgradient routed to the lowest winning index.
    pub fn max_row(&mut self, x: NodeId) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[r, c] => {
                let (vals, idx) = kernels::max_rows(v.data(), r, c);
                let value = Tensor::new(vec![r], vals);
                let ng = self.needs_grad(x);
                Ok(self.push(Op::MaxRow { x, argmax: Arc::new(idx) }, value, ng))
            }
            s => Err(shape_err!("max_row", "expected rank 2, got {:?}", s)),
        }
    }

    /// Per-row block gather: out[r] = x[r, idx[r]*block .. (idx[r]+1)*block].
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<u32>>, block: usize) -> Result<NodeId, AdError> {
        let v = &self.nodes[x.idx()].value;
        match v.shape() {
            &[r, total] if r == idx.len() && total % block == 0 => {
                let groups = total / block;
                if let Some(&bad) = idx.iter().find(|&&i| i as usize >= groups) {
                    return Err(shape_err!("gather_rows", "index {} out of {} groups", bad, groups));
                }
                let mut data = Vec::with_capacity(r * block);
                for (row, &i) in v.data().chunks_exact(total).zip(idx.iter()) {
                    data.extend_from_slice(&row[i as usize * block..(i as usize + 1) * block]);
                }
                let value = Tensor::new(vec![r, block], data);
                let ng = self.needs_grad(x);
                Ok(self.push(Op::GatherRows { x, idx, block }, value, ng))
            }
            s => Err(shape_err!("gather_rows", "shape {:?}, {} indices, block {}", s, idx.len(), block)),
        }
    }

    /// Per-row block scatter into a zero tensor of `groups` blocks; the
    /// adjoint of [`Tape::gather_rows`].
    pub fn scatter_rows(&mut self, v: NodeId, idx: Arc<Vec<u32>>, groups: usize) -> Result<NodeId, AdError> {
        let t = &self.nodes[v.idx()].value;
        match t.shape() {
            &[r, block] if r == idx.len() => {
                let mut data = vec![0.0f32; r * groups * block];
                for ((row_out, row_in), &i) in
                    data.chunks_exact_mut(groups * block).zip(t.data().chunks_exact(block)).zip(idx.iter())
                {
                    row_out[i as usize * block..(i as usize + 1) * block].copy_from_slice(row_in);
                }
                let value = Tensor::new(vec![r, groups * block], data);
                let ng = self.needs_grad(v);
                Ok(self.push(Op::ScatterRows { v, idx, groups }, value, ng))
            }
            s => Err(shape_err!("scatter_rows", "shape {:?}, {} indices", s, idx.len())),
        }
    }

    /// Full inner product of two equal-shaped tensors, yielding a scalar node.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        let (va, vb) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
        if va.numel() != vb.numel() {
            return Err(shape_err!("dot", "{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let value = Tensor::scalar(kernels::dot(va.data(), vb.data()));
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Dot(a, b), value, ng))
    }

    /// Scales a tensor by a scalar *node* (not a constant), keeping the
    /// scale factor differentiable.
    pub fn scale_by_node(&mut self, s: NodeId, x: NodeId) -> Result<NodeId, AdError> {
        let (vs, vx) = (&self.nodes[s.idx()].value, &self.nodes[x.idx()].value);
        if !vs.is_scalar() {
            return Err(shape_err!("scale_by_node", "scale has shape {:?}", vs.shape()));
        }
        let c = vs.item();
        let data = vx.data().iter().map(|&v| c * v).collect();
        let value = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.needs_grad(s) || self.needs_grad(x);
        Ok(self.push(Op::ScaleByNode { s, x }, value, ng))
    }

    /// Accumulates `contrib` into the adjoint slot for `target`.
    fn accum(&mut self, adj: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) -> Result<(), AdError> {
        adj[target.idx()] = Some(match adj[target.idx()] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    /// Reverse sweep from the scalar `out`, recording adjoint computations as
    /// new nodes. Returns the adjoint node for each requested id (`None` when
    /// no gradient path exists, i.e. the gradient is identically zero).
    pub fn backward(&mut self, out: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>, AdError> {
        let out_value = &self.nodes[out.idx()].value;
        if !out_value.is_scalar() {
            return Err(AdError::NonScalarOutput { op: "backward", shape: out_value.shape().to_vec() });
        }
        let sweep_len = out.idx() + 1;
        let mut adj: Vec<Option<NodeId>> = vec![None; sweep_len];
        let seed = self.leaf(Tensor::scalar(1.0));
        adj[out.idx()] = Some(seed);

        for i in (0..sweep_len).rev() {
            let g = match adj[i] {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.emit_vjp(NodeId(i as u32), op, g, &mut adj)?;
        }

        Ok(wrt
            .iter()
            .map(|id| if id.idx() < sweep_len { adj[id.idx()] } else { None })
            .collect())
    }

    fn emit_vjp(
        &mut self,
        node: NodeId,
        op: Op,
        g: NodeId,
        adj: &mut [Option<NodeId>],
    ) -> Result<(), AdError> {
        match op {
            Op::Leaf | Op::StopGrad(_) | Op::ReluMask(_) | Op::QuadMask(_) => {}
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.reshape(g, shape)?;
                self.accum(adj, x, gx)?;
            }
            Op::Neg(x) => {
                let gx = self.neg(g);
                self.accum(adj, x, gx)?;
            }
            Op::Add(a, b) => {
                if self.needs_grad(a) {
                    self.accum(adj, a, g)?;
                }
                if self.needs_grad(b) {
                    self.accum(adj, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if self.needs_grad(a) {
                    self.accum(adj, a, g)?;
                }
                if self.needs_grad(b) {
                    let gb = self.neg(g);
                    self.accum(adj, b, gb)?;
                }
            }
            Op::Mul(a, b) => {
                if self.needs_grad(a) {
                    let ga = self.mul(g, b)?;
                    self.accum(adj, a, ga)?;
                }
                if self.needs_grad(b) {
                    let gb = self.mul(g, a)?;
                    self.accum(adj, b, gb)?;
                }
            }
            Op::ScalarMul(x, c) => {
                let gx = self.scalar_mul(g, c);
                self.accum(adj, x, gx)?;
            }
            Op::AddScalar(x, _) => {
                self.accum(adj, x, g)?;
            }
            Op::Recip(x) => {
                // d(1/x) = -g / x² = -g · y² with y the recorded output.
                let y2 = self.mul(node, node)?;
                let gy = self.mul(g, y2)?;
                let gx = self.neg(gy);
                self.accum(adj, x, gx)?;
            }
            Op::Log(x) => {
                let r = self.recip(x);
                let gx = self.mul(g, r)?;
                self.accum(adj, x, gx)?;
            }
            Op::Relu(x) => {
                let gx = self.relu_back(g, x)?;
                self.accum(adj, x, gx)?;
            }
            Op::ReluBack { g: src_g, x } => {
                let gg = self.relu_back(g, x)?;
                self.accum(adj, src_g, gg)?;
            }
            Op::Huber(x) => {
                let d = self.huber_deriv(x);
                let gx = self.mul(g, d)?;
                self.accum(adj, x, gx)?;
            }
            Op::HuberDeriv(x) => {
                let m = self.quad_mask(x);
                let gx = self.mul(g, m)?;
                self.accum(adj, x, gx)?;
            }
            Op::MatMul(a, b) => {
                if self.needs_grad(a) {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(g, bt)?;
                    self.accum(adj, a, ga)?;
                }
                if self.needs_grad(b) {
                    let gb = self.matmul_atb(a, g)?;
                    self.accum(adj, b, gb)?;
                }
            }
            Op::MatMulATB(a, b) => {
                // out = aᵀb: da = b·gᵀ, db = a·g.
                if self.needs_grad(a) {
                    let gt = self.transpose(g)?;
                    let ga = self.matmul(b, gt)?;
                    self.accum(adj, a, ga)?;
                }
                if self.needs_grad(b) {
                    let gb = self.matmul(a, g)?;
                    self.accum(adj, b, gb)?;
                }
            }
            Op::Transpose(x) => {
                let gx = self.transpose(g)?;
                self.accum(adj, x, gx)?;
            }
            Op::Corr2d { x, k } => {
                let kshape = self.shape(k).to_vec();
                let (kh, kw) = (kshape[0], kshape[1]);
                if self.needs_grad(x) {
                    let padded = self.zero_pad2d(g, kh - 1, kw - 1)?;
                    let flipped = self.flip_kernel(k)?;
                    let gx = self.corr2d(padded, flipped)?;
                    self.accum(adj, x, gx)?;
                }
                if self.needs_grad(k) {
                    let gk = self.kernel_grad(x, g, kh, kw)?;
                    self.accum(adj, k, gk)?;
                }
            }
            Op::ZeroPad2d { x, ph, pw } => {
                let gx = self.crop2d(g, ph, pw)?;
                self.accum(adj, x, gx)?;
            }
            Op::Crop2d { x, ph, pw } => {
                let gx = self.zero_pad2d(g, ph, pw)?;
                self.accum(adj, x, gx)?;
            }
            Op::FlipKernel(k) => {
                let gk = self.flip_kernel(g)?;
                self.accum(adj, k, gk)?;
            }
            Op::KernelGrad { x, dy, kh, kw } => {
                if self.needs_grad(x) {
                    let padded = self.zero_pad2d(dy, kh - 1, kw - 1)?;
                    let flipped = self.flip_kernel(g)?;
                    let gx = self.corr2d(padded, flipped)?;
                    self.accum(adj, x, gx)?;
                }
                if self.needs_grad(dy) {
                    let gdy = self.corr2d(x, g)?;
                    self.accum(adj, dy, gdy)?;
                }
            }
            Op::RepeatRows { v, .. } => {
                let gv = self.col_sum(g)?;
                self.accum(adj, v, gv)?;
            }
            Op::AddRowVec { x, v } => {
                if self.needs_grad(x) {
                    self.accum(adj, x, g)?;
                }
                if self.needs_grad(v) {
                    let gv = self.col_sum(g)?;
                    self.accum(adj, v, gv)?;
                }
            }
            Op::AddChanBias { x, v } => {
                if self.needs_grad(x) {
                    self.accum(adj, x, g)?;
                }
                if self.needs_grad(v) {
                    let gv = self.chan_sum(g)?;
                    self.accum(adj, v, gv)?;
                }
            }
            Op::ColSum(x) => {
                let rows = self.shape(x)[0];
                let gx = self.repeat_rows(g, rows)?;
                self.accum(adj, x, gx)?;
            }
            Op::ChanBroadcast { v, .. } => {
                let gv = self.chan_sum(g)?;
                self.accum(adj, v, gv)?;
            }
            Op::ChanSum(x) => {
                let s = self.shape(x).to_vec();
                let gx = self.chan_broadcast(g, s[0], s[1], s[2])?;
                self.accum(adj, x, gx)?;
            }
            Op::RowSum(x) => {
                let cols = self.shape(x)[1];
                let gx = self.row_broadcast(g, cols)?;
                self.accum(adj, x, gx)?;
            }
            Op::RowBroadcast { v, .. } => {
                let gv = self.row_sum(g)?;
                self.accum(adj, v, gv)?;
            }
            Op::SumAll(x) => {
                let shape = self.shape(x).to_vec();
                let gx = self.broadcast_scalar(g, shape)?;
                self.accum(adj, x, gx)?;
            }
            Op::BroadcastScalar { s, .. } => {
                let gs = self.sum_all(g);
                self.accum(adj, s, gs)?;
            }
            Op::Softmax(x) => {
                // dx = p ⊙ (g − rowbcast(rowsum(g ⊙ p)))
                let p = node;
                let gp = self.mul(g, p)?;
                let rs = self.row_sum(gp)?;
                let cols = self.shape(x)[1];
                let rb = self.row_broadcast(rs, cols)?;
                let centered = self.sub(g, rb)?;
                let gx = self.mul(p, centered)?;
                self.accum(adj, x, gx)?;
            }
            Op::LogSumExp(x) => {
                let p = self.softmax(x)?;
                let cols = self.shape(x)[1];
                let rb = self.row_broadcast(g, cols)?;
                let gx = self.mul(p, rb)?;
                self.accum(adj, x, gx)?;
            }
            Op::MaxRow { x, argmax } => {
                let groups = self.shape(x)[1];
                let rows = argmax.len();
                let gv = self.reshape(g, vec![rows, 1])?;
                let gx = self.scatter_rows(gv, argmax, groups)?;
                self.accum(adj, x, gx)?;
            }
            Op::GatherRows { x, idx, block } => {
                let groups = self.shape(x)[1] / block;
                let gx = self.scatter_rows(g, idx, groups)?;
                self.accum(adj, x, gx)?;
            }
            Op::ScatterRows { v, idx, .. } => {
                let block = self.shape(v)[1];
                let gv = self.gather_rows(g, idx, block)?;
                self.accum(adj, v, gv)?;
            }
            Op::Dot(a, b) => {
                if self.needs_grad(a) {
                    let ga = self.scale_by_node(g, b)?;
                    self.accum(adj, a, ga)?;
                }
                if self.needs_grad(b) {
                    let gb = self.scale_by_node(g, a)?;
                    self.accum(adj, b, gb)?;
                }
            }
            Op::ScaleByNode { s, x } => {
                if self.needs_grad(s) {
                    let gs = self.dot(x, g)?;
                    self.accum(adj, s, gs)?;
                }
                if self.needs_grad(x) {
                    let gx = self.scale_by_node(s, g)?;
                    self.accum(adj, x, gx)?;
                }
            }
        }
        Ok(())
    }

    /// Recomputes every non-leaf node from its inputs and checks the stored
    /// forward values bit-exactly.
    pub fn verify_replay(&self) -> bool {
        for node in &self.nodes {
            let recomputed = match self.recompute(&node.op, node.value.shape()) {
                Some(v) => v,
                None => continue,
            };
            if recomputed.shape() != node.value.shape() {
                return false;
            }
            if recomputed
                .data()
                .iter()
                .zip(node.value.data())
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return false;
            }
        }
        true
    }

    fn recompute(&self, op: &Op, out_shape: &[usize]) -> Option<Tensor> {
        let v = |id: NodeId| &self.nodes[id.idx()].value;
        let out = match *op {
            Op::Leaf => return None,
            Op::StopGrad(x) | Op::Reshape(x) => v(x).reshaped(out_shape.to_vec()),
            Op::Neg(x) => elementwise(v(x), |a| -a),
            Op::Recip(x) => elementwise(v(x), |a| 1.0 / a),
            Op::Log(x) => elementwise(v(x), |a| a.ln()),
            Op::Relu(x) => elementwise(v(x), |a| a.max(0.0)),
            Op::ReluMask(x) => elementwise(v(x), |a| if a > 0.0 { 1.0 } else { 0.0 }),
            Op::Huber(x) => elementwise(v(x), kernels::huber),
            Op::HuberDeriv(x) => elementwise(v(x), kernels::huber_deriv),
            Op::QuadMask(x) => elementwise(v(x), |a| if a * a <= 1.0 { 1.0 } else { 0.0 }),
            Op::ScalarMul(x, c) => elementwise(v(x), |a| a * c),
            Op::AddScalar(x, c) => elementwise(v(x), |a| a + c),
            Op::Add(a, b) => zipwise(v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => zipwise(v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => zipwise(v(a), v(b), |x, y| x * y),
            Op::ReluBack { g, x } => Tensor::new(
                v(g).shape().to_vec(),
                v(g).data()
                    .iter()
                    .zip(v(x).data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect(),
            ),
            Op::MatMulATB(a, b) => {
                let (k, m) = (v(a).shape()[0], v(a).shape()[1]);
                let n = v(b).shape()[1];
                Tensor::new(vec![m, n], kernels::matmul_atb(v(a).data(), v(b).data(), k, m, n))
            }
            Op::AddRowVec { x, v: bias } | Op::AddChanBias { x, v: bias } => {
                let c = v(bias).numel();
                let mut data = v(x).data().to_vec();
                for row in data.chunks_exact_mut(c) {
                    for (o, &bv) in row.iter_mut().zip(v(bias).data()) {
                        *o += bv;
                    }
                }
                Tensor::new(v(x).shape().to_vec(), data)
            }
            Op::MatMul(a, b) => {
                let (m, k) = (v(a).shape()[0], v(a).shape()[1]);
                let n = v(b).shape()[1];
                Tensor::new(vec![m, n], kernels::matmul(v(a).data(), v(b).data(), m, k, n))
            }
            Op::Transpose(x) => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                Tensor::new(vec![c, r], kernels::transpose(v(x).data(), r, c))
            }
            Op::Corr2d { x, k } => {
                let s = v(x).shape().to_vec();
                let ks = v(k).shape().to_vec();
                Tensor::new(
                    vec![s[0], s[1] - ks[0] + 1, s[2] - ks[1] + 1, ks[3]],
                    kernels::corr2d(v(x).data(), v(k).data(), s[0], s[1], s[2], s[3], ks[0], ks[1], ks[3]),
                )
            }
            Op::ZeroPad2d { x, ph, pw } => {
                let s = v(x).shape().to_vec();
                Tensor::new(
                    vec![s[0], s[1] + 2 * ph, s[2] + 2 * pw, s[3]],
                    kernels::zero_pad2d(v(x).data(), s[0], s[1], s[2], s[3], ph, pw),
                )
            }
            Op::Crop2d { x, ph, pw } => {
                let s = v(x).shape().to_vec();
                Tensor::new(
                    vec![s[0], s[1] - 2 * ph, s[2] - 2 * pw, s[3]],
                    kernels::crop2d(v(x).data(), s[0], s[1], s[2], s[3], ph, pw),
                )
            }
            Op::FlipKernel(k) => {
                let s = v(k).shape().to_vec();
                Tensor::new(
                    vec![s[0], s[1], s[3], s[2]],
                    kernels::flip_kernel(v(k).data(), s[0], s[1], s[2], s[3]),
                )
            }
            Op::KernelGrad { x, dy, kh, kw } => {
                let s = v(x).shape().to_vec();
                let co = v(dy).shape()[3];
                Tensor::new(
                    vec![kh, kw, s[3], co],
                    kernels::kernel_grad(v(x).data(), v(dy).data(), s[0], s[1], s[2], s[3], kh, kw, co),
                )
            }
            Op::RepeatRows { v: src, rows } => {
                let c = v(src).numel();
                let mut data = Vec::with_capacity(rows * c);
                for _ in 0..rows {
                    data.extend_from_slice(v(src).data());
                }
                Tensor::new(vec![rows, c], data)
            }
            Op::ColSum(x) => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                Tensor::new(vec![c], kernels::col_sum(v(x).data(), r, c))
            }
            Op::ChanBroadcast { v: src, b, h, w } => {
                let c = v(src).numel();
                let mut data = Vec::with_capacity(b * h * w * c);
                for _ in 0..b * h * w {
                    data.extend_from_slice(v(src).data());
                }
                Tensor::new(vec![b, h, w, c], data)
            }
            Op::ChanSum(x) => {
                let s = v(x).shape().to_vec();
                Tensor::new(vec![s[3]], kernels::col_sum(v(x).data(), s[0] * s[1] * s[2], s[3]))
            }
            Op::RowSum(x) => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                Tensor::new(vec![r], kernels::row_sum(v(x).data(), r, c))
            }
            Op::RowBroadcast { v: src, cols } => {
                let r = v(src).numel();
                let mut data = Vec::with_capacity(r * cols);
                for &x in v(src).data() {
                    data.extend(std::iter::repeat(x).take(cols));
                }
                Tensor::new(vec![r, cols], data)
            }
            Op::SumAll(x) => Tensor::scalar(kernels::sum_all(v(x).data())),
            Op::BroadcastScalar { s, ref shape } => {
                let n: usize = shape.iter().product();
                Tensor::new(shape.clone(), vec![v(s).item(); n])
            }
            Op::Softmax(x) => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                Tensor::new(vec![r, c], kernels::softmax_rows(v(x).data(), r, c))
            }
            Op::LogSumExp(x) => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                Tensor::new(vec![r], kernels::logsumexp_rows(v(x).data(), r, c))
            }
            Op::MaxRow { x, .. } => {
                let (r, c) = (v(x).shape()[0], v(x).shape()[1]);
                Tensor::new(vec![r], kernels::max_rows(v(x).data(), r, c).0)
            }
            Op::GatherRows { x, ref idx, block } => {
                let total = v(x).shape()[1];
                let mut data = Vec::with_capacity(idx.len() * block);
                for (row, &i) in v(x).data().chunks_exact(total).zip(idx.iter()) {
                    data.extend_from_slice(&row[i as usize * block..(i as usize + 1) * block]);
                }
                Tensor::new(vec![idx.len(), block], data)
            }
            Op::ScatterRows { v: src, ref idx, groups } => {
                let block = v(src).shape()[1];
                let mut data = vec![0.0f32; idx.len() * groups * block];
                for ((row_out, row_in), &i) in data
                    .chunks_exact_mut(groups * block)
                    .zip(v(src).data().chunks_exact(block))
                    .zip(idx.iter())
                {
                    row_out[i as usize * block..(i as usize + 1) * block].copy_from_slice(row_in);
                }
                Tensor::new(vec![idx.len(), groups * block], data)
            }
            Op::Dot(a, b) => Tensor::scalar(kernels::dot(v(a).data(), v(b).data())),
            Op::ScaleByNode { s, x } => {
                let c = v(s).item();
                elementwise(v(x), |a| c * a)
            }
        };
        Some(out)
    }
}

/// Fixed-chunk parallel map; element order is position-determined, so the
/// result is identical to the serial path.
fn map_maybe_parallel(src: &[f32], f: impl (Fn(f32) -> f32) + Sync) -> Vec<f32> {
    use rayon::prelude::*;
    const PAR_MIN: usize = 1 << 20;
    if src.len() < PAR_MIN {
        return src.iter().map(|&a| f(a)).collect();
    }
    let mut out = vec![0.0f32; src.len()];
    out.par_chunks_mut(1 << 16).zip(src.par_chunks(1 << 16)).for_each(|(oc, sc)| {
        for (o, &s) in oc.iter_mut().zip(sc) {
            *o = f(s);
        }
    });
    out
}

fn zip_maybe_parallel(a: &[f32], b: &[f32], f: impl (Fn(f32, f32) -> f32) + Sync) -> Vec<f32> {
    use rayon::prelude::*;
    const PAR_MIN: usize = 1 << 20;
    if a.len() < PAR_MIN {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![0.0f32; a.len()];
    out.par_chunks_mut(1 << 16)
        .zip(a.par_chunks(1 << 16).zip(b.par_chunks(1 << 16)))
        .for_each(|(oc, (ac, bc))| {
            for (o, (&x, &y)) in oc.iter_mut().zip(ac.iter().zip(bc)) {
                *o = f(x, y);
            }
        });
    out
}

fn elementwise(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&a| f(a)).collect())
}

fn zipwise(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// A scalar loss bound to a parameter vector, with cached gradient graph.
///
/// `gradient` builds the adjoint graph once; `hvp` appends the gᵀv inner
/// product and a second backward pass, then truncates those nodes so
/// repeated HVPs (one per Lanczos iteration) reuse the same gradient graph.
pub struct LossGraph {
    tape: Tape,
    loss: NodeId,
    param_nodes: Vec<NodeId>,
    layout: Arc<Layout>,
    grad_nodes: Option<Vec<Option<NodeId>>>,
}

impl LossGraph {
    /// Builds the loss program. `build` receives one param node per layout
    /// segment, in segment order, and must return a scalar node.
    pub fn build<F>(params: &ParamVector, build: F) -> Result<Self, AdError>
    where
        F: FnOnce(&mut Tape, &[NodeId]) -> Result<NodeId, AdError>,
    {
        let mut tape = Tape::new();
        let param_nodes: Vec<NodeId> =
            params.unflatten().into_iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &param_nodes)?;
        if !tape.value(loss).is_scalar() {
            return Err(AdError::NonScalarOutput {
                op: "loss",
                shape: tape.value(loss).shape().to_vec(),
            });
        }
        Ok(LossGraph {
            tape,
            loss,
            param_nodes,
            layout: Arc::clone(params.layout()),
            grad_nodes: None,
        })
    }

    pub fn loss_value(&self) -> f32 {
        self.tape.value(self.loss).item()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    fn ensure_grad_graph(&mut self) -> Result<(), AdError> {
        if self.grad_nodes.is_none() {
            let g = self.tape.backward(self.loss, &self.param_nodes)?;
            self.grad_nodes = Some(g);
        }
        Ok(())
    }

    fn collect(&self, nodes: &[Option<NodeId>]) -> Result<ParamVector, AdError> {
        let mut values = Vec::with_capacity(self.layout.total_len());
        for (seg, n) in self.layout.segments().iter().zip(nodes) {
            match n {
                Some(id) => values.extend_from_slice(self.tape.value(*id).data()),
                // Parameters without a path to the loss get a zero gradient.
                None => values.extend(std::iter::repeat(0.0).take(seg.len())),
            }
        }
        ParamVector::new(Arc::clone(&self.layout), values)
    }

    /// ∂loss/∂θ in the parameter layout.
    pub fn gradient(&mut self) -> Result<ParamVector, AdError> {
        self.ensure_grad_graph()?;
        self.collect(self.grad_nodes.as_ref().unwrap().clone().as_slice())
    }

    /// Exact H·v by differentiating g(θ)ᵀv a second time.
    pub fn hvp(&mut self, v: &ParamVector) -> Result<ParamVector, AdError> {
        if v.layout().total_len() != self.layout.total_len() {
            return Err(AdError::LayoutMismatch(format!(
                "hvp direction has {} values, loss has {}",
                v.layout().total_len(),
                self.layout.total_len()
            )));
        }
        self.ensure_grad_graph()?;
        let watermark = self.tape.len();
        let result = self.hvp_inner(v);
        self.tape.truncate(watermark);
        result
    }

    fn hvp_inner(&mut self, v: &ParamVector) -> Result<ParamVector, AdError> {
        let grads = self.grad_nodes.as_ref().unwrap().clone();
        let mut inner: Option<NodeId> = None;
        for (t, g) in v.unflatten().into_iter().zip(&grads) {
            if let Some(gid) = g {
                let vt = self.tape.leaf(t);
                let d = self.tape.dot(*gid, vt)?;
                inner = Some(match inner {
                    None => d,
                    Some(acc) => self.tape.add(acc, d)?,
                });
            }
        }
        let inner = match inner {
            Some(n) => n,
            // No parameter influences the loss: H is the zero matrix.
            None => return Ok(ParamVector::zeros(Arc::clone(&self.layout))),
        };
        let hv_nodes = self.tape.backward(inner, &self.param_nodes)?;
        self.collect(&hv_nodes)
    }
}
