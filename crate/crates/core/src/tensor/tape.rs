//! Recording tape for reverse-mode differentiation.
//!
//! A tape owns every intermediate tensor of one evaluation. Ops append nodes
//! in topological order; [`Tape::backward`] walks them once in reverse and
//! leaves gradients on the `requires_grad` leaves. A tape is consumed by
//! backward; attacks and training re-trace a fresh tape per step.
//!
//! Layout rules are deliberately simple: row-major, no stride views (slices
//! copy), and broadcasting only as dedicated kernels (`add_bias`,
//! `tile_leading`) or scalar ops.

use super::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        let ho = (self.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (self.w + 2 * self.pad - self.k) / self.stride + 1;
        (ho, wo)
    }
}

type ElemFn<S> = Box<dyn Fn(S) -> S + Send + Sync>;

enum Op<S: Scalar> {
    Leaf,
    AddScalar { x: Var },
    MulScalar { x: Var, c: S },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Reshape { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    TileLeading { x: Var, reps: usize },
    AddBias { x: Var, b: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    Relu { x: Var },
    Gelu { x: Var },
    SoftmaxT { x: Var, t: S },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    AvgPool2d { x: Var, k: usize, stride: usize },
    Im2col { x: Var, geom: ConvGeom },
    Patchify { x: Var, p: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, mean: bool },
    ElemWise { x: Var, df: ElemFn<S> },
}

impl<S: Scalar> Op<S> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::AddScalar { x }
            | Op::MulScalar { x, .. }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::TileLeading { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Relu { x }
            | Op::Gelu { x }
            | Op::SoftmaxT { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::Im2col { x, .. }
            | Op::Patchify { x, .. }
            | Op::ElemWise { x, .. } => vec![*x],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Option<Vec<Option<Vec<S>>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tape keeps every intermediate alive until it drops, so allocation
/// constantly grows fresh pages. Raising glibc's mmap/trim thresholds lets
/// freed tape memory be pooled and reused by the next tape instead of being
/// returned to the kernel, which removes page-fault churn from the hot path.
fn tune_allocator_once() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
            libc::mallopt(-1 /* M_TRIM_THRESHOLD */, 128 * 1024 * 1024);
        });
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        tune_allocator_once();
        Tape { nodes: Vec::new(), grads: None }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss w.r.t. a `requires_grad` leaf after `backward`.
    /// Leaves the loss never reached get an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) || !node.needs_grad {
            return None;
        }
        let data = match &grads[v.0] {
            Some(g) => g.clone(),
            None => vec![S::ZERO; node.value.numel()],
        };
        Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Result<Var> {
        self.check_open()?;
        if !value.all_finite() {
            return Err(Error::numeric("leaf tensor contains non-finite values"));
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Ok(Var(id))
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.leaf(value, false)
    }

    fn check_open(&self) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::invalid("tape already consumed by backward"));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::numeric(format!(
                "non-finite values produced (op output shape {:?})",
                value.shape()
            )));
        }
        self.push_moved(value, op)
    }

    /// For ops that only rearrange already-checked values (reshape, permute,
    /// slice, concat, tile, gather): finiteness holds by induction, skip the
    /// scan.
    fn push_moved(&mut self, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(id))
    }

    // ---- elementwise and scalar ops ----

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: Var, c: S) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().map(|&v| v * c).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::MulScalar { x, c })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, S::from_f64(-1.0))
    }

    fn binary_same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::invalid(format!("{name}: shape {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        self.binary_same_shape(a, b, "add")?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        self.binary_same_shape(a, b, "sub")?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        self.binary_same_shape(a, b, "mul")?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<S> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, Op::Mul { a, b })
    }

    /// Elementwise op with caller-provided forward and derivative.
    pub fn elementwise<F, D>(&mut self, x: Var, f: F, df: D) -> Result<Var>
    where
        F: Fn(S) -> S + Send + Sync + 'static,
        D: Fn(S) -> S + Send + Sync + 'static,
    {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::ElemWise { x, df: Box::new(df) })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().map(|&v| v.maximum(S::ZERO)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Relu { x })
    }

    /// GELU, tanh approximation. The backward differentiates the
    /// approximation itself, not exact erf.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let data: Vec<S> = xv.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Gelu { x })
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::invalid(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::ZERO; m * n];
        matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, m, k, n })
    }

    /// Batched matmul over matching leading batch dims: [B,m,k] x [B,k,n].
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::invalid(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::ZERO; batch * m * n];
        let (ad, bd) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        for bi in 0..batch {
            matmul_acc(
                &ad[bi * m * k..(bi + 1) * m * k],
                &bd[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(value, Op::Bmm { a, b, batch, m, k, n })
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(Error::invalid(format!(
                "reshape {:?} to {:?}",
                xv.shape(),
                shape
            )));
        }
        let value = Tensor::new(shape, xv.data().to_vec())?;
        self.push_moved(value, Op::Reshape { x })
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let rank = xv.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid(format!(
                "permute axes {:?} for rank {}",
                axes, rank
            )));
        }
        let value = permute_data(xv, axes)?;
        self.push_moved(value, Op::Permute { x, axes: axes.to_vec() })
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "slice axis {axis} [{start}..{}) of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push_moved(value, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.check_open()?;
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero parts"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} rank {}", first.len())));
        }
        let mut total = 0usize;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::invalid("concat: mismatched shapes"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = vec![S::ZERO; outer * total * inner];
        let mut offset = 0usize;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            let dim = pv.shape()[axis];
            for o in 0..outer {
                let src = &pv.data()[o * dim * inner..(o + 1) * dim * inner];
                let dst_base = (o * total + offset) * inner;
                data[dst_base..dst_base + dim * inner].copy_from_slice(src);
            }
            offset += dim;
        }
        let value = Tensor::new(out_shape, data)?;
        self.push_moved(value, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Repeats the whole tensor along a new leading axis.
    pub fn tile_leading(&mut self, x: Var, reps: usize) -> Result<Var> {
        self.check_open()?;
        if reps == 0 {
            return Err(Error::invalid("tile_leading: reps must be >= 1"));
        }
        let xv = &self.nodes[x.0].value;
        let mut data = Vec::with_capacity(xv.numel() * reps);
        for _ in 0..reps {
            data.extend_from_slice(xv.data());
        }
        let mut shape = vec![reps];
        shape.extend_from_slice(xv.shape());
        let value = Tensor::new(shape, data)?;
        self.push_moved(value, Op::TileLeading { x, reps })
    }

    /// `x + b` where `b`'s shape is a suffix of `x`'s shape (bias add).
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (xs, bs) = (xv.shape(), bv.shape());
        if bs.len() > xs.len() || &xs[xs.len() - bs.len()..] != bs {
            return Err(Error::invalid(format!("add_bias: {bs:?} is not a suffix of {xs:?}")));
        }
        let bn = bv.numel().max(1);
        let bd = bv.data();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks_exact(bn) {
            data.extend(row.iter().zip(bd).map(|(&v, &bb)| v + bb));
        }
        let value = Tensor::new(xs.to_vec(), data)?;
        self.push(value, Op::AddBias { x, b })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.check_open()?;
        let n = self.nodes[x.0].value.numel();
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / S::from_f64(n as f64));
        self.push(value, Op::MeanAll { x })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(format!("reduce axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let dim = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![S::ZERO; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for (out, &v) in dst.iter_mut().zip(&xv.data()[base..base + inner]) {
                    *out += v;
                }
            }
        }
        if mean {
            let inv = S::ONE / S::from_f64(dim as f64);
            for v in &mut data {
                *v = *v * inv;
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        let op = if mean { Op::MeanAxis { x, axis } } else { Op::SumAxis { x, axis } };
        self.push(value, op)
    }

    // ---- normalization, attention, loss ----

    /// Temperature-scaled softmax along the last axis:
    /// `exp((z - max(z)) / T)` normalized, identical to `softmax(z / T)`.
    pub fn softmax_temperature(&mut self, x: Var, t: S) -> Result<Var> {
        self.check_open()?;
        if !(t > S::ZERO) {
            return Err(Error::invalid(format!("softmax temperature must be > 0, got {t}")));
        }
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        let dim = *shape
            .last()
            .ok_or_else(|| Error::invalid("softmax on scalar"))?;
        let rows = xv.numel() / dim;
        let mut data = vec![S::ZERO; xv.numel()];
        let inv_t = S::ONE / t;
        for r in 0..rows {
            let src = &xv.data()[r * dim..(r + 1) * dim];
            let dst = &mut data[r * dim..(r + 1) * dim];
            let mut max = src[0];
            for &v in src.iter() {
                max = max.maximum(v);
            }
            // exp pass kept free of the sum reduction so it vectorizes
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = ((v - max) * inv_t).exp();
            }
            let mut sum = S::ZERO;
            for &e in dst.iter() {
                sum += e;
            }
            let inv_sum = S::ONE / sum;
            for o in dst.iter_mut() {
                *o = *o * inv_sum;
            }
        }
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(value, Op::SoftmaxT { x, t })
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_temperature(x, S::ONE)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let dim = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::invalid("layer_norm on scalar"))?;
        let (gs, bs) = (self.nodes[gamma.0].value.shape(), self.nodes[beta.0].value.shape());
        if gs != [dim] || bs != [dim] {
            return Err(Error::invalid(format!(
                "layer_norm: scale/shift must be [{dim}], got {gs:?}/{bs:?}"
            )));
        }
        let rows = xv.numel() / dim;
        let eps = S::from_f64(LAYER_NORM_EPS);
        let gd = self.nodes[gamma.0].value.data();
        let bd = self.nodes[beta.0].value.data();
        let mut data = vec![S::ZERO; xv.numel()];
        for r in 0..rows {
            let src = &xv.data()[r * dim..(r + 1) * dim];
            let (mean, var) = row_moments(src);
            let inv_std = S::ONE / (var + eps).sqrt();
            let dst = &mut data[r * dim..(r + 1) * dim];
            for j in 0..dim {
                dst[j] = (src[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::LayerNorm { x, gamma, beta })
    }

    /// Mean cross-entropy from logits, log-sum-exp stabilized.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, true)
    }

    /// Summed (not averaged) cross-entropy; used for deterministic
    /// fixed-order reduction over batch chunks.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, false)
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        self.check_open()?;
        let lv = &self.nodes[logits.0].value;
        let shape = lv.shape();
        if shape.len() != 2 {
            return Err(Error::invalid(format!("cross_entropy: logits must be 2-D, got {shape:?}")));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if labels.len() != batch {
            return Err(Error::invalid("cross_entropy: label count != batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("cross_entropy: label {bad} >= {classes}")));
        }
        let mut total = S::ZERO;
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv.data()[b * classes..(b + 1) * classes];
            let mut max = row[0];
            for &v in row {
                max = max.maximum(v);
            }
            let mut sum = S::ZERO;
            for &v in row {
                sum += (v - max).exp();
            }
            total += max + sum.ln() - row[label];
        }
        if mean {
            total = total / S::from_f64(batch as f64);
        }
        let value = Tensor::scalar(total);
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), mean })
    }

    // ---- spatial ops ----

    /// Average pooling over [B,C,H,W] with square kernel `k` and stride.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(Error::invalid(format!("avg_pool2d k={k} stride={stride} on {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let inv = S::ONE / S::from_f64((k * k) as f64);
        let mut data = vec![S::ZERO; b * c * ho * wo];
        let xd = xv.data();
        for bi in 0..b {
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let out_plane = &mut data[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = S::ZERO;
                        for ky in 0..k {
                            let row = (oy * stride + ky) * w + ox * stride;
                            for kx in 0..k {
                                acc += plane[row + kx];
                            }
                        }
                        out_plane[oy * wo + ox] = acc * inv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, c, ho, wo], data)?;
        self.push(value, Op::AvgPool2d { x, k, stride })
    }

    /// im2col for 2-D convolution: [B,C,H,W] -> [B*Ho*Wo, C*k*k] with zero
    /// padding. Convolution is this gather followed by a plain matmul, so the
    /// matmul backward is the only dense backward involved.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if s.len() != 4 || k == 0 || stride == 0 {
            return Err(Error::invalid(format!("im2col k={k} stride={stride} on {s:?}")));
        }
        let geom = ConvGeom { c: s[1], h: s[2], w: s[3], k, stride, pad };
        if geom.h + 2 * pad < k || geom.w + 2 * pad < k {
            return Err(Error::invalid("im2col: kernel larger than padded input"));
        }
        let b = s[0];
        let (ho, wo) = geom.out_hw();
        let cols = geom.c * k * k;
        let stride_ = geom.stride;
        let mut data = vec![S::ZERO; b * ho * wo * cols];
        let xd = xv.data();
        // (bi, oy) outer; per (ci, ky) the kx window is a contiguous span of
        // the source row, clipped once against the padded borders
        for bi in 0..b {
            for oy in 0..ho {
                let out_row = (bi * ho + oy) * wo;
                for ci in 0..geom.c {
                    let plane = (bi * geom.c + ci) * geom.h * geom.w;
                    for ky in 0..k {
                        let iy = (oy * stride_ + ky) as isize - pad as isize;
                        if iy < 0 || iy >= geom.h as isize {
                            continue;
                        }
                        let src_row = plane + iy as usize * geom.w;
                        let dst_off = (ci * k + ky) * k;
                        for ox in 0..wo {
                            let x0 = (ox * stride_) as isize - pad as isize;
                            let kx_lo = (-x0).max(0) as usize;
                            let kx_hi = (geom.w as isize - x0).min(k as isize) as usize;
                            if kx_lo >= kx_hi {
                                continue;
                            }
                            let src = src_row + (x0 + kx_lo as isize) as usize;
                            let dst = (out_row + ox) * cols + dst_off + kx_lo;
                            data[dst..dst + kx_hi - kx_lo]
                                .copy_from_slice(&xd[src..src + kx_hi - kx_lo]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b * ho * wo, cols], data)?;
        self.push_moved(value, Op::Im2col { x, geom })
    }

    /// [B,C,H,W] -> [B,N,P*P*C] patch sequence, row-major over the patch
    /// grid; within a patch the layout is (channel, py, px).
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        self.check_open()?;
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!("patchify on {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!(
                "patchify: {h}x{w} not divisible by patch size {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let n = gh * gw;
        let plen = p * p * c;
        let mut data = vec![S::ZERO; b * n * plen];
        let xd = xv.data();
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let pi = gy * gw + gx;
                    let dst = (bi * n + pi) * plen;
                    for ci in 0..c {
                        let plane = (bi * c + ci) * h * w;
                        for py in 0..p {
                            let src = plane + (gy * p + py) * w + gx * p;
                            let d = dst + (ci * p + py) * p;
                            data[d..d + p].copy_from_slice(&xd[src..src + p]);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, n, plen], data)?;
        self.push_moved(value, Op::Patchify { x, p })
    }

    // ---- backward ----

    /// Seeds `d(loss)/d(loss) = 1` and back-propagates once through the tape
    /// in reverse topological order. Consumes the tape: no further ops or
    /// backward calls are accepted; leaf gradients stay readable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_open()?;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<S>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::ONE]);
        for id in (0..n).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.dispatch_backward(id, &g, &mut grads)?;
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<S>>], v: Var) -> &'a mut [S] {
        let numel = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![S::ZERO; numel])
    }

    fn dispatch_backward(&self, id: usize, g: &[S], grads: &mut [Option<Vec<S>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}

            Op::AddScalar { x } | Op::Reshape { x } => {
                if self.wants(*x) {
                    for (o, &gv) in self.buf(grads, *x).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }

            Op::MulScalar { x, c } => {
                if self.wants(*x) {
                    for (o, &gv) in self.buf(grads, *x).iter_mut().zip(g) {
                        *o += gv * *c;
                    }
                }
            }

            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        for (o, &gv) in self.buf(grads, *v).iter_mut().zip(g) {
                            *o += gv;
                        }
                    }
                }
            }

            Op::Sub { a, b } => {
                if self.wants(*a) {
                    for (o, &gv) in self.buf(grads, *a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.wants(*b) {
                    for (o, &gv) in self.buf(grads, *b).iter_mut().zip(g) {
                        *o += -gv;
                    }
                }
            }

            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let bd = self.nodes[b.0].value.data();
                    for ((o, &gv), &bv) in self.buf(grads, *a).iter_mut().zip(g).zip(bd) {
                        *o += gv * bv;
                    }
                }
                if self.wants(*b) {
                    let ad = self.nodes[a.0].value.data();
                    for ((o, &gv), &av) in self.buf(grads, *b).iter_mut().zip(g).zip(ad) {
                        *o += gv * av;
                    }
                }
            }

            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    // dA = G . B^T
                    let bt = transpose2d(self.nodes[b.0].value.data(), *k, *n);
                    matmul_acc(g, &bt, *m, *n, *k, self.buf(grads, *a));
                }
                if self.wants(*b) {
                    // dB = A^T . G
                    matmul_tn_acc(
                        self.nodes[a.0].value.data(),
                        g,
                        *m,
                        *k,
                        *n,
                        self.buf(grads, *b),
                    );
                }
            }

            Op::Bmm { a, b, batch, m, k, n } => {
                if self.wants(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let buf = self.buf(grads, *a);
                    for bi in 0..*batch {
                        let bt = transpose2d(&bd[bi * k * n..(bi + 1) * k * n], *k, *n);
                        matmul_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bt,
                            *m,
                            *n,
                            *k,
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
                if self.wants(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let buf = self.buf(grads, *b);
                    for bi in 0..*batch {
                        matmul_tn_acc(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            *m,
                            *k,
                            *n,
                            &mut buf[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            }

            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let out_shape = node.value.shape();
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let g_tensor = Tensor::new(out_shape.to_vec(), g.to_vec())?;
                    let back = permute_data(&g_tensor, &inverse)?;
                    for (o, &gv) in self.buf(grads, *x).iter_mut().zip(back.data()) {
                        *o += gv;
                    }
                }
            }

            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let len = node.value.shape()[*axis];
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let dim = in_shape[*axis];
                    let buf = self.buf(grads, *x);
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            buf[dst + i] += g[src + i];
                        }
                    }
                }
            }

            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0usize;
                for p in parts {
                    let dim = self.nodes[p.0].value.shape()[*axis];
                    if self.wants(*p) {
                        let buf = self.buf(grads, *p);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * dim * inner;
                            for i in 0..dim * inner {
                                buf[dst + i] += g[src + i];
                            }
                        }
                    }
                    offset += dim;
                }
            }

            Op::TileLeading { x, reps } => {
                if self.wants(*x) {
                    let numel = self.nodes[x.0].value.numel();
                    let buf = self.buf(grads, *x);
                    for r in 0..*reps {
                        for i in 0..numel {
                            buf[i] += g[r * numel + i];
                        }
                    }
                }
            }

            Op::AddBias { x, b } => {
                if self.wants(*x) {
                    for (o, &gv) in self.buf(grads, *x).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if self.wants(*b) {
                    let bn = self.nodes[b.0].value.numel();
                    let buf = self.buf(grads, *b);
                    for row in g.chunks_exact(bn) {
                        for (o, &gv) in buf.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }

            Op::SumAll { x } => {
                if self.wants(*x) {
                    for o in self.buf(grads, *x).iter_mut() {
                        *o += g[0];
                    }
                }
            }

            Op::MeanAll { x } => {
                if self.wants(*x) {
                    let inv = S::ONE / S::from_f64(self.nodes[x.0].value.numel() as f64);
                    for o in self.buf(grads, *x).iter_mut() {
                        *o += g[0] * inv;
                    }
                }
            }

            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                if self.wants(*x) {
                    let in_shape = self.nodes[x.0].value.shape().to_vec();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let dim = in_shape[*axis];
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                        S::ONE / S::from_f64(dim as f64)
                    } else {
                        S::ONE
                    };
                    let buf = self.buf(grads, *x);
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            for i in 0..inner {
                                buf[base + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }

            Op::Relu { x } => {
                if self.wants(*x) {
                    let xd = self.nodes[x.0].value.data();
                    for ((o, &gv), &xv) in self.buf(grads, *x).iter_mut().zip(g).zip(xd) {
                        if xv > S::ZERO {
                            *o += gv;
                        }
                    }
                }
            }

            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xd = self.nodes[x.0].value.data();
                    for ((o, &gv), &xv) in self.buf(grads, *x).iter_mut().zip(g).zip(xd) {
                        *o += gv * gelu_bwd(xv);
                    }
                }
            }

            Op::ElemWise { x, df, .. } => {
                if self.wants(*x) {
                    let xd = self.nodes[x.0].value.data();
                    for ((o, &gv), &xv) in self.buf(grads, *x).iter_mut().zip(g).zip(xd) {
                        *o += gv * df(xv);
                    }
                }
            }

            Op::SoftmaxT { x, t } => {
                if self.wants(*x) {
                    let out = node.value.data();
                    let dim = *node.value.shape().last().unwrap();
                    let rows = out.len() / dim;
                    let inv_t = S::ONE / *t;
                    let buf = self.buf(grads, *x);
                    for r in 0..rows {
                        let s = &out[r * dim..(r + 1) * dim];
                        let gr = &g[r * dim..(r + 1) * dim];
                        let mut dot = S::ZERO;
                        for (gv, sv) in gr.iter().zip(s) {
                            dot += *gv * *sv;
                        }
                        let br = &mut buf[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            br[j] += s[j] * (gr[j] - dot) * inv_t;
                        }
                    }
                }
            }

            Op::LayerNorm { x, gamma, beta } => {
                let xv = self.nodes[x.0].value.data();
                let dim = *self.nodes[x.0].value.shape().last().unwrap();
                let rows = xv.len() / dim;
                let eps = S::from_f64(LAYER_NORM_EPS);
                let gd = self.nodes[gamma.0].value.data();
                let dim_s = S::from_f64(dim as f64);

                // dgamma / dbeta accumulate over rows
                let mut dgamma = vec![S::ZERO; dim];
                let mut dbeta = vec![S::ZERO; dim];
                let want_x = self.wants(*x);
                let mut dx = if want_x { vec![S::ZERO; xv.len()] } else { Vec::new() };

                for r in 0..rows {
                    let src = &xv[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let (mean, var) = row_moments(src);
                    let inv_std = S::ONE / (var + eps).sqrt();
                    let mut sum_dxhat = S::ZERO;
                    let mut sum_dxhat_xhat = S::ZERO;
                    for j in 0..dim {
                        let xhat = (src[j] - mean) * inv_std;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        let dxhat = gr[j] * gd[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    if want_x {
                        let out_row = &mut dx[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            let xhat = (src[j] - mean) * inv_std;
                            let dxhat = gr[j] * gd[j];
                            out_row[j] =
                                inv_std / dim_s * (dim_s * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                        }
                    }
                }
                if want_x {
                    for (o, &v) in self.buf(grads, *x).iter_mut().zip(&dx) {
                        *o += v;
                    }
                }
                if self.wants(*gamma) {
                    for (o, &v) in self.buf(grads, *gamma).iter_mut().zip(&dgamma) {
                        *o += v;
                    }
                }
                if self.wants(*beta) {
                    for (o, &v) in self.buf(grads, *beta).iter_mut().zip(&dbeta) {
                        *o += v;
                    }
                }
            }

            Op::AvgPool2d { x, k, stride } => {
                if self.wants(*x) {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let ho = (h - k) / stride + 1;
                    let wo = (w - k) / stride + 1;
                    let inv = S::ONE / S::from_f64((k * k) as f64);
                    let buf = self.buf(grads, *x);
                    for bi in 0..b {
                        for ci in 0..c {
                            let plane = (bi * c + ci) * h * w;
                            let gplane = (bi * c + ci) * ho * wo;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gv = g[gplane + oy * wo + ox] * inv;
                                    for ky in 0..*k {
                                        let row = plane + (oy * stride + ky) * w + ox * stride;
                                        for kx in 0..*k {
                                            buf[row + kx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }

            Op::Im2col { x, geom } => {
                if self.wants(*x) {
                    let b = self.nodes[x.0].value.shape()[0];
                    let (ho, wo) = geom.out_hw();
                    let k = geom.k;
                    let cols = geom.c * k * k;
                    let buf = self.buf(grads, *x);
                    for bi in 0..b {
                        for oy in 0..ho {
                            let out_row = (bi * ho + oy) * wo;
                            for ci in 0..geom.c {
                                let plane = (bi * geom.c + ci) * geom.h * geom.w;
                                for ky in 0..k {
                                    let iy =
                                        (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    if iy < 0 || iy >= geom.h as isize {
                                        continue;
                                    }
                                    let src_row = plane + iy as usize * geom.w;
                                    let dst_off = (ci * k + ky) * k;
                                    for ox in 0..wo {
                                        let x0 = (ox * geom.stride) as isize - geom.pad as isize;
                                        let kx_lo = (-x0).max(0) as usize;
                                        let kx_hi = (geom.w as isize - x0).min(k as isize) as usize;
                                        if kx_lo >= kx_hi {
                                            continue;
                                        }
                                        let src = src_row + (x0 + kx_lo as isize) as usize;
                                        let dst = (out_row + ox) * cols + dst_off + kx_lo;
                                        for off in 0..kx_hi - kx_lo {
                                            buf[src + off] += g[dst + off];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }

            Op::Patchify { x, p } => {
                if self.wants(*x) {
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (gh, gw) = (h / p, w / p);
                    let n = gh * gw;
                    let plen = p * p * c;
                    let buf = self.buf(grads, *x);
                    for bi in 0..b {
                        for gy in 0..gh {
                            for gx in 0..gw {
                                let pi = gy * gw + gx;
                                let src = (bi * n + pi) * plen;
                                for ci in 0..c {
                                    let plane = (bi * c + ci) * h * w;
                                    for py in 0..*p {
                                        let dst = plane + (gy * p + py) * w + gx * p;
                                        let s0 = src + (ci * p + py) * p;
                                        for px in 0..*p {
                                            buf[dst + px] += g[s0 + px];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }

            Op::CrossEntropy { logits, labels, mean } => {
                if self.wants(*logits) {
                    let lv = self.nodes[logits.0].value.data();
                    let classes = self.nodes[logits.0].value.shape()[1];
                    let batch = labels.len();
                    let scale = if *mean {
                        g[0] / S::from_f64(batch as f64)
                    } else {
                        g[0]
                    };
                    let buf = self.buf(grads, *logits);
                    for (b, &label) in labels.iter().enumerate() {
                        let row = &lv[b * classes..(b + 1) * classes];
                        let mut max = row[0];
                        for &v in row {
                            max = max.maximum(v);
                        }
                        let mut sum = S::ZERO;
                        for &v in row {
                            sum += (v - max).exp();
                        }
                        let out_row = &mut buf[b * classes..(b + 1) * classes];
                        for cix in 0..classes {
                            let p = (row[cix] - max).exp() / sum;
                            let onehot = if cix == label { S::ONE } else { S::ZERO };
                            out_row[cix] += (p - onehot) * scale;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn row_moments<S: Scalar>(row: &[S]) -> (S, S) {
    let inv = S::ONE / S::from_f64(row.len() as f64);
    let mut mean = S::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean * inv;
    let mut var = S::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    (mean, var * inv)
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::ONE + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    let du = c * (S::ONE + three * a * x * x);
    half * (S::ONE + t) + half * x * sech2 * du
}

/// `out[m,n] += a[m,k] . b[k,n]`, accumulating. The single dense kernel
/// shared by forward, both matmul adjoints, and convolution via im2col.
/// The k-dimension is unrolled 4-wide so narrow outputs (conv with few
/// channels) still amortize the pass over the output row.
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let k4 = k - k % 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p < k4 {
            let a0 = arow[p];
            let a1 = arow[p + 1];
            let a2 = arow[p + 2];
            let a3 = arow[p + 3];
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            p += 4;
        }
        for (pp, &av) in arow.iter().enumerate().skip(k4) {
            let brow = &b[pp * n..(pp + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `out[k,n] += a[m,k]^T . g[m,n]` as rank-1 updates per input row, so the
/// large operand is streamed once and never materialized transposed.
pub(crate) fn matmul_tn_acc<S: Scalar>(
    a: &[S],
    g: &[S],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [S],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (ov, &gv) in orow.iter_mut().zip(grow) {
                *ov += av * gv;
            }
        }
    }
}

pub(crate) fn transpose2d<S: Scalar>(data: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn permute_data<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let in_shape = x.shape();
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides_of(in_shape);
    // source stride per output axis; walk the output space with an odometer
    // so no per-element division is needed
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = vec![S::ZERO; x.numel()];
    let xd = x.data();
    if rank == 0 {
        data[0] = xd[0];
        return Tensor::new(out_shape, data);
    }
    // fast path: innermost axis contiguous in both layouts
    let inner_contiguous = axes[rank - 1] == rank - 1;
    let inner = if inner_contiguous { out_shape[rank - 1] } else { 1 };
    let outer_rank = if inner_contiguous { rank - 1 } else { rank };
    let mut coords = vec![0usize; outer_rank];
    let mut src = 0usize;
    let total = x.numel() / inner;
    for out_i in 0..total {
        if inner_contiguous {
            data[out_i * inner..(out_i + 1) * inner].copy_from_slice(&xd[src..src + inner]);
        } else {
            data[out_i] = xd[src];
        }
        if out_i + 1 == total {
            break;
        }
        for d in (0..outer_rank).rev() {
            coords[d] += 1;
            src += src_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= src_strides[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, data)
}
