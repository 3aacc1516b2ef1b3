//! Reverse-mode automatic differentiation on a per-forward-pass tape.
//!
//! A [`Graph`] records every operation in execution order. Values are computed
//! eagerly; [`Graph::backward`] walks the tape once in reverse and returns the
//! adjoints of all leaves that require gradients. Operations never mutate
//! their inputs.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Mix { a: Var, b: Var, w: Var },
    ScaleBy { x: Var, s: Var, index: usize },
    Sigmoid(Var),
    Gelu(Var),
    Bmm { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    MulChannel { x: Var, gate: Var },
    Conv3x3 { x: Var, kernel: Var, stride: usize },
    Depthwise { x: Var, kernel: Var, groups: usize },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: S },
    GlobalAvgPool(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanLastdim(Var),
    L2NormLastdim(Var),
    GatherRows { x: Var, indices: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Adjoints produced by [`Graph::backward`], indexed by leaf.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a leaf, `None` if the leaf does not require gradients or
    /// the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::dim(op, a, b))
    }
}

/// Splits `shape` at `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn lastdim_reduced(shape: &[usize]) -> Vec<usize> {
    if shape.len() == 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data).expect("operation produced consistent tensor");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Vec<S>> {
        same_shape(op, self.shape(a), self.shape(b))?;
        Ok(self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect())
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let data = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), &[x])
    }

    /// `(1 - w) * a + w * b` with `w` a one-element tensor.
    pub fn mix(&mut self, a: Var, b: Var, w: Var) -> Result<Var> {
        if self.value(w).numel() != 1 {
            return Err(Error::dim("mix", self.shape(w), &[1]));
        }
        let wv = self.value(w).item();
        let one_minus = S::one() - wv;
        // The endpoints return an operand verbatim so signed zeros survive.
        let data = self.zip_with("mix", a, b, |x, y| {
            if wv == S::zero() {
                x
            } else if wv == S::one() {
                y
            } else {
                one_minus * x + wv * y
            }
        })?;
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mix { a, b, w }, &[a, b, w]))
    }

    /// Multiplies `x` by the element `s[index]`.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        if index >= self.value(s).numel() {
            return Err(Error::Contract(format!("scale_by index {index} out of range for {:?}", self.shape(s))));
        }
        let c = self.data(s)[index];
        let data = self.data(x).iter().map(|&v| v * c).collect();
        Ok(self.push(self.shape(x).to_vec(), data, Op::ScaleBy { x, s, index }, &[x, s]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Sigmoid(x), &[x])
    }

    /// GELU in the exact Gaussian-CDF form `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v * normal_cdf(v)).collect();
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), &[x])
    }

    // ----- products ----------------------------------------------------

    fn bmm_impl(&mut self, a: Var, b: Var, batched: bool, trans_b: bool) -> Result<Var> {
        let op = match (batched, trans_b) {
            (false, false) => "matmul",
            (false, true) => "matmul_nt",
            (true, false) => "bmm",
            (true, true) => "bmm_nt",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rank = if batched { 3 } else { 2 };
        if sa.len() != rank || sb.len() != rank {
            return Err(Error::dim(op, &sa, &sb));
        }
        let (batch, m, k) = if batched { (sa[0], sa[1], sa[2]) } else { (1, sa[0], sa[1]) };
        let (bb, r0, r1) = if batched { (sb[0], sb[1], sb[2]) } else { (1, sb[0], sb[1]) };
        let (kb, n) = if trans_b { (r1, r0) } else { (r0, r1) };
        if bb != batch || kb != k {
            return Err(Error::dim(op, &sa, &sb));
        }
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            for i in 0..batch {
                let am = MatRef::row_major(&ad[i * m * k..(i + 1) * m * k], k);
                let bs = &bd[i * k * n..(i + 1) * k * n];
                let bm = if trans_b { MatRef::transposed(bs, k) } else { MatRef::row_major(bs, n) };
                S::gemm(m, k, n, S::one(), am, bm, S::zero(), &mut out[i * m * n..(i + 1) * m * n]);
            }
        }
        let shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(shape, out, Op::Bmm { a, b, batch, m, k, n, trans_b }, &[a, b]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false, false)
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false, true)
    }

    /// Batched `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true, false)
    }

    /// Batched `[B, m, k] x [B, n, k]^T -> [B, m, n]`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true, true)
    }

    /// Applies `x . weight (+ bias)` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let cin = *shape.last().expect("non-empty shape");
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::dim("linear", &shape, &ws));
        }
        let rows = shape.iter().product::<usize>() / cin;
        let flat = self.reshape(x, [rows, cin])?;
        let mut y = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            y = self.add_bias(y, b)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty shape") = ws[1];
        self.reshape(y, out_shape)
    }

    /// Adds `bias[C]` along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        let c = *sx.last().expect("non-empty shape");
        if sb != [c] {
            return Err(Error::dim("add_bias", &sx, &sb));
        }
        let bd = self.data(bias);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bd[i % c]).collect();
        Ok(self.push(sx, data, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Adds `bias[C]` to axis 1 of a `(B, C, ...)` tensor.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(Error::dim("add_channel_bias", &sx, &sb));
        }
        let (c, inner) = (sx[1], sx[2..].iter().product::<usize>());
        let bd = self.data(bias);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bd[(i / inner) % c]).collect();
        Ok(self.push(sx, data, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    /// Multiplies `(B, C, ...)` by a per-(B, C) gate broadcast over trailing axes.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x).to_vec(), self.shape(gate).to_vec());
        if sx.len() < 2 || sg != sx[..2] {
            return Err(Error::dim("mul_channel", &sx, &sg));
        }
        let inner = sx[2..].iter().product::<usize>();
        let gd = self.data(gate);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v * gd[i / inner]).collect();
        Ok(self.push(sx, data, Op::MulChannel { x, gate }, &[x, gate]))
    }

    // ----- convolutions ------------------------------------------------

    /// 3x3 cross-correlation with padding 1.
    ///
    /// `x` is (B, Cin, H, W), `kernel` is (Cout, Cin, 3, 3).
    pub fn conv3x3(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::dim("conv3x3", &sx, &sk));
        }
        if stride == 0 {
            return Err(Error::Contract("conv3x3 stride must be positive".into()));
        }
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let cout = sk[0];
        let (ho, wo) = (kernels::conv_out_extent(h, stride), kernels::conv_out_extent(w, stride));
        let cols = kernels::im2col3x3(self.data(x), b, cin, h, w, stride);
        let rows = b * ho * wo;
        let mut out_t = vec![S::zero(); rows * cout];
        S::gemm(
            rows,
            cin * 9,
            cout,
            S::one(),
            MatRef::row_major(&cols, cin * 9),
            MatRef::transposed(self.data(kernel), cin * 9),
            S::zero(),
            &mut out_t,
        );
        let out = kernels::permute(&out_t, &[b, ho * wo, cout], &[0, 2, 1]);
        Ok(self.push(vec![b, cout, ho, wo], out, Op::Conv3x3 { x, kernel, stride }, &[x, kernel]))
    }

    /// Channel-wise 3x3 cross-correlation, stride 1, padding 1.
    ///
    /// `x` is (B, C, H, W), `kernel` is (C, 3, 3).
    pub fn depthwise_conv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        self.depthwise_conv3x3_grouped(x, kernel, 1)
    }

    /// Channel-wise 3x3 convolution over channel groups folded into the batch.
    ///
    /// `x` is (B, C, H, W) with `B` a multiple of `groups`; `kernel` is
    /// (C * groups, 3, 3) and batch item `b` uses filters
    /// `(b % groups) * C .. (b % groups + 1) * C`.
    pub fn depthwise_conv3x3_grouped(&mut self, x: Var, kernel: Var, groups: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 3 || sk[1] != 3 || sk[2] != 3 || groups == 0 || sk[0] != sx[1] * groups || sx[0] % groups != 0 {
            return Err(Error::dim("depthwise_conv3x3", &sx, &sk));
        }
        let dims = [sx[0], sx[1], sx[2], sx[3]];
        let mut out = vec![S::zero(); sx.iter().product()];
        kernels::depthwise3x3(self.data(x), self.data(kernel), dims, groups, &mut out);
        Ok(self.push(sx, out, Op::Depthwise { x, kernel, groups }, &[x, kernel]))
    }

    // ----- normalizations ----------------------------------------------

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(shape, out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("non-empty shape");
        same_shape("layer_norm", self.shape(gain), &[c])?;
        same_shape("layer_norm", self.shape(bias), &[c])?;
        let (gd, bd) = (self.data(gain), self.data(bias));
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks(c) {
            let (mean, rstd) = moments(row, eps);
            out.extend(row.iter().enumerate().map(|(i, &v)| (v - mean) * rstd * gd[i] + bd[i]));
        }
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias]))
    }

    // ----- reductions --------------------------------------------------

    /// Mean over all axes after the first two: `(B, C, ...) -> (B, C)`.
    pub fn global_avg_pool_spatial(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 {
            return Err(Error::dim("global_avg_pool_spatial", &shape, &[]));
        }
        let inner: usize = shape[2..].iter().product();
        let scale = S::one() / S::lit(inner as f64);
        let out = self.data(x).chunks(inner).map(|p| p.iter().copied().sum::<S>() * scale).collect();
        Ok(self.push(shape[..2].to_vec(), out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = S::lit(self.value(x).numel() as f64);
        let s = self.value(x).sum() / n;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_lastdim(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let inv = S::one() / S::lit(n as f64);
        let out = self.data(x).chunks(n).map(|r| r.iter().copied().sum::<S>() * inv).collect();
        self.push(lastdim_reduced(&shape), out, Op::MeanLastdim(x), &[x])
    }

    /// Euclidean norm over the last axis, dropping it.
    pub fn l2_norm_lastdim(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let out = self.data(x).chunks(n).map(|r| r.iter().map(|&v| v * v).sum::<S>().sqrt()).collect();
        self.push(lastdim_reduced(&shape), out, Op::L2NormLastdim(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits[Q, N]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dim("cross_entropy", &shape, &[targets.len()]));
        }
        let n = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!("cross_entropy target {t} out of range for {n} classes")));
        }
        let mut total = S::zero();
        for (row, &t) in self.data(logits).chunks(n).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / S::lit(targets.len() as f64);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec() }, &[logits]))
    }

    // ----- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape, data, Op::Reshape(x), &[x]))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &shape, axes));
        }
        let out = kernels::permute(self.data(x), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.push(out_shape, out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::dim("transpose", self.shape(x), &[a, b]));
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * block..(o + 1) * block]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Concatenation along axis 1 of `(N, T, ...)` tensors.
    pub fn concat_time(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 1)
    }

    /// The sub-range `start .. start + len` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[axis, start, len]));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        let d = self.data(x);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Selects rows of a `(rows, D)` matrix.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::dim("gather_rows", &shape, &[indices.len()]));
        }
        let d = shape[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![indices.len(), d], out, Op::GatherRows { x, indices: indices.to_vec() }, &[x]))
    }

    // ----- reverse pass ------------------------------------------------

    /// Propagates adjoints from a one-element `loss` back to every leaf.
    ///
    /// Each node is visited once, in reverse recording order; contributions
    /// from multiple uses of a value are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        let mut leaf_grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"));
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, contribution: Vec<S>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl FnOnce(&mut [S])) {
        if !self.wants(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bd).map(|(&gv, &y)| gv * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(ad).map(|(&gv, &x)| gv * x).collect());
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Mix { a, b, w } => {
                let wv = self.value(*w).item();
                if self.wants(*a) {
                    let k = S::one() - wv;
                    self.accumulate(grads, *a, g.iter().map(|&v| v * k).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().map(|&v| v * wv).collect());
                }
                if self.wants(*w) {
                    let (ad, bd) = (self.data(*a), self.data(*b));
                    let dw: S = g.iter().zip(ad.iter().zip(bd)).map(|(&gv, (&x, &y))| gv * (y - x)).sum();
                    self.accumulate(grads, *w, vec![dw]);
                }
            }
            Op::ScaleBy { x, s, index } => {
                let c = self.data(*s)[*index];
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.iter().map(|&v| v * c).collect());
                }
                let xd = self.data(*x);
                let index = *index;
                self.accumulate_with(grads, *s, |ds| {
                    ds[index] += g.iter().zip(xd).map(|(&gv, &v)| gv * v).sum::<S>();
                });
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.iter().zip(out).map(|(&gv, &y)| gv * y * (S::one() - y)).collect());
                }
            }
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xd = self.data(*x);
                    self.accumulate(grads, *x, g.iter().zip(xd).map(|(&gv, &v)| gv * gelu_derivative(v)).collect());
                }
            }
            Op::Bmm { a, b, batch, m, k, n, trans_b } => {
                let (m, k, n) = (*m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    let mut da = vec![S::zero(); batch * m * k];
                    for i in 0..*batch {
                        let gm = MatRef::row_major(&g[i * m * n..(i + 1) * m * n], n);
                        let bs = &bd[i * k * n..(i + 1) * k * n];
                        // C = A B  => dA = G B^T ; C = A B^T => dA = G B
                        let bm = if *trans_b { MatRef::row_major(bs, k) } else { MatRef::transposed(bs, n) };
                        S::gemm(m, n, k, S::one(), gm, bm, S::zero(), &mut da[i * m * k..(i + 1) * m * k]);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![S::zero(); batch * k * n];
                    for i in 0..*batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let am = &ad[i * m * k..(i + 1) * m * k];
                        let dst = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB (n x k) = G^T A
                            S::gemm(n, m, k, S::one(), MatRef::transposed(gs, n), MatRef::row_major(am, k), S::zero(), dst);
                        } else {
                            // dB (k x n) = A^T G
                            S::gemm(k, m, n, S::one(), MatRef::transposed(am, k), MatRef::row_major(gs, n), S::zero(), dst);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
                let c = self.value(*bias).numel();
                self.accumulate_with(grads, *bias, |db| {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % c] += gv;
                    }
                });
            }
            Op::AddChannelBias { x, bias } => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
                let shape = self.shape(*x);
                let (c, inner) = (shape[1], shape[2..].iter().product::<usize>());
                self.accumulate_with(grads, *bias, |db| {
                    for (blk, chunk) in g.chunks(inner).enumerate() {
                        db[blk % c] += chunk.iter().copied().sum::<S>();
                    }
                });
            }
            Op::MulChannel { x, gate } => {
                let inner = self.shape(*x)[2..].iter().product::<usize>();
                let (xd, gd) = (self.data(*x), self.data(*gate));
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.iter().enumerate().map(|(i, &gv)| gv * gd[i / inner]).collect());
                }
                self.accumulate_with(grads, *gate, |dg| {
                    for (blk, (gc, xc)) in g.chunks(inner).zip(xd.chunks(inner)).enumerate() {
                        dg[blk] += gc.iter().zip(xc).map(|(&a, &b)| a * b).sum::<S>();
                    }
                });
            }
            Op::Conv3x3 { x, kernel, stride } => {
                let sx = self.shape(*x);
                let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let cout = self.shape(*kernel)[0];
                let os = node.value.shape();
                let hw = os[2] * os[3];
                let rows = b * hw;
                // g is (B, Cout, Ho*Wo); bring it to rows x Cout.
                let g_t = kernels::permute(g, &[b, cout, hw], &[0, 2, 1]);
                if self.wants(*kernel) {
                    let cols = kernels::im2col3x3(self.data(*x), b, cin, h, w, *stride);
                    let mut dk = vec![S::zero(); cout * cin * 9];
                    S::gemm(
                        cout,
                        rows,
                        cin * 9,
                        S::one(),
                        MatRef::transposed(&g_t, cout),
                        MatRef::row_major(&cols, cin * 9),
                        S::zero(),
                        &mut dk,
                    );
                    self.accumulate(grads, *kernel, dk);
                }
                if self.wants(*x) {
                    let mut dcols = vec![S::zero(); rows * cin * 9];
                    S::gemm(
                        rows,
                        cout,
                        cin * 9,
                        S::one(),
                        MatRef::row_major(&g_t, cout),
                        MatRef::row_major(self.data(*kernel), cin * 9),
                        S::zero(),
                        &mut dcols,
                    );
                    let stride = *stride;
                    self.accumulate_with(grads, *x, |dx| kernels::col2im3x3(&dcols, b, cin, h, w, stride, dx));
                }
            }
            Op::Depthwise { x, kernel, groups } => {
                let sx = self.shape(*x);
                let dims = [sx[0], sx[1], sx[2], sx[3]];
                let (xd, kd) = (self.data(*x), self.data(*kernel));
                let mut dx = self.wants(*x).then(|| vec![S::zero(); xd.len()]);
                let mut dk = self.wants(*kernel).then(|| vec![S::zero(); kd.len()]);
                kernels::depthwise3x3_backward(xd, kd, g, dims, *groups, dx.as_deref_mut(), dk.as_deref_mut());
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dk) = dk {
                    self.accumulate(grads, *kernel, dk);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let n = *node.value.shape().last().expect("non-empty shape");
                    let mut dx = Vec::with_capacity(g.len());
                    for (gr, yr) in g.chunks(n).zip(out.chunks(n)) {
                        let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        dx.extend(gr.iter().zip(yr).map(|(&gv, &y)| y * (gv - dot)));
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let c = self.value(*gain).numel();
                let (xd, gd) = (self.data(*x), self.data(*gain));
                let cs = S::lit(c as f64);
                let mut dx = self.wants(*x).then(|| Vec::with_capacity(xd.len()));
                let mut dgain = vec![S::zero(); c];
                let mut dbias = vec![S::zero(); c];
                for (xr, gr) in xd.chunks(c).zip(g.chunks(c)) {
                    let (mean, rstd) = moments(xr, *eps);
                    let mut sum_d = S::zero();
                    let mut sum_dx = S::zero();
                    for i in 0..c {
                        let xhat = (xr[i] - mean) * rstd;
                        dgain[i] += gr[i] * xhat;
                        dbias[i] += gr[i];
                        let d = gr[i] * gd[i];
                        sum_d += d;
                        sum_dx += d * xhat;
                    }
                    if let Some(dx) = dx.as_mut() {
                        for i in 0..c {
                            let xhat = (xr[i] - mean) * rstd;
                            let d = gr[i] * gd[i];
                            dx.push(rstd * (d - sum_d / cs - xhat * sum_dx / cs));
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gain) {
                    self.accumulate(grads, *gain, dgain);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, dbias);
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let inner: usize = self.shape(*x)[2..].iter().product();
                    let scale = S::one() / S::lit(inner as f64);
                    let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * scale, inner)).collect();
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).numel();
                    self.accumulate(grads, *x, vec![g[0] / S::lit(n as f64); n]);
                }
            }
            Op::MeanLastdim(x) => {
                if self.wants(*x) {
                    let n = *self.shape(*x).last().expect("non-empty shape");
                    let inv = S::one() / S::lit(n as f64);
                    let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, n)).collect();
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::L2NormLastdim(x) => {
                if self.wants(*x) {
                    let n = *self.shape(*x).last().expect("non-empty shape");
                    let xd = self.data(*x);
                    let mut dx = Vec::with_capacity(xd.len());
                    for ((xr, &norm), &gv) in xd.chunks(n).zip(out).zip(g) {
                        // Zero subgradient at the origin.
                        if norm > S::zero() {
                            dx.extend(xr.iter().map(|&v| gv * v / norm));
                        } else {
                            dx.extend(std::iter::repeat_n(S::zero(), n));
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let n = self.shape(*logits)[1];
                    let scale = g[0] / S::lit(targets.len() as f64);
                    let mut dx = self.data(*logits).to_vec();
                    for (row, &t) in dx.chunks_mut(n).zip(targets) {
                        softmax_in_place(row);
                        row[t] -= S::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    self.accumulate(grads, *logits, dx);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.to_vec());
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let dx = kernels::permute(g, node.value.shape(), &kernels::inverse_axes(axes));
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let extent = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * extent * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + extent * inner]);
                        }
                        self.accumulate(grads, v, dv);
                    }
                    offset += extent;
                }
            }
            Op::Narrow { x, axis, start } => {
                let len = node.value.shape()[*axis];
                let (outer, extent, inner) = split_axis(self.shape(*x), *axis);
                let start = *start;
                self.accumulate_with(grads, *x, |dx| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        for i in 0..len * inner {
                            dx[dst + i] += g[src + i];
                        }
                    }
                });
            }
            Op::GatherRows { x, indices } => {
                let d = self.shape(*x)[1];
                self.accumulate_with(grads, *x, |dx| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dx[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn normal_cdf<S: Scalar>(v: S) -> S {
    S::lit(0.5) * (S::one() + (v * S::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_derivative<S: Scalar>(v: S) -> S {
    let pdf = (-(v * v) * S::lit(0.5)).exp() * S::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    normal_cdf(v) + v * pdf
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln()
}

/// Mean and reciprocal standard deviation (biased variance plus `eps`).
fn moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::lit(row.len() as f64);
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + eps).sqrt())
}
