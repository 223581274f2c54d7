//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and the recipe
//! for propagating gradients to its parents. Nodes only reference earlier
//! nodes, so a single reverse sweep is a valid topological order.
//!
//! Repeated `backward` calls accumulate into the persistent per-node
//! gradients; call [`Tape::zero_grads`] to reset between uses.

use rand::{Rng, RngCore};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    AddChannelBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Abs(NodeId),
    MinElem(NodeId, NodeId),
    MaxElem(NodeId, NodeId),
    SoftmaxLastDim(NodeId),
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    },
    Sum(NodeId),
    Pick {
        input: NodeId,
        indices: Vec<usize>,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Dropout {
        input: NodeId,
        mask: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded gradient tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Row-major matrix product `out += a[m,k] * b[k,n]`.
pub(crate) fn matmul_accum(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn softmax_rows(data: &[f64], row_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (row, out_row) in data.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            shape,
            data,
            grad: Vec::new(),
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers a tensor as a leaf; gradient participation follows
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_data(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape, data, false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.push(vec![1], vec![value], false, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    /// Accumulated gradient of a node; empty slice before any backward pass.
    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    /// Detached copy of a node's value.
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(
            self.nodes[id.0].shape.clone(),
            self.nodes[id.0].data.clone(),
        )
        .expect("node shape is consistent")
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.clear();
        }
    }

    fn shape2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(CoreError::ShapeMismatch {
                op,
                lhs: self.nodes[id.0].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ── op constructors ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let mut data = vec![0.0; m * n];
        matmul_accum(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut data,
        );
        let rg = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(vec![m, n], data, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape2(a, "transpose")?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.wants_grad(a);
        Ok(self.push(vec![n, m], data, rg, Op::Transpose(a)))
    }

    fn elementwise_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.wants_grad(a) || self.wants_grad(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "min_elem", f64::min, Op::MinElem(a, b))
    }

    pub fn max_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_binary(a, b, "max_elem", f64::max, Op::MaxElem(a, b))
    }

    /// `[m,n] + [n]`, the bias pattern of affine layers.
    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape2(a, "add_row_broadcast")?;
        if self.nodes[bias.0].shape != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let mut data = self.nodes[a.0].data.clone();
        let bias_data = &self.nodes[bias.0].data;
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bias_data[j];
            }
        }
        let rg = self.wants_grad(a) || self.wants_grad(bias);
        Ok(self.push(vec![m, n], data, rg, Op::AddRowBroadcast(a, bias)))
    }

    /// `[C,H,W] + [C]`, the bias pattern of convolutions.
    pub fn add_channel_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 3 || self.nodes[bias.0].shape != [shape[0]] {
            return Err(CoreError::ShapeMismatch {
                op: "add_channel_bias",
                lhs: shape,
                rhs: self.nodes[bias.0].shape.clone(),
            });
        }
        let plane = shape[1] * shape[2];
        let mut data = self.nodes[a.0].data.clone();
        for c in 0..shape[0] {
            let b = self.nodes[bias.0].data[c];
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
        let rg = self.wants_grad(a) || self.wants_grad(bias);
        Ok(self.push(shape, data, rg, Op::AddChannelBias(a, bias)))
    }

    fn elementwise_unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeId {
        let data = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let rg = self.wants_grad(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, op)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.elementwise_unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.elementwise_unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.elementwise_unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.elementwise_unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.elementwise_unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.elementwise_unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.elementwise_unary(a, f64::abs, Op::Abs(a))
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, a: NodeId) -> NodeId {
        let shape = self.nodes[a.0].shape.clone();
        let row_len = *shape.last().expect("tensor has at least one dim");
        let data = softmax_rows(&self.nodes[a.0].data, row_len);
        let rg = self.wants_grad(a);
        self.push(shape, data, rg, Op::SoftmaxLastDim(a))
    }

    /// Cross-correlation of `[C_in,H,W]` with `[C_out,C_in,k,k]` kernels.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let in_shape = self.nodes[input.0].shape.clone();
        let ker_shape = self.nodes[kernels.0].shape.clone();
        let (c_in, h, w) = match in_shape[..] {
            [c, h, w] => (c, h, w),
            _ => {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d",
                    lhs: in_shape,
                    rhs: ker_shape,
                })
            }
        };
        let (c_out, kc, kh, kw) = match ker_shape[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d",
                    lhs: in_shape,
                    rhs: ker_shape,
                })
            }
        };
        if kc != c_in || kh != kw {
            return Err(CoreError::ShapeMismatch {
                op: "conv2d",
                lhs: in_shape,
                rhs: ker_shape,
            });
        }
        if stride == 0 {
            return Err(CoreError::Config("conv2d stride must be positive".into()));
        }
        let k = kh;
        let h_out = (h + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
        let w_out = (w + 2 * padding).checked_sub(k).map(|v| v / stride + 1);
        let (h_out, w_out) = match (h_out, w_out) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(CoreError::ShapeMismatch {
                    op: "conv2d (non-positive output size)",
                    lhs: in_shape,
                    rhs: ker_shape,
                })
            }
        };

        let x = &self.nodes[input.0].data;
        let ker = &self.nodes[kernels.0].data;
        let mut out = vec![0.0; c_out * h_out * w_out];
        for o in 0..c_out {
            for oy in 0..h_out {
                for ox in 0..w_out {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for u in 0..k {
                            let iy = (oy * stride + u) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for v in 0..k {
                                let ix = (ox * stride + v) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x[(c * h + iy as usize) * w + ix as usize]
                                    * ker[((o * c_in + c) * k + u) * k + v];
                            }
                        }
                    }
                    out[(o * h_out + oy) * w_out + ox] = acc;
                }
            }
        }
        let rg = self.wants_grad(input) || self.wants_grad(kernels);
        Ok(self.push(
            vec![c_out, h_out, w_out],
            out,
            rg,
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            },
        ))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.wants_grad(a);
        self.push(vec![1], vec![total], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].data.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Gathers flat `indices` from `input` into a node of shape `out_shape`.
    pub fn pick(&mut self, input: NodeId, indices: Vec<usize>, out_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(CoreError::Contract(format!(
                "pick: {} indices for output shape {out_shape:?}",
                indices.len()
            )));
        }
        let src = &self.nodes[input.0].data;
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(CoreError::Contract(format!(
                "pick: index {bad} out of bounds for {} elements",
                src.len()
            )));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let rg = self.wants_grad(input);
        Ok(self.push(out_shape, data, rg, Op::Pick { input, indices }))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.shape2(a, "slice_cols")?;
        if start + len > n {
            return Err(CoreError::Contract(format!(
                "slice_cols: columns {start}..{} out of {n}",
                start + len
            )));
        }
        let indices = (0..m)
            .flat_map(|i| (start..start + len).map(move |j| i * n + j))
            .collect();
        self.pick(a, indices, vec![m, len])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::Contract("concat_cols of zero parts".into()));
        }
        let (m, _) = self.shape2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = self.shape2(p, "concat_cols")?;
            if mp != m {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.nodes[parts[0].0].shape.clone(),
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
            widths.push(np);
        }
        let n_total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n_total];
        let mut col = 0;
        for (&p, &np) in parts.iter().zip(&widths) {
            let src = &self.nodes[p.0].data;
            for i in 0..m {
                data[i * n_total + col..i * n_total + col + np]
                    .copy_from_slice(&src[i * np..(i + 1) * np]);
            }
            col += np;
        }
        let rg = parts.iter().any(|&p| self.wants_grad(p));
        Ok(self.push(vec![m, n_total], data, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.wants_grad(a);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.shape2(a, "layer_norm")?;
        if self.nodes[gamma.0].shape != [n] || self.nodes[beta.0].shape != [n] {
            return Err(CoreError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.wants_grad(a) || self.wants_grad(gamma) || self.wants_grad(beta);
        Ok(self.push(
            vec![m, n],
            data,
            rg,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Inverted dropout. Identity (and unrecorded) when `train` is false or
    /// `rate` is zero; the mask comes from the caller's RNG so runs are
    /// reproducible.
    pub fn dropout(
        &mut self,
        a: NodeId,
        rate: f64,
        rng: &mut dyn RngCore,
        train: bool,
    ) -> NodeId {
        if !train || rate == 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let rg = self.wants_grad(a);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            rg,
            Op::Dropout { input: a, mask },
        )
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land in each node's
    /// persistent buffer and add up across repeated calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // Fresh adjoints per sweep; merged into persistent buffers at the end
        // so repeated backward calls accumulate instead of compounding.
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|_| Vec::new()).collect();
        adj[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            self.propagate(i, &g, &mut adj);
            adj[i] = g;
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if a.is_empty() || !node.requires_grad {
                continue;
            }
            if node.grad.is_empty() {
                node.grad = a;
            } else {
                for (dst, src) in node.grad.iter_mut().zip(&a) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn ensure(&self, adj: &mut [Vec<f64>], id: NodeId) {
        if adj[id.0].is_empty() {
            adj[id.0] = vec![0.0; self.nodes[id.0].data.len()];
        }
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        macro_rules! flow {
            ($id:expr, $body:expr) => {{
                let id: NodeId = *$id;
                if self.nodes[id.0].requires_grad {
                    self.ensure(adj, id);
                    #[allow(clippy::redundant_closure_call)]
                    ($body)(&mut adj[id.0]);
                }
            }};
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let a_data = &self.nodes[a.0].data;
                let b_data = &self.nodes[b.0].data;
                flow!(a, |da: &mut Vec<f64>| {
                    // dA[i,p] += sum_j G[i,j] B[p,j]
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let b_row = &b_data[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for (gv, bv) in g_row.iter().zip(b_row) {
                                s += gv * bv;
                            }
                            da[r * k + p] += s;
                        }
                    }
                });
                flow!(b, |db: &mut Vec<f64>| {
                    // dB[p,j] += sum_i A[i,p] G[i,j]
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = a_data[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in db_row.iter_mut().zip(g_row) {
                                *d += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                flow!(a, |da: &mut Vec<f64>| {
                    for r in 0..n {
                        for c in 0..m {
                            da[c * n + r] += g[r * m + c];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
                flow!(b, |db: &mut Vec<f64>| for (d, gv) in db.iter_mut().zip(g) {
                    *d += gv;
                });
            }
            Op::Sub(a, b) => {
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
                flow!(b, |db: &mut Vec<f64>| for (d, gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                });
            }
            Op::AddRowBroadcast(a, bias) => {
                let n = self.nodes[bias.0].shape[0];
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
                flow!(bias, |db: &mut Vec<f64>| {
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                });
            }
            Op::AddChannelBias(a, bias) => {
                let plane = self.nodes[i].shape[1] * self.nodes[i].shape[2];
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
                flow!(bias, |db: &mut Vec<f64>| {
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx / plane] += gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let a_data = &self.nodes[a.0].data;
                let b_data = &self.nodes[b.0].data;
                flow!(a, |da: &mut Vec<f64>| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(b_data) {
                        *d += gv * bv;
                    }
                });
                flow!(b, |db: &mut Vec<f64>| {
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(a_data) {
                        *d += gv * av;
                    }
                });
            }
            Op::Div(a, b) => {
                let a_data = &self.nodes[a.0].data;
                let b_data = &self.nodes[b.0].data;
                flow!(a, |da: &mut Vec<f64>| {
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(b_data) {
                        *d += gv / bv;
                    }
                });
                flow!(b, |db: &mut Vec<f64>| {
                    for (idx, (d, gv)) in db.iter_mut().zip(g).enumerate() {
                        *d -= gv * a_data[idx] / (b_data[idx] * b_data[idx]);
                    }
                });
            }
            Op::Neg(a) => {
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d -= gv;
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                });
            }
            Op::AddScalar(a) => {
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
            }
            Op::Relu(a) => {
                let y = &self.nodes[i].data;
                flow!(a, |da: &mut Vec<f64>| {
                    for ((d, gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].data;
                flow!(a, |da: &mut Vec<f64>| {
                    for ((d, gv), &yv) in da.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Log(a) => {
                let x = &self.nodes[a.0].data;
                flow!(a, |da: &mut Vec<f64>| {
                    for ((d, gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gv / xv;
                    }
                });
            }
            Op::Abs(a) => {
                let x = &self.nodes[a.0].data;
                flow!(a, |da: &mut Vec<f64>| {
                    for ((d, gv), &xv) in da.iter_mut().zip(g).zip(x) {
                        *d += gv * if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                let take_a: Vec<bool> = {
                    let a_data = &self.nodes[a.0].data;
                    let b_data = &self.nodes[b.0].data;
                    let is_min = matches!(self.nodes[i].op, Op::MinElem(..));
                    a_data
                        .iter()
                        .zip(b_data)
                        .map(|(&x, &y)| if is_min { x <= y } else { x >= y })
                        .collect()
                };
                flow!(a, |da: &mut Vec<f64>| {
                    for ((d, gv), &t) in da.iter_mut().zip(g).zip(&take_a) {
                        if t {
                            *d += gv;
                        }
                    }
                });
                flow!(b, |db: &mut Vec<f64>| {
                    for ((d, gv), &t) in db.iter_mut().zip(g).zip(&take_a) {
                        if !t {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SoftmaxLastDim(a) => {
                let y = &self.nodes[i].data;
                let n = *self.nodes[i].shape.last().expect("nonempty shape");
                flow!(a, |da: &mut Vec<f64>| {
                    for r in 0..y.len() / n {
                        let y_row = &y[r * n..(r + 1) * n];
                        let g_row = &g[r * n..(r + 1) * n];
                        let dot: f64 = y_row.iter().zip(g_row).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            da[r * n + j] += y_row[j] * (g_row[j] - dot);
                        }
                    }
                });
            }
            Op::Conv2d {
                input,
                kernels,
                stride,
                padding,
            } => {
                let (stride, padding) = (*stride, *padding);
                let [c_in, h, w] = self.nodes[input.0].shape[..] else {
                    unreachable!()
                };
                let [c_out, _, k, _] = self.nodes[kernels.0].shape[..] else {
                    unreachable!()
                };
                let [_, h_out, w_out] = self.nodes[i].shape[..] else {
                    unreachable!()
                };
                let x = &self.nodes[input.0].data;
                let ker = &self.nodes[kernels.0].data;
                flow!(input, |dx: &mut Vec<f64>| {
                    for o in 0..c_out {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let gv = g[(o * h_out + oy) * w_out + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..c_in {
                                    for u in 0..k {
                                        let iy = (oy * stride + u) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for v in 0..k {
                                            let ix = (ox * stride + v) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            dx[(c * h + iy as usize) * w + ix as usize] +=
                                                gv * ker[((o * c_in + c) * k + u) * k + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                flow!(kernels, |dk: &mut Vec<f64>| {
                    for o in 0..c_out {
                        for oy in 0..h_out {
                            for ox in 0..w_out {
                                let gv = g[(o * h_out + oy) * w_out + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..c_in {
                                    for u in 0..k {
                                        let iy = (oy * stride + u) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for v in 0..k {
                                            let ix = (ox * stride + v) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            dk[((o * c_in + c) * k + u) * k + v] +=
                                                gv * x[(c * h + iy as usize) * w + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                flow!(a, |da: &mut Vec<f64>| for d in da.iter_mut() {
                    *d += gv;
                });
            }
            Op::Pick { input, indices } => {
                flow!(input, |da: &mut Vec<f64>| {
                    for (out_idx, &src) in indices.iter().enumerate() {
                        da[src] += g[out_idx];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[i].shape[0];
                let n_total = self.nodes[i].shape[1];
                let mut col = 0;
                for p in parts {
                    let np = self.nodes[p.0].shape[1];
                    flow!(p, |dp: &mut Vec<f64>| {
                        for r in 0..m {
                            for j in 0..np {
                                dp[r * np + j] += g[r * n_total + col + j];
                            }
                        }
                    });
                    col += np;
                }
            }
            Op::Reshape(a) => {
                flow!(a, |da: &mut Vec<f64>| for (d, gv) in da.iter_mut().zip(g) {
                    *d += gv;
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let x = &self.nodes[input.0].data;
                let gam = &self.nodes[gamma.0].data;
                // Per-row statistics are cheap to recompute.
                let mut stats = Vec::with_capacity(m);
                for r in 0..m {
                    let row = &x[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    stats.push((mean, 1.0 / (var + eps).sqrt()));
                }
                flow!(beta, |db: &mut Vec<f64>| {
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % n] += gv;
                    }
                });
                flow!(gamma, |dg: &mut Vec<f64>| {
                    for r in 0..m {
                        let (mean, inv_std) = stats[r];
                        for j in 0..n {
                            let xhat = (x[r * n + j] - mean) * inv_std;
                            dg[j] += g[r * n + j] * xhat;
                        }
                    }
                });
                flow!(input, |dx: &mut Vec<f64>| {
                    for r in 0..m {
                        let (mean, inv_std) = stats[r];
                        let g_row = &g[r * n..(r + 1) * n];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let xhat = (x[r * n + j] - mean) * inv_std;
                            let dxhat = g_row[j] * gam[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for j in 0..n {
                            let xhat = (x[r * n + j] - mean) * inv_std;
                            let dxhat = g_row[j] * gam[j];
                            dx[r * n + j] += inv_std
                                * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                flow!(input, |da: &mut Vec<f64>| {
                    for ((d, gv), &mv) in da.iter_mut().zip(g).zip(mask) {
                        *d += gv * mv;
                    }
                });
            }
        }
    }
}
