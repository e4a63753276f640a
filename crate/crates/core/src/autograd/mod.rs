//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates eagerly,
//! stores its output, and records how to propagate gradients back to its
//! inputs whenever at least one input requires grad. Nodes whose inputs
//! are all constant are stored as constants, so a graph built from
//! constant parameters records nothing to differentiate.

pub mod gradcheck;
pub mod kernels;

pub use gradcheck::grad_check;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

pub const LAYERNORM_EPS: f64 = 1e-5;
/// Inputs to `log` are clamped to this before the logarithm.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Transpose { x: NodeId, axis0: usize, axis1: usize },
    Reshape { x: NodeId },
    Concat { inputs: Vec<NodeId>, axis: usize },
    GatherRows { x: NodeId, index: Vec<usize> },
    ScatterRowsAdd { base: NodeId, index: Vec<usize>, src: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    Embedding { table: NodeId, index: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Bce { logits: NodeId, targets: Vec<f64> },
    Mse(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Tape of primitive applications in evaluation order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `id`, or zeros of `len` when the node was never reached.
    pub fn get_or_zeros(&self, id: NodeId, len: usize) -> Vec<f64> {
        self.get(id).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let n: usize = shape.iter().product();
    (if cols == 0 { 0 } else { n / cols }, cols)
}

fn check_index(op: &'static str, index: &[usize], rows: usize) -> Result<()> {
    match index.iter().find(|&&i| i >= rows) {
        Some(i) => Err(shape_err(op, format!("row index {i} out of range for {rows} rows"))),
        None => Ok(()),
    }
}

/// Permutes `data` laid out in `shape` by swapping two axes.
fn swap_axes(data: &[f64], shape: &[usize], a0: usize, a1: usize) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let mut strides = in_strides.clone();
    strides.swap(a0, a1);
    let n = data.len();
    let mut out = vec![0.0; n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Inserts a leaf; it requires grad iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Result<NodeId> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = t.requires_grad;
        let mut value = t;
        value.set_grad(None);
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn variable(&mut self, t: Tensor) -> Result<NodeId> {
        self.leaf(t.with_requires_grad(true))
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[NodeId], op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = kernels::broadcast_shape(&sa, &sb)
            .ok_or_else(|| shape_err(name, format!("{sa:?} and {sb:?} do not broadcast")))?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; out_shape.iter().product()];
        kernels::for_each_broadcast(&sa, &sb, &out_shape, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        self.push(name, Tensor::from_parts(out_shape, out), &[a, b], op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `x·scale + shift` elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * scale + shift).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("scalar-mul", value, &[x], Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.affine(x, scale, 0.0)
    }

    fn matmul_dims(&self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<MatMulDims> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || shape_err("matmul", format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"));
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(err()),
        };
        let (b_batch, kb, n) = match (sb.len(), transpose_b) {
            (2, false) => (None, sb[0], sb[1]),
            (2, true) => (None, sb[1], sb[0]),
            (3, false) => (Some(sb[0]), sb[1], sb[2]),
            (3, true) => (Some(sb[0]), sb[2], sb[1]),
            _ => return Err(err()),
        };
        if kb != k || b_batch.is_some_and(|bb| bb != batch || sa.len() != 3) {
            return Err(err());
        }
        Ok(MatMulDims { batch, m, k, n, b_batched: b_batch.is_some() })
    }

    /// Matrix product over the last two axes; a rank-3 `a` may share a rank-2 `b`.
    pub fn matmul_ex(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let d = self.matmul_dims(a, b, transpose_b)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; d.batch * d.m * d.n];
        for bi in 0..d.batch {
            let ab = &da[bi * d.m * d.k..(bi + 1) * d.m * d.k];
            let bb = if d.b_batched { &db[bi * d.k * d.n..(bi + 1) * d.k * d.n] } else { db };
            let cb = &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n];
            if transpose_b {
                kernels::gemm_nt(d.m, d.k, d.n, ab, bb, cb);
            } else {
                kernels::gemm_nn(d.m, d.k, d.n, ab, bb, cb);
            }
        }
        let shape = if self.shape(a).len() == 3 { vec![d.batch, d.m, d.n] } else { vec![d.m, d.n] };
        self.push("matmul", Tensor::from_parts(shape, out), &[a, b], Op::MatMul { a, b, transpose_b })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_ex(a, b, false)
    }

    pub fn transpose(&mut self, x: NodeId, axis0: usize, axis1: usize) -> Result<NodeId> {
        let rank = self.shape(x).len();
        if axis0 >= rank || axis1 >= rank {
            return Err(shape_err("transpose", format!("axes ({axis0},{axis1}) for rank {rank}")));
        }
        let (shape, data) = swap_axes(self.data(x), self.shape(x), axis0, axis1);
        self.push("transpose", Tensor::from_parts(shape, data), &[x], Op::Transpose { x, axis0, axis1 })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = Tensor::from_parts(shape.to_vec(), self.data(x).to_vec());
        self.push("reshape", value, &[x], Op::Reshape { x })
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let chunk = self.shape(i)[axis] * inner;
                out.extend_from_slice(&self.data(i)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::from_parts(shape, out),
            inputs,
            Op::Concat { inputs: inputs.to_vec(), axis },
        )
    }

    fn gather(&self, name: &'static str, x: NodeId, index: &[usize]) -> Result<Tensor> {
        let shape = self.shape(x);
        if shape.is_empty() {
            return Err(shape_err(name, "cannot gather rows of a scalar"));
        }
        check_index(name, index, shape[0])?;
        let width: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in index {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = index.len();
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Rows `index` of `x` along axis 0. Differentiable in `x` only.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let value = self.gather("gather-rows", x, index)?;
        self.push("gather-rows", value, &[x], Op::GatherRows { x, index: index.to_vec() })
    }

    /// Copy of `base` with `src[i]` added onto row `index[i]`.
    pub fn scatter_rows_add(&mut self, base: NodeId, index: &[usize], src: NodeId) -> Result<NodeId> {
        let (sb, ss) = (self.shape(base).to_vec(), self.shape(src).to_vec());
        if sb.is_empty() || ss.len() != sb.len() || ss[1..] != sb[1..] || ss[0] != index.len() {
            return Err(shape_err(
                "scatter-rows-add",
                format!("base {sb:?}, src {ss:?}, {} indices", index.len()),
            ));
        }
        check_index("scatter-rows-add", index, sb[0])?;
        let width: usize = sb[1..].iter().product();
        let mut out = self.data(base).to_vec();
        let s = self.data(src);
        for (r, &i) in index.iter().enumerate() {
            out[i * width..(i + 1) * width]
                .iter_mut()
                .zip(&s[r * width..(r + 1) * width])
                .for_each(|(o, v)| *o += v);
        }
        self.push(
            "scatter-rows-add",
            Tensor::from_parts(sb, out),
            &[base, src],
            Op::ScatterRowsAdd { base, index: index.to_vec(), src },
        )
    }

    fn conv_geom(&self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?}, stride {stride}")));
        }
        let g = ConvGeom { channels: sx[1], height: sx[2], width: sx[3], kernel: sw[2], stride, pad };
        if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[2] {
            return Err(shape_err("conv2d", format!("kernel {} larger than padded input {sx:?}", sw[2])));
        }
        Ok((sx[0], sw[0], g))
    }

    /// NCHW convolution with square kernels.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (batch, filters, g) = self.conv_geom(x, w, stride, pad)?;
        if let Some(b) = b {
            if self.shape(b) != [filters] {
                return Err(shape_err("conv2d", format!("bias {:?} for {filters} filters", self.shape(b))));
            }
        }
        let (rows, p) = (g.col_rows(), g.col_cols());
        let in_len = g.channels * g.height * g.width;
        let mut cols = vec![0.0; rows * p];
        let mut out = vec![0.0; batch * filters * p];
        for bi in 0..batch {
            kernels::im2col(&g, &self.data(x)[bi * in_len..(bi + 1) * in_len], &mut cols);
            let ob = &mut out[bi * filters * p..(bi + 1) * filters * p];
            kernels::gemm_nn(filters, rows, p, self.data(w), &cols, ob);
            if let Some(b) = b {
                let bias = self.data(b);
                for f in 0..filters {
                    ob[f * p..(f + 1) * p].iter_mut().for_each(|v| *v += bias[f]);
                }
            }
        }
        let shape = vec![batch, filters, g.out_height(), g.out_width()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", Tensor::from_parts(shape, out), &inputs, Op::Conv2d { x, w, b, stride, pad })
    }

    /// Non-overlapping-or-strided max pooling over NCHW input.
    pub fn max_pool(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || s[2] < kernel || s[3] < kernel {
            return Err(shape_err("max-pool", format!("input {s:?}, kernel {kernel}, stride {stride}")));
        }
        let (ho, wo) = ((s[2] - kernel) / stride + 1, (s[3] - kernel) / stride + 1);
        let planes = s[0] * s[1];
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * s[2] * s[3];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let i = base + (oy * stride + ky) * s[3] + ox * stride + kx;
                            if src[i] > best.0 {
                                best = (src[i], i);
                            }
                        }
                    }
                    out.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let value = Tensor::from_parts(vec![s[0], s[1], ho, wo], out);
        self.push("max-pool", value, &[x], Op::MaxPool { x, argmax })
    }

    /// `x·W + b` with `W: [in, out]` applied to the last axis.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(shape_err("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[1]] {
                return Err(shape_err("linear", format!("bias {:?} for weight {sw:?}", self.shape(b))));
            }
        }
        let (rows, inp) = rows_cols(&sx);
        let outp = sw[1];
        let mut out = vec![0.0; rows * outp];
        kernels::gemm_nn(rows, inp, outp, self.data(x), self.data(w), &mut out);
        if let Some(b) = b {
            let bias = self.data(b);
            out.chunks_exact_mut(outp.max(1))
                .for_each(|r| r.iter_mut().zip(bias).for_each(|(v, bv)| *v += bv));
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = outp;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", Tensor::from_parts(shape, out), &inputs, Op::Linear { x, w, b })
    }

    /// Normalizes the last axis (eps = 1e-5), then applies `gamma`, `beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&sx);
        if d == 0 || self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(
                "layernorm",
                format!("input {sx:?}, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (src, gm, bt) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gm[j] + bt[j];
            }
        }
        self.push(
            "layernorm",
            Tensor::from_parts(sx, out),
            &[x, gamma, beta],
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        let (_, d) = rows_cols(t.shape());
        let mut out = t.data().to_vec();
        if d > 0 {
            out.chunks_exact_mut(d).for_each(kernels::softmax_row);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax", value, &[x], Op::Softmax(x))
    }

    fn unary(&mut self, name: &'static str, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let t = self.value(x);
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(name, value, &[x], op)
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid(x))
    }

    /// Natural log with inputs clamped to [`LOG_FLOOR`].
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("log", x, |v| v.max(LOG_FLOOR).ln(), Op::Log(x))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty input"));
        }
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(v), &[x], Op::Mean(x))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.data(x).iter().sum::<f64>();
        self.push("sum", Tensor::scalar(v), &[x], Op::Sum(x))
    }

    /// Rows of `table` selected by `index`.
    pub fn embedding(&mut self, table: NodeId, index: &[usize]) -> Result<NodeId> {
        if self.shape(table).len() != 2 {
            return Err(shape_err("embedding-lookup", format!("table {:?}", self.shape(table))));
        }
        let value = self.gather("embedding-lookup", table, index)?;
        self.push("embedding-lookup", value, &[table], Op::Embedding { table, index: index.to_vec() })
    }

    /// Mean softmax cross-entropy; `logits` is `[classes]` or `[batch, classes]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        let (rows, classes) = match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => return Err(shape_err("cross-entropy", format!("logits {s:?}"))),
        };
        if rows != targets.len() || rows == 0 {
            return Err(shape_err("cross-entropy", format!("logits {s:?} vs {} targets", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::InvalidArgument(format!("class index {t} out of range for {classes} classes")));
        }
        let data = self.data(logits);
        let loss = (0..rows)
            .map(|r| {
                let row = &data[r * classes..(r + 1) * classes];
                kernels::logsumexp(row) - row[targets[r]]
            })
            .sum::<f64>()
            / rows as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec() };
        self.push("cross-entropy-with-logits", Tensor::scalar(loss), &[logits], op)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let data = self.data(logits);
        if data.len() != targets.len() || data.is_empty() {
            return Err(shape_err(
                "binary-cross-entropy-with-logits",
                format!("{} logits vs {} targets", data.len(), targets.len()),
            ));
        }
        if targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("binary targets must lie in [0, 1]".into()));
        }
        let loss = data
            .iter()
            .zip(targets)
            .map(|(&x, &t)| kernels::softplus(x) - t * x)
            .sum::<f64>()
            / data.len() as f64;
        let op = Op::Bce { logits, targets: targets.to_vec() };
        self.push("binary-cross-entropy-with-logits", Tensor::scalar(loss), &[logits], op)
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) || self.value(a).numel() == 0 {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let (da, db) = (self.data(a), self.data(b));
        let v = da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / da.len() as f64;
        self.push("mse", Tensor::scalar(v), &[a, b], Op::Mse(a, b))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut [f64]> {
        let node = &self.nodes[id.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                if let Some(ga) = self.acc(grads, a) {
                    kernels::for_each_broadcast(&sa, &sb, out_shape, |o, ia, _| ga[ia] += g[o]);
                }
                if let Some(gb) = self.acc(grads, b) {
                    kernels::for_each_broadcast(&sa, &sb, out_shape, |o, _, ib| gb[ib] += sign * g[o]);
                }
            }
            &Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (da, db) = (self.data(a), self.data(b));
                if let Some(ga) = self.acc(grads, a) {
                    kernels::for_each_broadcast(&sa, &sb, out_shape, |o, ia, ib| ga[ia] += g[o] * db[ib]);
                }
                if let Some(gb) = self.acc(grads, b) {
                    kernels::for_each_broadcast(&sa, &sb, out_shape, |o, ia, ib| gb[ib] += g[o] * da[ia]);
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * scale);
                }
            }
            &Op::MatMul { a, b, transpose_b } => {
                let d = self.matmul_dims(a, b, transpose_b).expect("validated in forward");
                let (mk, kn, mn) = (d.m * d.k, d.k * d.n, d.m * d.n);
                if self.nodes[a.0].requires_grad {
                    let db = self.data(b);
                    let ga = self.acc(grads, a).unwrap();
                    for bi in 0..d.batch {
                        let bb = if d.b_batched { &db[bi * kn..(bi + 1) * kn] } else { db };
                        let gc = &g[bi * mn..(bi + 1) * mn];
                        let gab = &mut ga[bi * mk..(bi + 1) * mk];
                        if transpose_b {
                            kernels::gemm_nn(d.m, d.n, d.k, gc, bb, gab);
                        } else {
                            kernels::gemm_nt(d.m, d.n, d.k, gc, bb, gab);
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let da = self.data(a);
                    let gb = self.acc(grads, b).unwrap();
                    for bi in 0..d.batch {
                        let ab = &da[bi * mk..(bi + 1) * mk];
                        let gc = &g[bi * mn..(bi + 1) * mn];
                        let gbb = if d.b_batched { &mut gb[bi * kn..(bi + 1) * kn] } else { &mut gb[..] };
                        if transpose_b {
                            kernels::gemm_tn(d.n, d.m, d.k, gc, ab, gbb);
                        } else {
                            kernels::gemm_tn(d.k, d.m, d.n, ab, gc, gbb);
                        }
                    }
                }
            }
            &Op::Transpose { x, axis0, axis1 } => {
                let (_, back) = swap_axes(g, out_shape, axis0, axis1);
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let chunk = self.shape(i)[axis] * inner;
                    if let Some(gi) = self.acc(grads, i) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gi[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::GatherRows { x, index } | Op::Embedding { table: x, index } => {
                let width: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        gx[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ScatterRowsAdd { base, index, src } => {
                if let Some(gb) = self.acc(grads, *base) {
                    gb.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let width: usize = out_shape[1..].iter().product();
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, &i) in index.iter().enumerate() {
                        gs[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&g[i * width..(i + 1) * width])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (batch, filters, geom) = self.conv_geom(x, w, stride, pad).expect("validated in forward");
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let in_len = geom.channels * geom.height * geom.width;
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, b) {
                        for bi in 0..batch {
                            for f in 0..filters {
                                let off = (bi * filters + f) * p;
                                gb[f] += g[off..off + p].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let need_w = self.nodes[w.0].requires_grad;
                let need_x = self.nodes[x.0].requires_grad;
                let mut cols = vec![0.0; rows * p];
                let mut dcols = vec![0.0; rows * p];
                let wdata = self.data(w);
                for bi in 0..batch {
                    let gout = &g[bi * filters * p..(bi + 1) * filters * p];
                    if need_w {
                        kernels::im2col(&geom, &self.data(x)[bi * in_len..(bi + 1) * in_len], &mut cols);
                        let gw = self.acc(grads, w).unwrap();
                        kernels::gemm_nt(filters, p, rows, gout, &cols, gw);
                    }
                    if need_x {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        kernels::gemm_tn(rows, filters, p, wdata, gout, &mut dcols);
                        let gx = self.acc(grads, x).unwrap();
                        kernels::col2im(&geom, &dcols, &mut gx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    argmax.iter().zip(g).for_each(|(&i, v)| gx[i] += v);
                }
            }
            &Op::Linear { x, w, b } => {
                let sw = self.shape(w);
                let (inp, outp) = (sw[0], sw[1]);
                let (rows, _) = rows_cols(self.shape(x));
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, b) {
                        for r in 0..rows {
                            gb.iter_mut().zip(&g[r * outp..(r + 1) * outp]).for_each(|(a, v)| *a += v);
                        }
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let xd = self.data(x);
                    let gw = self.acc(grads, w).unwrap();
                    kernels::gemm_tn(inp, rows, outp, xd, g, gw);
                }
                if self.nodes[x.0].requires_grad {
                    let wd = self.data(w);
                    let gx = self.acc(grads, x).unwrap();
                    kernels::gemm_nt(rows, outp, inp, g, wd, gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.shape(*gamma)[0];
                let rows = inv_std.len();
                if let Some(gbeta) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        gbeta.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, v)| *a += v);
                    }
                }
                if let Some(ggamma) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            ggamma[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gm = self.data(*gamma);
                    let gx = self.acc(grads, *x).unwrap();
                    let df = d as f64;
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..d).map(|j| g[r * d + j] * gm[j]).collect();
                        let sum_gh: f64 = gh.iter().sum();
                        let sum_ghx: f64 = (0..d).map(|j| gh[j] * xhat[r * d + j]).sum();
                        for j in 0..d {
                            gx[r * d + j] +=
                                inv_std[r] / df * (df * gh[j] - sum_gh - xhat[r * d + j] * sum_ghx);
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let (_, d) = rows_cols(out_shape);
                if let Some(gx) = self.acc(grads, x) {
                    for ((gr, yr), gxr) in g.chunks_exact(d).zip(y.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                        let s = kernels::dot(gr, yr);
                        for j in 0..d {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xd = self.data(x);
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            &Op::Log(x) => {
                let xd = self.data(x);
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if xd[i] > LOG_FLOOR {
                            gx[i] += g[i] / xd[i];
                        }
                    }
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel() as f64;
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let classes = *self.shape(*logits).last().unwrap();
                let rows = targets.len();
                let data = self.data(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    for r in 0..rows {
                        let mut p = data[r * classes..(r + 1) * classes].to_vec();
                        kernels::softmax_row(&mut p);
                        p[targets[r]] -= 1.0;
                        for c in 0..classes {
                            gl[r * classes + c] += g[0] * p[c] / rows as f64;
                        }
                    }
                }
            }
            Op::Bce { logits, targets } => {
                let data = self.data(*logits);
                let n = data.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for i in 0..data.len() {
                        gl[i] += g[0] * (kernels::sigmoid(data[i]) - targets[i]) / n;
                    }
                }
            }
            &Op::Mse(a, b) => {
                let diff: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
                let n = diff.len() as f64;
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(&diff).for_each(|(v, d)| *v += g[0] * 2.0 * d / n);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(&diff).for_each(|(v, d)| *v -= g[0] * 2.0 * d / n);
                }
            }
        }
    }
}
