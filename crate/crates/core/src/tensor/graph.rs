//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Nodes are appended in evaluation order, so the reverse sweep in
//! [`Graph::backward`] can simply walk the node list backwards. Parameters
//! enter through [`Graph::param`]; their gradients are accumulated into the
//! owning [`ParamStore`], which lets several graphs (one per batch item)
//! contribute to a single optimizer step.

use super::{matmul_into, matmul_nt_into, matmul_tn_into, softmax_in_place, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 3×3×3 convolution with zero padding of one voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(input: [usize; 3], stride: usize, in_channels: usize, out_channels: usize) -> Self {
        let output = input.map(|e| (e - 1) / stride + 1);
        Self {
            input,
            output,
            stride,
            in_channels,
            out_channels,
        }
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [27 * self.in_channels, self.out_channels]
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Upsample2 {
        x: Var,
        half: [usize; 3],
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    Sum(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of the loss with respect to the graph's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf (input or parameter). `None` when the loss does
    /// not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let out = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).collect();
        let out = Tensor {
            shape: va.shape.clone(),
            data,
        };
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Adds a bias row (length = column count) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = &self.value(bias).data;
        let mut out = self.value(x).clone();
        for row in out.data.chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    /// Multiplies every element of `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).item();
        Ok(self.map(x, Op::ScaleBy(x, s), |v| v * sv))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.map(x, Op::OneMinus(x), |v| 1.0 - v)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())
        })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Per-row normalization to zero mean and unit variance, then an affine
    /// map with `gain` and `bias` (both of length = column count).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x);
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let rows = src.rows();
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor {
            shape: src.shape.clone(),
            data: out,
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, c) = (z.rows(), z.cols());
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", z.shape(), &[targets.len()]));
        }
        let mut probs = z.data.clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    context: "cross_entropy target",
                    index: t,
                    bound: c,
                });
            }
            let row = &z.data[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let out = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let (n, c) = (src.rows(), src.cols());
        if rows.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(Error::Index {
                    context: "gather_rows",
                    index: r,
                    bound: n,
                });
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Tensor {
            shape: vec![rows.len(), c],
            data,
        };
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        if width == 0 || start + width > c {
            return Err(Error::shape("slice_cols", src.shape(), &[start, width]));
        }
        let data = src
            .data
            .chunks(c)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let out = Tensor {
            shape: vec![src.rows(), width],
            data,
        };
        Ok(self.push(out, Op::SliceCols(x, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(parts[1])));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor {
            shape: vec![rows, total],
            data,
        };
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(parts[1])));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let out = Tensor {
            shape: vec![data.len() / cols, cols],
            data,
        };
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Nearest-neighbour ×2 upsampling of a voxel-row tensor laid out on the
    /// grid `half` (x fastest).
    pub fn upsample2(&mut self, x: Var, half: [usize; 3]) -> Result<Var> {
        let src = self.value(x);
        let n_half: usize = half.iter().product();
        if src.rows() != n_half {
            return Err(Error::shape("upsample2", src.shape(), &half));
        }
        let c = src.cols();
        let full = half.map(|e| 2 * e);
        let mut data = Vec::with_capacity(8 * src.len());
        for z in 0..full[2] {
            for y in 0..full[1] {
                for xx in 0..full[0] {
                    let h = xx / 2 + half[0] * (y / 2 + half[1] * (z / 2));
                    data.extend_from_slice(&src.data[h * c..(h + 1) * c]);
                }
            }
        }
        let out = Tensor {
            shape: vec![8 * n_half, c],
            data,
        };
        Ok(self.push(out, Op::Upsample2 { x, half }))
    }

    /// 3×3×3 convolution, zero padding 1. `x` is `[voxels × in_channels]`,
    /// `w` is `[27·in_channels × out_channels]` with tap index
    /// `dx + 3·(dy + 3·dz)`, `b` has `out_channels` entries.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let n_in: usize = geom.input.iter().product();
        let xs = self.value(x);
        if xs.rows() != n_in || xs.cols() != geom.in_channels {
            return Err(Error::shape("conv3d input", xs.shape(), &[n_in, geom.in_channels]));
        }
        let ws = self.value(w);
        if ws.shape() != geom.weight_shape() {
            return Err(Error::shape("conv3d weight", ws.shape(), &geom.weight_shape()));
        }
        if self.value(b).len() != geom.out_channels {
            return Err(Error::shape("conv3d bias", self.shape(b), &[geom.out_channels]));
        }
        let out = conv3d_forward(&xs.data, &ws.data, &self.value(b).data, &geom);
        let n_out: usize = geom.output.iter().product();
        let out = Tensor {
            shape: vec![n_out, geom.out_channels],
            data: out,
        };
        Ok(self.push(out, Op::Conv3d { x, w, b, geom }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Reverse sweep from the scalar `loss`. Parameter gradients are added to
    /// `store` (call [`ParamStore::zero_grad`] between optimizer steps); the
    /// returned [`Gradients`] hold the gradients of every leaf.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward_leaves(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                let dst = &mut store.get_mut(*id).grad;
                if dst.shape() != g.shape() {
                    return Err(Error::shape("parameter gradient", dst.shape(), g.shape()));
                }
                for (d, s) in dst.data.iter_mut().zip(&g.data) {
                    *d += s;
                }
            }
        }
        Ok(grads)
    }

    /// Like [`Graph::backward`] but without touching any parameter store.
    pub fn backward_leaves(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = acc(grads, *a, va);
                matmul_nt_into(&g.data, &vb.data, &mut ga.data, m, n, k);
                let gb = acc(grads, *b, vb);
                matmul_tn_into(&va.data, &g.data, &mut gb.data, m, k, n);
            }
            Op::MatMulNt(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[0]);
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let ga = acc(grads, *a, va);
                matmul_into(&g.data, &vb.data, &mut ga.data, m, n, k);
                let gb = acc(grads, *b, vb);
                matmul_tn_into(&g.data, &va.data, &mut gb.data, m, n, k);
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, y), &g.data);
                add_into(acc(grads, *b, y), &g.data);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, va);
                for ((d, gv), bv) in ga.data.iter_mut().zip(&g.data).zip(&vb.data) {
                    *d += gv * bv;
                }
                let gb = acc(grads, *b, vb);
                for ((d, gv), av) in gb.data.iter_mut().zip(&g.data).zip(&va.data) {
                    *d += gv * av;
                }
            }
            Op::AddRow(x, bias) => {
                add_into(acc(grads, *x, y), &g.data);
                let cols = y.cols();
                let gb = acc(grads, *bias, self.value(*bias));
                for row in g.data.chunks(cols) {
                    for (d, gv) in gb.data.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
            Op::Scale(x, s) => {
                let gx = acc(grads, *x, y);
                for (d, gv) in gx.data.iter_mut().zip(&g.data) {
                    *d += gv * s;
                }
            }
            Op::ScaleBy(x, s) => {
                let vx = self.value(*x);
                let sv = self.value(*s).item();
                let gx = acc(grads, *x, vx);
                for (d, gv) in gx.data.iter_mut().zip(&g.data) {
                    *d += gv * sv;
                }
                let dot: f64 = g.data.iter().zip(&vx.data).map(|(a, b)| a * b).sum();
                acc(grads, *s, self.value(*s)).data[0] += dot;
            }
            Op::OneMinus(x) => {
                let gx = acc(grads, *x, y);
                for (d, gv) in gx.data.iter_mut().zip(&g.data) {
                    *d -= gv;
                }
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, y);
                for ((d, gv), s) in gx.data.iter_mut().zip(&g.data).zip(&y.data) {
                    *d += gv * s * (1.0 - s);
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = acc(grads, *x, vx);
                for ((d, gv), v) in gx.data.iter_mut().zip(&g.data).zip(&vx.data) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let gx = acc(grads, *x, vx);
                for ((d, gv), &v) in gx.data.iter_mut().zip(&g.data).zip(&vx.data) {
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * v * dt);
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = y.cols();
                let gx = acc(grads, *x, y);
                for ((drow, grow), yrow) in gx
                    .data
                    .chunks_mut(cols)
                    .zip(g.data.chunks(cols))
                    .zip(y.data.chunks(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = y.cols();
                let gvals = &self.value(*gain).data;
                {
                    let gg = acc(grads, *gain, self.value(*gain));
                    for (grow, hrow) in g.data.chunks(cols).zip(xhat.chunks(cols)) {
                        for ((d, gv), h) in gg.data.iter_mut().zip(grow).zip(hrow) {
                            *d += gv * h;
                        }
                    }
                }
                {
                    let gb = acc(grads, *bias, self.value(*bias));
                    for grow in g.data.chunks(cols) {
                        for (d, gv) in gb.data.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
                let gx = acc(grads, *x, y);
                let n = cols as f64;
                for (r, ((drow, grow), hrow)) in gx
                    .data
                    .chunks_mut(cols)
                    .zip(g.data.chunks(cols))
                    .zip(xhat.chunks(cols))
                    .enumerate()
                {
                    let mut sum_gh = 0.0;
                    let mut sum_ghx = 0.0;
                    for c in 0..cols {
                        let gh = grow[c] * gvals[c];
                        sum_gh += gh;
                        sum_ghx += gh * hrow[c];
                    }
                    let scale = inv_std[r] / n;
                    for c in 0..cols {
                        let gh = grow[c] * gvals[c];
                        drow[c] += scale * (n * gh - sum_gh - hrow[c] * sum_ghx);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let z = self.value(*logits);
                let c = z.cols();
                let scale = g.item() / targets.len() as f64;
                let gz = acc(grads, *logits, z);
                for (r, &t) in targets.iter().enumerate() {
                    let row = &mut gz.data[r * c..(r + 1) * c];
                    for (j, d) in row.iter_mut().enumerate() {
                        let p = probs[r * c + j];
                        *d += scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let vx = self.value(*x);
                let c = vx.cols();
                let gx = acc(grads, *x, vx);
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gx.data[r * c + j] += g.data[k * c + j];
                    }
                }
            }
            Op::SliceCols(x, start) => {
                let vx = self.value(*x);
                let (c, w) = (vx.cols(), y.cols());
                let gx = acc(grads, *x, vx);
                for (drow, grow) in gx.data.chunks_mut(c).zip(g.data.chunks(w)) {
                    for (d, gv) in drow[*start..start + w].iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    let gp = acc(grads, p, vp);
                    for (drow, grow) in gp.data.chunks_mut(w).zip(g.data.chunks(total)) {
                        for (d, gv) in drow.iter_mut().zip(&grow[offset..offset + w]) {
                            *d += gv;
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let len = vp.len();
                    add_into(acc(grads, p, vp), &g.data[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Upsample2 { x, half } => {
                let vx = self.value(*x);
                let c = vx.cols();
                let full = half.map(|e| 2 * e);
                let gx = acc(grads, *x, vx);
                let mut o = 0;
                for z in 0..full[2] {
                    for yy in 0..full[1] {
                        for xx in 0..full[0] {
                            let h = xx / 2 + half[0] * (yy / 2 + half[1] * (z / 2));
                            for j in 0..c {
                                gx.data[h * c + j] += g.data[o * c + j];
                            }
                            o += 1;
                        }
                    }
                }
            }
            Op::Conv3d { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                {
                    let gb = acc(grads, *b, self.value(*b));
                    for row in g.data.chunks(geom.out_channels) {
                        for (d, gv) in gb.data.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
                {
                    let gw = acc(grads, *w, vw);
                    conv3d_backward_weight(&vx.data, &g.data, &mut gw.data, geom);
                }
                let gx = acc(grads, *x, vx);
                conv3d_backward_input(&vw.data, &g.data, &mut gx.data, geom);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let gx = acc(grads, *x, self.value(*x));
                for d in gx.data.iter_mut() {
                    *d += gv;
                }
            }
            Op::SumSquares(x) => {
                let gv = g.item();
                let vx = self.value(*x);
                let gx = acc(grads, *x, vx);
                for (d, v) in gx.data.iter_mut().zip(&vx.data) {
                    *d += 2.0 * v * gv;
                }
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Tensor>], v: Var, like: &Tensor) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

fn add_into(dst: &mut Tensor, src: &[f64]) {
    for (d, s) in dst.data.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Yields `(tap, input_voxel, output_voxel)` for every in-bounds tap.
#[inline]
fn for_each_tap(geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let [ix, iy, iz] = geom.input.map(|e| e as isize);
    let [ox, oy, oz] = geom.output;
    let s = geom.stride as isize;
    let mut o = 0;
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                for dz in 0..3isize {
                    let zz = z as isize * s + dz - 1;
                    if zz < 0 || zz >= iz {
                        continue;
                    }
                    for dy in 0..3isize {
                        let yy = y as isize * s + dy - 1;
                        if yy < 0 || yy >= iy {
                            continue;
                        }
                        let base = (yy + iy * zz) * ix;
                        for dx in 0..3isize {
                            let xx = x as isize * s + dx - 1;
                            if xx < 0 || xx >= ix {
                                continue;
                            }
                            let tap = (dx + 3 * (dy + 3 * dz)) as usize;
                            f(tap, (base + xx) as usize, o);
                        }
                    }
                }
                o += 1;
            }
        }
    }
}

fn conv3d_forward(x: &[f64], w: &[f64], b: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (ci, co) = (geom.in_channels, geom.out_channels);
    let n_out: usize = geom.output.iter().product();
    let mut out = Vec::with_capacity(n_out * co);
    for _ in 0..n_out {
        out.extend_from_slice(b);
    }
    for_each_tap(geom, |tap, i, o| {
        let x_row = &x[i * ci..(i + 1) * ci];
        let o_row = &mut out[o * co..(o + 1) * co];
        let w_tap = &w[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (ov, wv) in o_row.iter_mut().zip(&w_tap[c * co..(c + 1) * co]) {
                *ov += xv * wv;
            }
        }
    });
    out
}

fn conv3d_backward_weight(x: &[f64], g: &[f64], gw: &mut [f64], geom: &ConvGeometry) {
    let (ci, co) = (geom.in_channels, geom.out_channels);
    for_each_tap(geom, |tap, i, o| {
        let x_row = &x[i * ci..(i + 1) * ci];
        let g_row = &g[o * co..(o + 1) * co];
        let gw_tap = &mut gw[tap * ci * co..(tap + 1) * ci * co];
        for (c, &xv) in x_row.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (d, gv) in gw_tap[c * co..(c + 1) * co].iter_mut().zip(g_row) {
                *d += xv * gv;
            }
        }
    });
}

fn conv3d_backward_input(w: &[f64], g: &[f64], gx: &mut [f64], geom: &ConvGeometry) {
    let (ci, co) = (geom.in_channels, geom.out_channels);
    for_each_tap(geom, |tap, i, o| {
        let g_row = &g[o * co..(o + 1) * co];
        let w_tap = &w[tap * ci * co..(tap + 1) * ci * co];
        let gx_row = &mut gx[i * ci..(i + 1) * ci];
        for (c, d) in gx_row.iter_mut().enumerate() {
            *d += w_tap[c * co..(c + 1) * co]
                .iter()
                .zip(g_row)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
    });
}
