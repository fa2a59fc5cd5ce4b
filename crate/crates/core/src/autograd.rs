//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse. Tensors are row-major and unbatched: images are
//! `[channels, height, width]`, matrices `[rows, cols]`. Batching happens one
//! level up by accumulating gradients over per-sample tapes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data length");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rows_cols(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected [C, H, W], got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    /// Plain matrix product without recording anything.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = self.rows_cols();
        let (k2, m) = other.rows_cols();
        assert_eq!(k, k2, "matmul inner dimensions differ: {:?} x {:?}", self.shape, other.shape);
        let mut out = vec![0.0; n * m];
        gemm_nn(n, k, m, &self.data, &other.data, &mut out);
        Tensor::new(vec![n, m], out)
    }

    pub fn transpose(&self) -> Tensor {
        let (n, m) = self.rows_cols();
        Tensor::new(vec![m, n], transpose(n, m, &self.data))
    }
}

// ---------------------------------------------------------------------------
// Dense kernels. All accumulate into `out`.

/// `out[n,m] += a[n,k] * b[k,m]`
fn gemm_nn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,m] += a[k,n]^T * b[k,m]`
fn gemm_tn(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,m] += a[n,k] * b[m,k]^T`
fn gemm_nt(n: usize, k: usize, m: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] += dot(arow, brow);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = acc[0] + acc[1] + acc[2] + acc[3];
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn transpose(n: usize, m: usize, data: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = data[i * m + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Unfolds `[C, H, W]` into `[C*k*k, Ho*Wo]` patches.
fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = vec![0.0; g.col_rows() * ho * wo];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &input[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(g: &ConvGeometry, cols: &[f64], out: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut out[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tape

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `[N, D] + [D]`
    AddRowBias(Var, Var),
    /// `[C, H, W] + [C]`
    AddChannelBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d { input: Var, weight: Var, geometry: ConvGeometry, cols: Vec<f64> },
    Upsample2x(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LayerNormRows { input: Var, rstd: Vec<f64> },
    /// Concatenation along the leading dimension.
    Concat(Vec<Var>),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn parameter(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, factor), rg)
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let (n, d) = self.value(x).rows_cols();
        assert_eq!(self.value(bias).numel(), d, "row bias length");
        let mut v = self.value(x).clone();
        let b = self.value(bias).data();
        for row in v.data.chunks_exact_mut(d).take(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddRowBias(x, bias), rg)
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        assert_eq!(self.value(bias).numel(), c, "channel bias length");
        let mut v = self.value(x).clone();
        let b = self.value(bias).data();
        for (plane, &bv) in v.data.chunks_exact_mut(h * w).zip(b) {
            for o in plane {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(v, Op::AddChannelBias(x, bias), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.value(a).clone().reshape(shape);
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// 2D convolution of `[Cin, H, W]` with weights `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Var {
        let (cin, h, w) = self.value(input).chw();
        let ws = self.value(weight).shape().to_vec();
        assert!(ws.len() == 4 && ws[1] == cin && ws[2] == ws[3], "conv weight {ws:?} vs input channels {cin}");
        let geometry = ConvGeometry { in_channels: cin, height: h, width: w, kernel: ws[2], stride, padding };
        let cols = im2col(&geometry, self.value(input).data());
        let (ho, wo) = (geometry.out_height(), geometry.out_width());
        let mut out = vec![0.0; ws[0] * ho * wo];
        gemm_nn(ws[0], geometry.col_rows(), ho * wo, self.value(weight).data(), &cols, &mut out);
        let rg = self.rg(input) || self.rg(weight);
        // The patch matrix is only needed for the weight gradient.
        let cols = if self.rg(weight) { cols } else { Vec::new() };
        self.push(Tensor::new(vec![ws[0], ho, wo], out), Op::Conv2d { input, weight, geometry, cols }, rg)
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x).data();
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out), Op::Upsample2x(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        let rg = self.rg(x);
        self.push(v, Op::Silu(x), rg)
    }

    /// Softmax over the last dimension of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, m) = self.value(x).rows_cols();
        let mut v = self.value(x).clone();
        for row in v.data.chunks_exact_mut(m) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    /// Per-row standardisation (zero mean, unit variance), no affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let (_, m) = self.value(x).rows_cols();
        let mut v = self.value(x).clone();
        let mut rstd = Vec::with_capacity(v.shape[0]);
        for row in v.data.chunks_exact_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + eps).sqrt();
            for e in row.iter_mut() {
                *e = (*e - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(x);
        self.push(v, Op::LayerNormRows { input: x, rstd }, rg)
    }

    /// Concatenates along the leading dimension; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &tail[..], "concat trailing shape mismatch");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean of squared differences, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut acc = |var: Var, delta: Tensor| {
            if !self.nodes[var.0].requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|v| v * f)),
            Op::AddRowBias(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let d = self.value(*b).numel();
                    let mut db = vec![0.0; d];
                    for row in g.data.chunks_exact(d) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new(self.shape(*b).to_vec(), db));
                }
            }
            Op::AddChannelBias(x, b) => {
                acc(*x, g.clone());
                if self.rg(*b) {
                    let (_, h, w) = g.chw();
                    let db: Vec<f64> = g.data.chunks_exact(h * w).map(|p| p.iter().sum()).collect();
                    acc(*b, Tensor::new(self.shape(*b).to_vec(), db));
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).rows_cols();
                let (_, m) = self.value(*b).rows_cols();
                if self.rg(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm_nt(n, m, k, &g.data, self.value(*b).data(), &mut da);
                    acc(*a, Tensor::new(vec![n, k], da));
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm_tn(k, n, m, self.value(*a).data(), &g.data, &mut db);
                    acc(*b, Tensor::new(vec![k, m], db));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a))),
            Op::Conv2d { input, weight, geometry, cols } => {
                let cout = self.shape(*weight)[0];
                let hw = geometry.out_height() * geometry.out_width();
                let kk = geometry.col_rows();
                if self.rg(*weight) {
                    let mut dw = vec![0.0; cout * kk];
                    gemm_nt(cout, hw, kk, &g.data, cols, &mut dw);
                    acc(*weight, Tensor::new(self.shape(*weight).to_vec(), dw));
                }
                if self.rg(*input) {
                    let mut dcols = vec![0.0; kk * hw];
                    gemm_tn(kk, cout, hw, self.value(*weight).data(), &g.data, &mut dcols);
                    let mut dx = vec![0.0; self.value(*input).numel()];
                    col2im(geometry, &dcols, &mut dx);
                    acc(*input, Tensor::new(self.shape(*input).to_vec(), dx));
                }
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(*x).chw();
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] += g.data[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                acc(*x, Tensor::new(vec![c, h, w], dx));
            }
            Op::Silu(x) => {
                let dx = g.zip_map(self.value(*x), |gv, z| {
                    let s = sigmoid(z);
                    gv * s * (1.0 + z * (1.0 - s))
                });
                acc(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (_, m) = y.rows_cols();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data.chunks_exact_mut(m).zip(y.data.chunks_exact(m)) {
                    let s = dot(drow, yrow);
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - s);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNormRows { input, rstd } => {
                let y = &node.value;
                let (_, m) = y.rows_cols();
                let mut dx = g.clone();
                for ((drow, yrow), &r) in dx.data.chunks_exact_mut(m).zip(y.data.chunks_exact(m)).zip(rstd) {
                    let mean_g = drow.iter().sum::<f64>() / m as f64;
                    let mean_gy = dot(drow, yrow) / m as f64;
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = r * (*d - mean_g - yv * mean_gy);
                    }
                }
                acc(*input, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        acc(p, Tensor::new(self.shape(p).to_vec(), g.data[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, Tensor::full(self.shape(*x), g.item() / n as f64));
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(loss)/d(input) for every element.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.parameter(v.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape.value(out).item(), tape, vars, out)
        };
        let (_, tape, vars, out) = eval(&inputs);
        let grads = tape.backward(out);
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).expect("gradient reaches every input");
            for i in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "input {k} element {i}: analytic {a} vs numeric {numeric}"
                );
            }
        }
    }

    // weighted sum so every output element matters differently
    fn weighted(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.shape(x), &mut rng);
        let w = tape.constant(w);
        let p = tape.mul(x, w);
        tape.mean(p)
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check(vec![random(&[3, 4], &mut rng), random(&[4, 5], &mut rng)], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let tr = t.transpose(m);
            weighted(t, tr, 9)
        });
    }

    #[test]
    fn conv_gradients_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            check(vec![random(&[2, 5, 6], &mut rng), random(&[3, 2, 3, 3], &mut rng), random(&[3], &mut rng)], |t, v| {
                let c = t.conv2d(v[0], v[1], stride, pad);
                let c = t.add_channel_bias(c, v[2]);
                weighted(t, c, 3)
            });
        }
    }

    #[test]
    fn nonlinearity_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(vec![random(&[4, 6], &mut rng), random(&[6], &mut rng)], |t, v| {
            let x = t.add_row_bias(v[0], v[1]);
            let x = t.layer_norm_rows(x, 1e-5);
            let s = t.silu(x);
            let p = t.softmax_rows(s);
            weighted(t, p, 4)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(vec![random(&[2, 3, 3], &mut rng), random(&[1, 3, 3], &mut rng)], |t, v| {
            let c = t.concat(&[v[0], v[1]]);
            let u = t.upsample2x(c);
            let r = t.reshape(u, &[3, 36]);
            let s = t.scale(r, 0.7);
            let target = t.constant(Tensor::zeros(&[3, 36]));
            let d = t.sub(s, target);
            let a = t.add(d, s);
            t.mse(a, target)
        });
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 4], &mut rng);
        let w = random(&[1, 2, 3, 3], &mut rng);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let out = tape.conv2d(xv, wv, 1, 1);
        let got = tape.value(out);
        for oy in 0..4 {
            for ox in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                s += x.data()[(c * 4 + iy as usize) * 4 + ix as usize] * w.data()[(c * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                }
                assert!((got.data()[oy * 4 + ox] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 2], 1.0));
        let p = tape.parameter(Tensor::full(&[2, 2], 2.0));
        let m = tape.mul(c, p);
        let out = tape.mean(m);
        let grads = tape.backward(out);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[0.25; 4]);
    }
}
