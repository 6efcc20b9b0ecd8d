use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::params::{fnv1a, ParamStore};
use super::Tensor;
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride 1 with the padding that keeps the spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { stride: 1, padding: dilation * (kernel - 1) / 2, dilation }
    }
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Per-channel batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MatMul { a: Var, b: Var },
    Softmax { x: Var, axis: usize },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, k: usize, stride: usize, pad: usize },
    GlobalAvgPool { x: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Abs { x: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    ScaleBy { x: Var, s: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, idx: Vec<usize> },
    Reshape { x: Var },
    Bilinear { x: Var },
    Sum { x: Var },
    Bce { p: Var, target: Var },
    SobelMag { x: Var, gx: Vec<f64>, gy: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Abs { .. } => "abs",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::ScaleBy { .. } => "scale_by",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::Bilinear { .. } => "bilinear",
            Op::Sum { .. } => "sum",
            Op::Bce { .. } => "bce",
            Op::SobelMag { .. } => "sobel_mag",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are only ever appended after their inputs, so the node order is a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by [`Graph::backward`], one slot per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of a node, zero-filled when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// One entry per parameter registered on the graph.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|(name, &v)| (name.clone(), self.get(v))).collect()
    }

    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.get(v))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn nchw(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    if t.rank() != 4 {
        return Err(dim_err!("{what} expects N x C x H x W, got {:?}", t.shape()));
    }
    Ok(t.dims4())
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient (images, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Registers (once per graph) a named trainable parameter as a leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| contract_err!("unknown parameter `{name}`"))?
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name(), n.value.shape().to_vec()))
    }

    /// Hash of every branch taken at a non-differentiable point: ReLU and
    /// `abs` input signs, max-pool winners and BCE clamping. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut bytes = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => bytes.extend(self.value(*x).data().iter().map(|&v| u8::from(v > 0.0))),
                Op::Abs { x } => bytes.extend(self.value(*x).data().iter().map(|&v| u8::from(v >= 0.0))),
                Op::MaxPool { argmax, .. } => bytes.extend(argmax.iter().flat_map(|&i| (i as u64).to_le_bytes())),
                Op::Bce { p, .. } => {
                    bytes.extend(self.value(*p).data().iter().map(|&v| u8::from(v < BCE_CLAMP) + 2 * u8::from(v > 1.0 - BCE_CLAMP)))
                }
                _ => {}
            }
        }
        fnv1a(&bytes)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let [n, cin, h, wd] = nchw(self.value(x), "conv2d input")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(dim_err!("conv2d weight must be Cout x Cin x K x K, got {ws:?}"));
        }
        if ws[1] != cin {
            return Err(dim_err!(
                "conv2d channel mismatch: input {:?} vs weight {:?}",
                self.value(x).shape(),
                ws
            ));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(contract_err!("conv2d stride and dilation must be >= 1"));
        }
        let (cout, k) = (ws[0], ws[2]);
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(dim_err!("conv2d bias {:?} does not match Cout {cout}", self.value(b).shape()));
            }
        }
        let ho = ConvGeom::out_extent(h, k, spec.stride, spec.padding, spec.dilation);
        let wo = ConvGeom::out_extent(wd, k, spec.stride, spec.padding, spec.dilation);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(dim_err!(
                "conv2d kernel {k} with dilation {} does not fit input {h}x{wd} padded by {}",
                spec.dilation,
                spec.padding
            ));
        };
        let geom = ConvGeom { cin, h, w: wd, k, stride: spec.stride, pad: spec.padding, dil: spec.dilation, ho, wo };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &geom,
        );
        let value = Tensor::new(&[n, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Matrix product of rank-2 operands, or batched over a leading extent for rank 3.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        let (batch, r, k, k2, s) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[0], sb[1]),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[1], sb[2]),
            _ => return Err(dim_err!("matmul operands {sa:?} and {sb:?} are not compatible")),
        };
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let mut out = vec![0.0; batch * r * s];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                kernels::gemm(
                    r,
                    k,
                    s,
                    1.0,
                    &ad[i * r * k..],
                    (k, 1),
                    &bd[i * k * s..],
                    (s, 1),
                    0.0,
                    &mut out[i * r * s..(i + 1) * r * s],
                    (s, 1),
                );
            }
        }
        let shape: Vec<usize> = if sa.len() == 2 { vec![r, s] } else { vec![batch, r, s] };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(contract_err!("softmax axis {axis} invalid for shape {shape:?}"));
        }
        let out = kernels::softmax_forward(self.value(x).data(), kernels::axis_split(&shape, axis));
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    pub fn pool2d(&mut self, x: Var, mode: PoolMode, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "pool2d input")?;
        if mode == PoolMode::GlobalAvg {
            let xd = self.value(x).data();
            let hw = h * w;
            let out: Vec<f64> = (0..n * c).map(|p| xd[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
            let value = Tensor::new(&[n, c, 1, 1], out)?;
            return Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]));
        }
        if stride == 0 || k == 0 {
            return Err(contract_err!("pool2d kernel and stride must be >= 1"));
        }
        let (Some(ho), Some(wo)) = (
            ConvGeom::out_extent(h, k, stride, pad, 1),
            ConvGeom::out_extent(w, k, stride, pad, 1),
        ) else {
            return Err(dim_err!("pool2d kernel {k} larger than padded extent of {h}x{w} (padding {pad})"));
        };
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        match mode {
            PoolMode::Max => {
                let mut argmax = vec![0usize; out.len()];
                for p in 0..n * c {
                    let base = p * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = usize::MAX;
                            for ki in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let i = base + iy as usize * w + ix as usize;
                                    // strict comparison: first maximum in scan order wins
                                    if xd[i] > best || best_i == usize::MAX {
                                        best = xd[i];
                                        best_i = i;
                                    }
                                }
                            }
                            let o = (p * ho + oy) * wo + ox;
                            out[o] = best;
                            argmax[o] = best_i;
                        }
                    }
                }
                let value = Tensor::new(&[n, c, ho, wo], out)?;
                Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
            }
            PoolMode::Avg => {
                let norm = (k * k) as f64;
                for p in 0..n * c {
                    let base = p * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for ki in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        acc += xd[base + iy as usize * w + ix as usize];
                                    }
                                }
                            }
                            out[(p * ho + oy) * wo + ox] = acc / norm;
                        }
                    }
                }
                let value = Tensor::new(&[n, c, ho, wo], out)?;
                Ok(self.push(value, Op::AvgPool { x, k, stride, pad }, &[x]))
            }
            PoolMode::GlobalAvg => unreachable!(),
        }
    }

    /// Batch normalization over `N, H, W` per channel.
    ///
    /// With `running = None` the batch statistics are used (training mode) and
    /// returned so the caller can fold them into its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let [n, c, h, w] = nchw(self.value(x), "batch_norm input")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(dim_err!(
                "batch_norm affine parameters {:?}/{:?} do not match {c} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            ));
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        let mut stats = BatchStats { mean: vec![0.0; c], var: vec![0.0; c] };
        for ch in 0..c {
            let (mean, var) = match running {
                Some((rm, rv)) => (rm[ch], rv[ch]),
                None => {
                    let mut s = 0.0;
                    for s_i in 0..n {
                        s += xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mean = s / m;
                    let mut ss = 0.0;
                    for s_i in 0..n {
                        ss += xd[(s_i * c + ch) * hw..(s_i * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = ss / m;
                    stats.mean[ch] = mean;
                    stats.var[ch] = if m > 1.0 { ss / (m - 1.0) } else { 0.0 };
                    (mean, var)
                }
            };
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for s_i in 0..n {
                let range = (s_i * c + ch) * hw..(s_i * c + ch + 1) * hw;
                for i in range {
                    let xh = (xd[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let train = running.is_none();
        let value = Tensor::new(&[n, c, h, w], out)?;
        let v = self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta]);
        Ok((v, train.then_some(stats)))
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(self.value(a), self.value(b), what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.value(a).shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        self.push(value, Op::Sigmoid { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs { x }, &[x])
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// Multiplication by a differentiable single-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err!("scale_by expects a single-element factor, got {:?}", self.value(s).shape()));
        }
        let c = self.value(s).data()[0];
        let value = self.value(x).map(|v| v * c);
        Ok(self.push(value, Op::ScaleBy { x, s }, &[x, s]))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| contract_err!("concat of zero tensors"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(contract_err!("concat axis {axis} invalid for shape {base:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat along axis {axis}: {:?} incompatible with {:?}", s, base));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for p in parts {
            nchw(self.value(*p), "concat_channels part")?;
        }
        self.concat(parts, 1)
    }

    /// `out[i] = x[idx[i]]`, reshaped to `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xd = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xd.len()) {
            return Err(dim_err!("gather index {bad} out of range for {} values", xd.len()));
        }
        let data = idx.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { x, idx }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Swaps the last two extents of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let (b, r, c) = match s.len() {
            2 => (1, s[0], s[1]),
            3 => (s[0], s[1], s[2]),
            _ => return Err(dim_err!("transpose expects rank 2 or 3, got {s:?}")),
        };
        let mut idx = Vec::with_capacity(b * r * c);
        for bi in 0..b {
            for j in 0..c {
                for i in 0..r {
                    idx.push(bi * r * c + i * c + j);
                }
            }
        }
        let shape: Vec<usize> = if s.len() == 2 { vec![c, r] } else { vec![b, c, r] };
        self.gather(x, idx, &shape)
    }

    /// Selects `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let (outer, full, inner) = kernels::axis_split(&shape, axis);
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            idx.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, idx, &out_shape)
    }

    pub fn upsample(&mut self, x: Var, oh: usize, ow: usize, mode: UpsampleMode) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "upsample input")?;
        if oh == 0 || ow == 0 {
            return Err(contract_err!("upsample target must be at least 1x1"));
        }
        match mode {
            UpsampleMode::Nearest => {
                let mut idx = Vec::with_capacity(n * c * oh * ow);
                for p in 0..n * c {
                    for oy in 0..oh {
                        let iy = (oy * h) / oh;
                        for ox in 0..ow {
                            idx.push(p * h * w + iy * w + (ox * w) / ow);
                        }
                    }
                }
                self.gather(x, idx, &[n, c, oh, ow])
            }
            UpsampleMode::Bilinear => {
                let out = kernels::bilinear_resize(self.value(x).data(), n * c, h, w, oh, ow);
                let value = Tensor::new(&[n, c, oh, ow], out)?;
                Ok(self.push(value, Op::Bilinear { x }, &[x]))
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Pixel-mean binary cross-entropy with predictions clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, target: Var) -> Result<Var> {
        same_shape(self.value(p), self.value(target), "bce")?;
        let (pd, td) = (self.value(p).data(), self.value(target).data());
        let total: f64 = pd.iter().zip(td).map(|(&p, &g)| bce_term(p, g)).sum();
        let value = Tensor::scalar(total / pd.len() as f64);
        Ok(self.push(value, Op::Bce { p, target }, &[p, target]))
    }

    /// Fixed depthwise Sobel gradient magnitude with zero padding.
    pub fn sobel_magnitude(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self.value(x), "sobel input")?;
        let xd = self.value(x).data();
        let at = |p: usize, y: isize, xx: isize| -> f64 {
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                xd[p * h * w + y as usize * w + xx as usize]
            }
        };
        let len = n * c * h * w;
        let (mut gx, mut gy, mut mag) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
        for p in 0..n * c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let i = p * h * w + y as usize * w + xx as usize;
                    let dx = (at(p, y - 1, xx + 1) - at(p, y - 1, xx - 1))
                        + 2.0 * (at(p, y, xx + 1) - at(p, y, xx - 1))
                        + (at(p, y + 1, xx + 1) - at(p, y + 1, xx - 1));
                    let dy = (at(p, y + 1, xx - 1) - at(p, y - 1, xx - 1))
                        + 2.0 * (at(p, y + 1, xx) - at(p, y - 1, xx))
                        + (at(p, y + 1, xx + 1) - at(p, y - 1, xx + 1));
                    gx[i] = dx;
                    gy[i] = dy;
                    mag[i] = (dx * dx + dy * dy).sqrt();
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], mag)?;
        Ok(self.push(value, Op::SobelMag { x, gx, gy }, &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!("backward needs a scalar loss, got shape {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape(), data).expect("gradient shape");
        let gd = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let n = self.value(*x).shape()[0];
                let cout = self.value(*w).shape()[0];
                let mut dx = self.wants(*x).then(|| vec![0.0; self.value(*x).len()]);
                let mut dw = self.wants(*w).then(|| vec![0.0; self.value(*w).len()]);
                let mut db = b.filter(|b| self.wants(*b)).map(|_| vec![0.0; cout]);
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    n,
                    self.value(*w).data(),
                    cout,
                    geom,
                    gd,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    acc(grads, *x, like(*x, dx));
                }
                if let Some(dw) = dw {
                    acc(grads, *w, like(*w, dw));
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (batch, r, k, s) =
                    if sa.len() == 2 { (1, sa[0], sa[1], sb[1]) } else { (sa[0], sa[1], sa[2], sb[2]) };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for i in 0..batch {
                        // dA = dC (r x s) * B^T (s x k)
                        kernels::gemm(
                            r,
                            s,
                            k,
                            1.0,
                            &gd[i * r * s..],
                            (s, 1),
                            &bd[i * k * s..],
                            (1, s),
                            0.0,
                            &mut da[i * r * k..(i + 1) * r * k],
                            (k, 1),
                        );
                    }
                    acc(grads, *a, like(*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for i in 0..batch {
                        // dB = A^T (k x r) * dC (r x s)
                        kernels::gemm(
                            k,
                            r,
                            s,
                            1.0,
                            &ad[i * r * k..],
                            (1, k),
                            &gd[i * r * s..],
                            (s, 1),
                            0.0,
                            &mut db[i * k * s..(i + 1) * k * s],
                            (s, 1),
                        );
                    }
                    acc(grads, *b, like(*b, db));
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = kernels::axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| y[base + j * inner] * gd[base + j * inner]).sum();
                        for j in 0..len {
                            let t = base + j * inner;
                            dx[t] = y[t] * (gd[t] - dot);
                        }
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::AvgPool { x, k, stride, pad } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let [_, _, ho, wo] = node.value.dims4();
                let norm = (k * k) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = gd[(p * ho + oy) * wo + ox] / norm;
                            for ki in 0..*k {
                                let iy = (oy * stride + ki) as isize - *pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..*k {
                                    let ix = (ox * stride + kj) as isize - *pad as isize;
                                    if ix >= 0 && ix < w as isize {
                                        dx[p * h * w + iy as usize * w + ix as usize] += g;
                                    }
                                }
                            }
                        }
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::GlobalAvgPool { x } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let g = gd[p] / hw as f64;
                    dx[p * hw..(p + 1) * hw].fill(g);
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; n * c * hw];
                for ch in 0..c {
                    let idx = || (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
                    let sum_dy: f64 = idx().map(|i| gd[i]).sum();
                    let sum_dy_xhat: f64 = idx().map(|i| gd[i] * xhat[i]).sum();
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let k = g[ch] * inv_std[ch];
                    if *train {
                        for i in idx() {
                            dx[i] = k * (gd[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m);
                        }
                    } else {
                        for i in idx() {
                            dx[i] = k * gd[i];
                        }
                    }
                }
                if self.wants(*x) {
                    acc(grads, *x, like(*x, dx));
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, like(*gamma, dgamma));
                }
                if self.wants(*beta) {
                    acc(grads, *beta, like(*beta, dbeta));
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.wants(*v) {
                        acc(grads, *v, gy.clone());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    acc(grads, *a, like(*a, gd.iter().zip(bd).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    acc(grads, *b, like(*b, gd.iter().zip(ad).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx = gd.iter().zip(xd).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                acc(grads, *x, like(*x, dx));
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &s)| g * s * (1.0 - s)).collect();
                acc(grads, *x, like(*x, dx));
            }
            Op::Abs { x } => {
                let xd = self.value(*x).data();
                let dx = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else if v < 0.0 { -g } else { 0.0 })
                    .collect();
                acc(grads, *x, like(*x, dx));
            }
            Op::Scale { x, c } => acc(grads, *x, gy.map(|g| g * c)),
            Op::AddScalar { x } => acc(grads, *x, gy.clone()),
            Op::ScaleBy { x, s } => {
                let c = self.value(*s).data()[0];
                if self.wants(*x) {
                    acc(grads, *x, gy.map(|g| g * c));
                }
                if self.wants(*s) {
                    let ds: f64 = gd.iter().zip(self.value(*x).data()).map(|(g, v)| g * v).sum();
                    acc(grads, *s, like(*s, vec![ds]));
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.value(*p).shape()[*axis] * inner;
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dp.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        acc(grads, *p, like(*p, dp));
                    }
                    offset += chunk;
                }
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &i) in idx.iter().enumerate() {
                    dx[i] += gd[o];
                }
                acc(grads, *x, like(*x, dx));
            }
            Op::Reshape { x } => acc(grads, *x, like(*x, gd.to_vec())),
            Op::Bilinear { x } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let [_, _, oh, ow] = node.value.dims4();
                let dx = kernels::bilinear_resize_backward(gd, n * c, h, w, oh, ow);
                acc(grads, *x, like(*x, dx));
            }
            Op::Sum { x } => {
                let g = gd[0];
                acc(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Bce { p, target } => {
                let (pd, td) = (self.value(*p).data(), self.value(*target).data());
                let scale = gd[0] / pd.len() as f64;
                if self.wants(*p) {
                    let dp = pd
                        .iter()
                        .zip(td)
                        .map(|(&p, &g)| {
                            if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                scale * (p - g) / (p * (1.0 - p))
                            }
                        })
                        .collect();
                    acc(grads, *p, like(*p, dp));
                }
                if self.wants(*target) {
                    let dt = pd
                        .iter()
                        .map(|&p| {
                            let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            scale * ((1.0 - q).ln() - q.ln())
                        })
                        .collect();
                    acc(grads, *target, like(*target, dt));
                }
            }
            Op::SobelMag { x, gx, gy: gyv } => {
                let [n, c, h, w] = self.value(*x).dims4();
                let mag = node.value.data();
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let i = p * h * w + y as usize * w + xx as usize;
                            if mag[i] == 0.0 {
                                continue;
                            }
                            let ax = gd[i] * gx[i] / mag[i];
                            let ay = gd[i] * gyv[i] / mag[i];
                            let mut put = |yy: isize, xc: isize, v: f64| {
                                if yy >= 0 && xc >= 0 && yy < h as isize && xc < w as isize {
                                    dx[p * h * w + yy as usize * w + xc as usize] += v;
                                }
                            };
                            put(y - 1, xx + 1, ax);
                            put(y - 1, xx - 1, -ax);
                            put(y, xx + 1, 2.0 * ax);
                            put(y, xx - 1, -2.0 * ax);
                            put(y + 1, xx + 1, ax + ay);
                            put(y + 1, xx - 1, -ax + ay);
                            put(y + 1, xx, 2.0 * ay);
                            put(y - 1, xx, -2.0 * ay);
                            put(y - 1, xx - 1, -ay);
                            put(y - 1, xx + 1, -ay);
                        }
                    }
                }
                acc(grads, *x, like(*x, dx));
            }
        }
    }
}

const BCE_CLAMP: f64 = 1e-7;

pub(crate) fn bce_term(p: f64, g: f64) -> f64 {
    let q = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(g * q.ln() + (1.0 - g) * (1.0 - q).ln())
}
