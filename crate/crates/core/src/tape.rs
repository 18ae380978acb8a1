//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node whose inputs already live on the tape, so
//! node order is a topological order and [`Tape::backward`] is a single
//! reverse sweep. Values are copied onto the tape; parameters stay owned by
//! whoever holds the [`Tensor`], and gradients are read back with
//! [`Tape::grad`].

use crate::error::{Error, Result};
use crate::linalg::{matmul_nn, matmul_nt, matmul_tn};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics.
    Batch,
    /// Normalize with the supplied running statistics.
    Running,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Log(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    ScaleChannels { x: Var, s: Var },
    Conv2d(ConvSaved),
    BatchNorm(NormSaved),
    MaxPool { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    Mse { pred: Var, target: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct ConvSaved {
    x: Var,
    w: Var,
    geom: ConvGeom,
}

#[derive(Debug)]
struct NormSaved {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mode: NormMode,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw_out = self.spatial_out();
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (ci * self.kh + di) * self.kw + dj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + di) as isize - self.pad as isize;
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + dj) as isize - self.pad as isize;
                            dst[oh * self.wo + ow] = if ih >= 0
                                && iw >= 0
                                && (ih as usize) < self.h
                                && (iw as usize) < self.w
                            {
                                plane[ih as usize * self.w + iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw_out = self.spatial_out();
        for ci in 0..self.cin {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for di in 0..self.kh {
                for dj in 0..self.kw {
                    let row = (ci * self.kh + di) * self.kw + dj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + di) as isize - self.pad as isize;
                        if ih < 0 || ih as usize >= self.h {
                            continue;
                        }
                        for ow in 0..self.wo {
                            let iw = (ow * self.stride + dj) as isize - self.pad as isize;
                            if iw < 0 || iw as usize >= self.w {
                                continue;
                            }
                            plane[ih as usize * self.w + iw as usize] += src[oh * self.wo + ow];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// Records a tensor as a leaf; it participates in backward iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes keep consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, op))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("a tensor matches its own shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is 1 strictly inside and 0 elsewhere.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { x: a, lo, hi })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    /// Square root. At exactly zero the backward pass uses a zero subgradient.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| x < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s / n], rg, Op::Mean(a))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// Affine map `x[N,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim(format!("linear of input {sx:?} with weight {sw:?}")));
        }
        let (n, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim(format!(
                    "linear bias {:?} for {dout} outputs",
                    self.shape(b)
                )));
            }
            let bias = self.value(b);
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        matmul_nt(self.value(x), self.value(w), &mut out, n, din, dout);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(vec![n, dout], out, rg, Op::Linear { x, w, b }))
    }

    /// Multiplies channel `c` of `x[N,C,...]` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 || self.shape(s) != [sx[1]] {
            return Err(Error::dim(format!(
                "channel scale {:?} for input {sx:?}",
                self.shape(s)
            )));
        }
        let (n, c) = (sx[0], sx[1]);
        let inner = numel(sx) / (n * c);
        let scales = self.value(s);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let k = scales[i % c];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let rg = self.rg(&[x, s]);
        Ok(self.push(sx.to_vec(), out, rg, Op::ScaleChannels { x, s }))
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,kh,kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim(format!("conv2d of input {sx:?} with weight {sw:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let (kh, kw) = (sw[2], sw[3]);
        if kh > sx[2] + 2 * pad || kw > sx[3] + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                sx[2] + 2 * pad,
                sx[3] + 2 * pad
            )));
        }
        let geom = ConvGeom {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh,
            kw,
            stride,
            pad,
            ho: (sx[2] + 2 * pad - kh) / stride + 1,
            wo: (sx[3] + 2 * pad - kw) / stride + 1,
        };
        let (patch, hw_out) = (geom.patch(), geom.spatial_out());
        let in_stride = geom.cin * geom.h * geom.w;
        let out_stride = geom.cout * hw_out;
        let mut out = vec![0.0; geom.n * out_stride];
        let mut cols = vec![0.0; patch * hw_out];
        let (xv, wv) = (self.value(x), self.value(w));
        for i in 0..geom.n {
            geom.im2col(&xv[i * in_stride..(i + 1) * in_stride], &mut cols);
            matmul_nn(
                wv,
                &cols,
                &mut out[i * out_stride..(i + 1) * out_stride],
                geom.cout,
                patch,
                hw_out,
            );
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(
            vec![geom.n, geom.cout, geom.ho, geom.wo],
            out,
            rg,
            Op::Conv2d(ConvSaved { x, w, geom }),
        ))
    }

    /// Per-channel normalization of `x[N,C,...]`.
    ///
    /// With [`NormMode::Batch`] the batch mean and biased variance are used and
    /// returned (mean, unbiased variance) for running-statistic updates. With
    /// [`NormMode::Running`] the supplied `running` statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: (&[f64], &[f64]),
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::dim(format!("batch norm input {sx:?} has no channel axis")));
        }
        let (n, c) = (sx[0], sx[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!("batch norm affine parameters for {c} channels")));
        }
        let inner = numel(&sx) / (n * c);
        let count = n * inner;
        let xv = self.value(x);
        let (mean, var, batch_stats) = match mode {
            NormMode::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, chunk) in xv.chunks(inner).enumerate() {
                    mean[i % c] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for (i, chunk) in xv.chunks(inner).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                let unbiased: Vec<f64> = var
                    .iter()
                    .map(|v| if count > 1 { v / (count - 1) as f64 } else { 0.0 })
                    .collect();
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean.clone(), var, Some((mean, unbiased)))
            }
            NormMode::Running => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(Error::dim("running statistics length"));
                }
                (running.0.to_vec(), running.1.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, ((xc, hc), oc)) in xv
            .chunks(inner)
            .zip(xhat.chunks_mut(inner))
            .zip(out.chunks_mut(inner))
            .enumerate()
        {
            let ch = i % c;
            for ((xi, hi), oi) in xc.iter().zip(hc.iter_mut()).zip(oc.iter_mut()) {
                *hi = (xi - mean[ch]) * inv_std[ch];
                *oi = *hi * g[ch] + b[ch];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            sx,
            out,
            rg,
            Op::BatchNorm(NormSaved {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            }),
        );
        Ok((v, batch_stats))
    }

    /// Non-overlapping `k×k` max pooling of `x[N,C,H,W]` (floor on ragged edges).
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || sx[2] < k || sx[3] < k {
            return Err(Error::dim(format!("max pool {k}x{k} on input {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * k * w + ow * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (oh * k + di) * w + ow * k + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, c, ho, wo], out, rg, Op::MaxPool { x, argmax }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, rg, Op::Reshape(x)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = numel(s) / n;
        self.reshape(x, vec![n, rest])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse")?;
        let (p, t) = (self.value(pred), self.value(target));
        let loss = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![loss], rg, Op::Mse { pred, target }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!(
                "cross entropy of logits {s:?} with {} labels",
                labels.len()
            )));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} outside {c} classes")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss / n as f64],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Populates gradients of `loss` with respect to every node that requires
    /// one. Previous gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient buffer of `v`, or `None` when `v` does not take gradients.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize, f64) -> f64, g: &[f64]) {
    if let Some(buf) = slot(nodes, grads, v) {
        for (i, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
            *b += f(i, gi);
        }
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |_, gi| gi, g);
            accumulate(nodes, grads, *b, |_, gi| gi, g);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |_, gi| gi, g);
            accumulate(nodes, grads, *b, |_, gi| -gi, g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |i, gi| gi * bv[i], g);
            accumulate(nodes, grads, *b, |i, gi| gi * av[i], g);
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, |_, gi| gi * s, g),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, |_, gi| gi, g),
        Op::Relu(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |i, gi| if av[i] > 0.0 { gi } else { 0.0 }, g);
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, |i, gi| gi * (1.0 - y[i] * y[i]), g),
        Op::Sigmoid(a) => accumulate(nodes, grads, *a, |i, gi| gi * y[i] * (1.0 - y[i]), g),
        Op::Clamp { x, lo, hi } => {
            let xv = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                |i, gi| if xv[i] > *lo && xv[i] < *hi { gi } else { 0.0 },
                g,
            );
        }
        Op::Log(a) => {
            let av = val(*a);
            accumulate(nodes, grads, *a, |i, gi| gi / av[i], g);
        }
        Op::Sqrt(a) => accumulate(
            nodes,
            grads,
            *a,
            |i, gi| if y[i] > 0.0 { gi / (2.0 * y[i]) } else { 0.0 },
            g,
        ),
        Op::Sum(a) => accumulate(nodes, grads, *a, |_, _| g[0], &vec![0.0; val(*a).len()]),
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            accumulate(nodes, grads, *a, |_, _| g[0] / n, &vec![0.0; val(*a).len()]);
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(buf) = slot(nodes, grads, *a) {
                // dA = G · Bᵀ
                matmul_nt(g, bv, buf, m, n, k);
            }
            if let Some(buf) = slot(nodes, grads, *b) {
                // dB = Aᵀ · G
                matmul_tn(av, g, buf, k, m, n);
            }
        }
        Op::Linear { x, w, b } => {
            let (sx, sw) = (&nodes[x.0].shape, &nodes[w.0].shape);
            let (n, din, dout) = (sx[0], sx[1], sw[0]);
            let (xv, wv) = (val(*x), val(*w));
            if let Some(buf) = slot(nodes, grads, *x) {
                matmul_nn(g, wv, buf, n, dout, din);
            }
            if let Some(buf) = slot(nodes, grads, *w) {
                matmul_tn(g, xv, buf, dout, n, din);
            }
            if let Some(b) = b {
                if let Some(buf) = slot(nodes, grads, *b) {
                    for row in g.chunks(dout) {
                        buf.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                }
            }
        }
        Op::ScaleChannels { x, s } => {
            let sx = &nodes[x.0].shape;
            let (n, c) = (sx[0], sx[1]);
            let inner = y.len() / (n * c);
            let (xv, sv) = (val(*x), val(*s));
            accumulate(nodes, grads, *x, |i, gi| gi * sv[(i / inner) % c], g);
            if let Some(buf) = slot(nodes, grads, *s) {
                for (i, (gc, xc)) in g.chunks(inner).zip(xv.chunks(inner)).enumerate() {
                    buf[i % c] += gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Op::Conv2d(ConvSaved { x, w, geom }) => {
            let (patch, hw_out) = (geom.patch(), geom.spatial_out());
            let in_stride = geom.cin * geom.h * geom.w;
            let out_stride = geom.cout * hw_out;
            let (xv, wv) = (val(*x), val(*w));
            let want_w = nodes[w.0].requires_grad;
            let want_x = nodes[x.0].requires_grad;
            let mut cols = vec![0.0; patch * hw_out];
            if want_w {
                let mut dw = vec![0.0; wv.len()];
                for i in 0..geom.n {
                    geom.im2col(&xv[i * in_stride..(i + 1) * in_stride], &mut cols);
                    matmul_nt(&g[i * out_stride..(i + 1) * out_stride], &cols, &mut dw, geom.cout, hw_out, patch);
                }
                accumulate(nodes, grads, *w, |i, _| dw[i], &dw);
            }
            if want_x {
                let buf = slot(nodes, grads, *x).expect("requires grad");
                for i in 0..geom.n {
                    cols.iter_mut().for_each(|c| *c = 0.0);
                    matmul_tn(wv, &g[i * out_stride..(i + 1) * out_stride], &mut cols, patch, geom.cout, hw_out);
                    geom.col2im(&cols, &mut buf[i * in_stride..(i + 1) * in_stride]);
                }
            }
        }
        Op::BatchNorm(NormSaved {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            mode,
        }) => {
            let sx = &nodes[x.0].shape;
            let (n, c) = (sx[0], sx[1]);
            let inner = y.len() / (n * c);
            let count = (n * inner) as f64;
            let gv = val(*gamma);
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (i, (gc, hc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                sum_g[i % c] += gc.iter().sum::<f64>();
                sum_gx[i % c] += gc.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>();
            }
            accumulate(nodes, grads, *gamma, |i, _| sum_gx[i], &sum_gx);
            accumulate(nodes, grads, *beta, |i, _| sum_g[i], &sum_g);
            if let Some(buf) = slot(nodes, grads, *x) {
                for (i, ((bc, gc), hc)) in buf
                    .chunks_mut(inner)
                    .zip(g.chunks(inner))
                    .zip(xhat.chunks(inner))
                    .enumerate()
                {
                    let ch = i % c;
                    let k = gv[ch] * inv_std[ch];
                    match mode {
                        NormMode::Running => {
                            bc.iter_mut().zip(gc).for_each(|(b, gi)| *b += k * gi);
                        }
                        NormMode::Batch => {
                            let mg = sum_g[ch] / count;
                            let mgx = sum_gx[ch] / count;
                            for ((b, gi), hi) in bc.iter_mut().zip(gc).zip(hc) {
                                *b += k * (gi - mg - hi * mgx);
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool { x, argmax } => {
            if let Some(buf) = slot(nodes, grads, *x) {
                for (&idx, gi) in argmax.iter().zip(g) {
                    buf[idx] += gi;
                }
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |_, gi| gi, g),
        Op::Mse { pred, target } => {
            let (p, t) = (val(*pred), val(*target));
            let k = 2.0 * g[0] / p.len() as f64;
            accumulate(nodes, grads, *pred, |i, _| k * (p[i] - t[i]), &vec![0.0; p.len()]);
            accumulate(nodes, grads, *target, |i, _| -k * (p[i] - t[i]), &vec![0.0; p.len()]);
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = nodes[logits.0].shape[1];
            let k = g[0] / labels.len() as f64;
            accumulate(
                nodes,
                grads,
                *logits,
                |i, _| {
                    let onehot = if labels[i / c] == i % c { 1.0 } else { 0.0 };
                    k * (probs[i] - onehot)
                },
                &vec![0.0; probs.len()],
            );
        }
    }
}
