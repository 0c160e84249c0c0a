//! Record-and-replay reverse-mode differentiation over a fixed op vocabulary.
//!
//! A [`Graph`] is an append-only list of nodes. Every op evaluates eagerly,
//! stores its value, and remembers what it needs for the backward pass.
//! [`Graph::backward`] walks the list in reverse from a scalar loss and
//! returns gradients for every leaf created with `requires_grad`.
//!
//! ```
//! use diffcd::numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let w = g.param(Tensor::scalar(3.0));
//! let y = g.mul(w, w).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(w).unwrap().item().unwrap(), 6.0);
//! ```

use std::collections::HashMap;

use super::kernels::{self, ConvGeom, GroupNormSaved};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    AddRow(Var, Var),
    AddChannels(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Upsample(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved,
    },
    Warp {
        feat: Var,
        flow: Var,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
        pos_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// True when any gradient-requiring leaf feeds this node.
    tracks: bool,
}

/// Gradients of a scalar loss with respect to the tracked leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<Tensor> {
        self.map.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GROUP_NORM_EPS: f64 = 1e-5;

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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracks: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let tracks = inputs.iter().any(|&v| self.tracks(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracks,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn nchw(&self, v: Var, what: &str) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::Shape(format!("{what}: expected NCHW, got {s:?}"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::MulScalar(a, c), &[a], "mul_scalar")
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
            }
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = av[i * k + p];
                for (o, &bb) in row.iter_mut().zip(&bv[p * n..(p + 1) * n]) {
                    *o += s * bb;
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = match (self.shape(x), self.shape(b)) {
            (&[_, n], &[n2]) if n == n2 => n,
            (sx, sb) => return Err(Error::Shape(format!("add_row: {sx:?} + {sb:?}"))),
        };
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[i % n];
        }
        self.push(out, Op::AddRow(x, b), &[x, b], "add_row")
    }

    /// Adds a per-sample, per-channel `[N, C]` term to every spatial
    /// position of an `[N, C, ...]` tensor.
    pub fn add_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if xs.len() < 2 || bs.len() != 2 || bs[..] != xs[..2] {
            return Err(Error::Shape(format!("add_channels: {xs:?} + {bs:?}")));
        }
        let spatial: usize = xs[2..].iter().product();
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[i / spatial];
        }
        self.push(out, Op::AddChannels(x, b), &[x, b], "add_channels")
    }

    /// Square-kernel convolution, `x` [N,Ci,H,W], `w` [Co,Ci,K,K], `b` [Co].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let [n, ci, h, wd] = self.nchw(x, "conv2d input")?;
        let (co, k) = match *self.shape(w) {
            [co, ci2, k, k2] if ci2 == ci && k == k2 => (co, k),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv2d: weight {s:?} incompatible with {ci} input channels"
                )))
            }
        };
        if self.shape(b) != [co] {
            return Err(Error::Shape(format!(
                "conv2d: bias {:?} for {co} output channels",
                self.shape(b)
            )));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "conv2d: kernel {k} stride {stride} pad {pad} on {h}x{wd}"
            )));
        }
        let geom = ConvGeom {
            batch: n,
            c_in: ci,
            h,
            w: wd,
            c_out: co,
            k,
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = Tensor::new(vec![n, co, geom.out_h(), geom.out_w()], out)?;
        self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b], "conv2d")
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let [n, c, h, w] = self.nchw(x, "upsample")?;
        if factor == 0 {
            return Err(Error::Shape("upsample factor 0".into()));
        }
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::upsample_forward(self.shape(x), factor, self.value(x).data());
        let out = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        self.push(out, Op::Upsample(x, factor), &[x], "upsample")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x], "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x], "tanh")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs(x), &[x], "abs")
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::Shape(format!("group_norm: {groups} groups over {xs:?}")));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::Shape("group_norm: affine terms must be [C]".into()));
        }
        let (y, saved) = kernels::group_norm_forward(
            &xs,
            groups,
            GROUP_NORM_EPS,
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(xs, y)?;
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            &[x, gamma, beta],
            "group_norm",
        )
    }

    /// Backward bilinear warp of `feat` [N,C,H,W] by `flow` [N,2,H,W];
    /// see [`crate::fdaf::bilinear_warp`] for the convention.
    pub fn warp(&mut self, feat: Var, flow: Var) -> Result<Var> {
        let [n, _, h, w] = self.nchw(feat, "warp features")?;
        if self.shape(flow) != [n, 2, h, w] {
            return Err(Error::Shape(format!(
                "warp: flow {:?} does not match features {:?}",
                self.shape(flow),
                self.shape(feat)
            )));
        }
        self.value(flow).ensure_finite("warp flow")?;
        let out = kernels::warp_forward(
            self.shape(feat),
            self.value(feat).data(),
            self.value(flow).data(),
        );
        let out = Tensor::new(self.shape(feat).to_vec(), out)?;
        self.push(out, Op::Warp { feat, flow }, &[feat, flow], "warp")
    }

    /// Concatenation along the channel axis (axis 1).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let fs = self.shape(first).to_vec();
        if fs.len() < 2 {
            return Err(Error::Shape(format!("concat: rank of {fs:?} below 2")));
        }
        let n = fs[0];
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != fs.len() || s[0] != n || s[2..] != fs[2..] {
                return Err(Error::Shape(format!("concat: {s:?} vs {fs:?}")));
            }
            channels += s[1];
        }
        let inner: usize = fs[2..].iter().product();
        let mut data = Vec::with_capacity(n * channels * inner);
        for ni in 0..n {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[1] * inner;
                data.extend_from_slice(&t.data()[ni * block..(ni + 1) * block]);
            }
        }
        let mut shape = fs;
        shape[1] = channels;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec()), parts, "concat")
    }

    /// Channels `start..start + len` of an `[N, C, ...]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || len == 0 || start + len > xs[1] {
            return Err(Error::Shape(format!(
                "slice_channels {start}..{} of {xs:?}",
                start + len
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(xs[0] * len * inner);
        for ni in 0..xs[0] {
            let off = (ni * xs[1] + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = xs;
        shape[1] = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::SliceChannels { x, start }, &[x], "slice_channels")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), &[x], "mean")
    }

    /// Mean binary cross-entropy on logits in the stable softplus form,
    /// positives weighted by `pos_weight`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor, pos_weight: f64) -> Result<Var> {
        self.value(logits).expect_same_shape(target, "bce_with_logits")?;
        if let Some(bad) = target.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(Error::Contract(format!(
                "bce target must be 0 or 1, found {bad}"
            )));
        }
        let z = self.value(logits).data();
        let total = z
            .iter()
            .zip(target.data())
            .fold(0.0, |acc, (&z, &m)| {
                acc + pos_weight * m * softplus(-z) + (1.0 - m) * softplus(z)
            });
        let out = Tensor::scalar(total / z.len() as f64);
        self.push(
            out,
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
                pos_weight,
            },
            &[logits],
            "bce_with_logits",
        )
    }

    /// Gradients of the scalar `loss` with respect to every leaf created
    /// with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(self.value(loss).map(|_| 1.0));
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(dout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.tracks {
                continue;
            }
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out.map.insert(Var(id), dout);
                }
                continue;
            }
            for (input, g) in self.local_grads(node, &dout)? {
                accumulate(&mut grads[input.0], g)?;
            }
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, dout: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut res = Vec::with_capacity(2);
        let want = |v: Var| self.tracks(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if want(v) {
                        res.push((v, dout.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    res.push((*a, dout.clone()));
                }
                if want(*b) {
                    res.push((*b, dout.map(|g| -g)));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    res.push((*a, dout.zip_map(self.value(*b), |g, y| g * y)?));
                }
                if want(*b) {
                    res.push((*b, dout.zip_map(self.value(*a), |g, x| g * x)?));
                }
            }
            Op::AddScalar(a) => res.push((*a, dout.clone())),
            Op::MulScalar(a, c) => res.push((*a, dout.map(|g| g * c))),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let d = dout.data();
                if want(*a) {
                    // dA = dOut · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).fold(0.0, |acc, j| {
                                acc + d[i * n + j] * bv.data()[p * n + j]
                            });
                        }
                    }
                    res.push((*a, Tensor::new(vec![m, k], da)?));
                }
                if want(*b) {
                    // dB = Aᵀ · dOut
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let s = av.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += s * d[i * n + j];
                            }
                        }
                    }
                    res.push((*b, Tensor::new(vec![k, n], db)?));
                }
            }
            Op::AddRow(x, b) => {
                if want(*x) {
                    res.push((*x, dout.clone()));
                }
                if want(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for (i, g) in dout.data().iter().enumerate() {
                        db[i % n] += g;
                    }
                    res.push((*b, Tensor::new(vec![n], db)?));
                }
            }
            Op::AddChannels(x, b) => {
                if want(*x) {
                    res.push((*x, dout.clone()));
                }
                if want(*b) {
                    let bs = self.shape(*b).to_vec();
                    let spatial = dout.numel() / (bs[0] * bs[1]);
                    let mut db = vec![0.0; bs[0] * bs[1]];
                    for (i, g) in dout.data().iter().enumerate() {
                        db[i / spatial] += g;
                    }
                    res.push((*b, Tensor::new(bs, db)?));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let g = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dout.data(),
                    want(*x),
                    want(*w),
                    want(*b),
                );
                if let Some(dx) = g.dx {
                    res.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
                }
                if let Some(dw) = g.dw {
                    res.push((*w, Tensor::new(self.shape(*w).to_vec(), dw)?));
                }
                if let Some(db) = g.db {
                    res.push((*b, Tensor::new(self.shape(*b).to_vec(), db)?));
                }
            }
            Op::Upsample(x, factor) => {
                let dx = kernels::upsample_backward(self.shape(*x), *factor, dout.data());
                res.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
            }
            Op::Relu(x) => {
                let g = dout.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                res.push((*x, g));
            }
            Op::Sigmoid(x) => {
                let g = dout.zip_map(&node.value, |g, s| g * s * (1.0 - s))?;
                res.push((*x, g));
            }
            Op::Tanh(x) => {
                let g = dout.zip_map(&node.value, |g, t| g * (1.0 - t * t))?;
                res.push((*x, g));
            }
            Op::Abs(x) => {
                let g = dout.zip_map(self.value(*x), |g, v| {
                    if v > 0.0 {
                        g
                    } else if v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })?;
                res.push((*x, g));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.shape(*x),
                    *groups,
                    saved,
                    self.value(*gamma).data(),
                    dout.data(),
                );
                if want(*x) {
                    res.push((*x, Tensor::new(self.shape(*x).to_vec(), dx)?));
                }
                if want(*gamma) {
                    res.push((*gamma, Tensor::new(self.shape(*gamma).to_vec(), dgamma)?));
                }
                if want(*beta) {
                    res.push((*beta, Tensor::new(self.shape(*beta).to_vec(), dbeta)?));
                }
            }
            Op::Warp { feat, flow } => {
                let (df, dfl) = kernels::warp_backward(
                    self.shape(*feat),
                    self.value(*feat).data(),
                    self.value(*flow).data(),
                    dout.data(),
                    want(*feat),
                    want(*flow),
                );
                if let Some(df) = df {
                    res.push((*feat, Tensor::new(self.shape(*feat).to_vec(), df)?));
                }
                if let Some(dfl) = dfl {
                    res.push((*flow, Tensor::new(self.shape(*flow).to_vec(), dfl)?));
                }
            }
            Op::Concat(parts) => {
                let os = dout.shape();
                let inner: usize = os[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if want(p) {
                        let mut data = Vec::with_capacity(os[0] * c * inner);
                        for ni in 0..os[0] {
                            let start = (ni * os[1] + offset) * inner;
                            data.extend_from_slice(&dout.data()[start..start + c * inner]);
                        }
                        res.push((p, Tensor::new(self.shape(p).to_vec(), data)?));
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = self.shape(*x).to_vec();
                let len = dout.shape()[1];
                let inner: usize = xs[2..].iter().product();
                let mut dx = vec![0.0; xs.iter().product()];
                for ni in 0..xs[0] {
                    let dst = (ni * xs[1] + start) * inner;
                    let src = ni * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dout.data()[src..src + len * inner]);
                }
                res.push((*x, Tensor::new(xs, dx)?));
            }
            Op::Sum(x) => {
                let g = dout.item()?;
                res.push((*x, self.value(*x).map(|_| g)));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let g = dout.item()? / t.numel() as f64;
                res.push((*x, t.map(|_| g)));
            }
            Op::BceWithLogits {
                logits,
                target,
                pos_weight,
            } => {
                let z = self.value(*logits);
                let scale = dout.item()? / z.numel() as f64;
                let data = z
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&z, &m)| {
                        let s = sigmoid(z);
                        scale * (pos_weight * m * (s - 1.0) + (1.0 - m) * s)
                    })
                    .collect();
                res.push((*logits, Tensor::new(z.shape().to_vec(), data)?));
            }
        }
        Ok(res)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => {
            acc.expect_same_shape(&g, "gradient accumulation")?;
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}

/// Logistic function, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` in the stable `max(x, 0) + ln(1 + e^-|x|)` form.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
