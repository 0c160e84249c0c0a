//! Gradient cases shared by the gradient tests and the acceptance suite:
//! every differentiable graph op, plus whole-model losses of at most 5k
//! parameters, each checked against central finite differences.

#![allow(dead_code)]

use diffcd::cdnet::{bce_loss, CdHeadConfig, ChangeDetector};
use diffcd::denoiser::{UNet, UNetConfig};
use diffcd::diffusion::{denoise_loss, record_features, ScheduleConfig, TimestepIndex};
use diffcd::fdaf::FdafConfig;
use diffcd::numerics::{finite_diff_grad, gaussian, max_relative_error, Graph, ParamSet, Rng, Tensor, Var};
use diffcd::Result;

pub const H: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;
/// Relative comparisons are floored at this fraction of the gradient scale.
pub const FLOOR: f64 = 1e-3;

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;
type Make = dyn Fn(&mut Rng) -> (Vec<Tensor>, Vec<bool>);

pub struct OpCase {
    pub name: String,
    make: Box<Make>,
    build: Box<Build>,
}

impl OpCase {
    fn new(
        name: impl Into<String>,
        make: impl Fn(&mut Rng) -> (Vec<Tensor>, Vec<bool>) + 'static,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            make: Box::new(make),
            build: Box::new(build),
        }
    }

    /// Worst relative error over `cases` random draws.
    pub fn worst_error(&self, cases: u64) -> f64 {
        let mut worst: f64 = 0.0;
        for case in 0..cases {
            let mut rng = Rng::new(1000 + case);
            let (inputs, diff) = (self.make)(&mut rng);
            worst = worst.max(check(&*self.build, &inputs, &diff, 77 + case));
        }
        worst
    }
}

/// Reduces an op output to a scalar through fixed random weights so that
/// each output element carries a distinct sensitivity.
fn scalarize(g: &mut Graph, out: Var, rng: &mut Rng) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = gaussian(rng, g.shape(out))?;
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

fn loss_value(build: &Build, inputs: &[Tensor], weight_seed: u64) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = scalarize(&mut g, out, &mut Rng::new(weight_seed))?;
    g.value(loss).item()
}

fn check(build: &Build, inputs: &[Tensor], differentiable: &[bool], weight_seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| g.leaf(t.clone(), d))
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let loss = scalarize(&mut g, out, &mut Rng::new(weight_seed)).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, &d) in differentiable.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads.get(vars[i]).unwrap();
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = inputs.to_vec();
                probe[i] = x.clone();
                loss_value(build, &probe, weight_seed)
            },
            &inputs[i],
            H,
        )
        .unwrap();
        worst = worst.max(max_relative_error(analytic, &numeric, FLOOR).unwrap());
    }
    worst
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    gaussian(rng, shape).unwrap()
}

fn two(shape: &'static [usize]) -> impl Fn(&mut Rng) -> (Vec<Tensor>, Vec<bool>) {
    move |rng| (vec![randn(rng, shape), randn(rng, shape)], vec![true, true])
}

fn one(shape: &'static [usize]) -> impl Fn(&mut Rng) -> (Vec<Tensor>, Vec<bool>) {
    move |rng| (vec![randn(rng, shape)], vec![true])
}

/// One case per differentiable op (several for convolution geometries).
pub fn primitive_cases() -> Vec<OpCase> {
    let mut c = vec![
        OpCase::new("add", two(&[2, 3]), |g, v| g.add(v[0], v[1])),
        OpCase::new("sub", two(&[2, 3]), |g, v| g.sub(v[0], v[1])),
        OpCase::new("mul", two(&[2, 3]), |g, v| g.mul(v[0], v[1])),
        OpCase::new("square", one(&[4]), |g, v| g.mul(v[0], v[0])),
        OpCase::new("add_scalar", one(&[5]), |g, v| g.add_scalar(v[0], 0.7)),
        OpCase::new("mul_scalar", one(&[5]), |g, v| g.mul_scalar(v[0], -1.3)),
        OpCase::new("relu", one(&[2, 6]), |g, v| g.relu(v[0])),
        OpCase::new("sigmoid", one(&[2, 6]), |g, v| g.sigmoid(v[0])),
        OpCase::new("tanh", one(&[2, 6]), |g, v| g.tanh(v[0])),
        OpCase::new("abs", one(&[2, 6]), |g, v| g.abs(v[0])),
        OpCase::new(
            "matmul",
            |rng| (vec![randn(rng, &[3, 4]), randn(rng, &[4, 2])], vec![true, true]),
            |g, v| g.matmul(v[0], v[1]),
        ),
        OpCase::new(
            "add_row",
            |rng| (vec![randn(rng, &[3, 4]), randn(rng, &[4])], vec![true, true]),
            |g, v| g.add_row(v[0], v[1]),
        ),
        OpCase::new(
            "add_channels",
            |rng| (vec![randn(rng, &[2, 3, 2, 2]), randn(rng, &[2, 3])], vec![true, true]),
            |g, v| g.add_channels(v[0], v[1]),
        ),
    ];
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 0, 3)] {
        c.push(OpCase::new(
            format!("conv2d k{k} s{stride} p{pad}"),
            move |rng| {
                (
                    vec![randn(rng, &[2, 2, 5, 4]), randn(rng, &[3, 2, k, k]), randn(rng, &[3])],
                    vec![true, true, true],
                )
            },
            move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad),
        ));
    }
    c.extend([
        OpCase::new("upsample", one(&[1, 2, 2, 3]), |g, v| g.upsample(v[0], 2)),
        OpCase::new(
            "concat",
            |rng| (vec![randn(rng, &[2, 1, 2, 2]), randn(rng, &[2, 3, 2, 2])], vec![true, true]),
            |g, v| g.concat(&[v[0], v[1]]),
        ),
        OpCase::new("slice_channels", one(&[2, 4, 2, 2]), |g, v| g.slice_channels(v[0], 1, 2)),
        OpCase::new(
            "group_norm",
            |rng| {
                (
                    vec![randn(rng, &[2, 4, 3, 3]), randn(rng, &[4]), randn(rng, &[4])],
                    vec![true, true, true],
                )
            },
            |g, v| g.group_norm(v[0], v[1], v[2], 2),
        ),
        OpCase::new(
            "warp",
            |rng| {
                let feat = randn(rng, &[1, 2, 4, 5]);
                let flow = randn(rng, &[1, 2, 4, 5]).map(|v| 1.5 * v);
                (vec![feat, flow], vec![true, true])
            },
            |g, v| g.warp(v[0], v[1]),
        ),
        OpCase::new("sum", one(&[3, 2]), |g, v| g.sum(v[0])),
        OpCase::new("mean", one(&[3, 2]), |g, v| g.mean(v[0])),
        OpCase::new(
            "bce_with_logits",
            |rng| (vec![randn(rng, &[1, 1, 3, 3]).map(|v| 3.0 * v)], vec![true]),
            |g, v| {
                let m = Tensor::from_fn(vec![1, 1, 3, 3], |i| (i % 2) as f64)?;
                g.bce_with_logits(v[0], &m, 1.5)
            },
        ),
    ]);
    c
}

type Loss = dyn Fn(&mut Graph, &ParamSet, &[Tensor], bool) -> Result<(f64, Vec<(String, Tensor)>)>;

/// A scalar training loss over named parameters. Gradient names of the form
/// `input.i` refer to `inputs[i]`.
pub struct ModelCase {
    pub name: &'static str,
    pub params: ParamSet,
    inputs: Vec<Tensor>,
    loss: Box<Loss>,
}

impl ModelCase {
    /// Worst relative error per gradient tensor. Elements are compared as
    /// `|a − n| / max(|a|, |n|, FLOOR · scale)` with `scale` the largest
    /// gradient magnitude of the whole loss, so parameters whose gradient
    /// vanishes identically are judged against the loss's own scale.
    pub fn errors(&self) -> Vec<(String, f64)> {
        let (params, inputs, loss) = (&self.params, &self.inputs, &self.loss);
        let (_, analytic) = loss(&mut Graph::new(), params, inputs, true).unwrap();
        let numeric: Vec<Tensor> = analytic
            .iter()
            .map(|(name, _)| {
                if let Some(i) = name.strip_prefix("input.") {
                    let i: usize = i.parse().unwrap();
                    finite_diff_grad(
                        |x| {
                            let mut probe = inputs.to_vec();
                            probe[i] = x.clone();
                            Ok(loss(&mut Graph::new(), params, &probe, false)?.0)
                        },
                        &inputs[i],
                        H,
                    )
                } else {
                    finite_diff_grad(
                        |x| {
                            let mut probe = params.clone();
                            *probe.get_mut(name)? = x.clone();
                            Ok(loss(&mut Graph::new(), &probe, inputs, false)?.0)
                        },
                        params.get(name).unwrap(),
                        H,
                    )
                }
                .unwrap()
            })
            .collect();
        let scale = analytic
            .iter()
            .map(|(_, t)| t.max_abs())
            .chain(numeric.iter().map(Tensor::max_abs))
            .fold(0.0, f64::max);
        let floor = FLOOR * scale;
        analytic
            .iter()
            .zip(&numeric)
            .map(|((name, a), n)| {
                let err = a
                    .data()
                    .iter()
                    .zip(n.data())
                    .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
                    .fold(0.0, f64::max);
                (name.clone(), err)
            })
            .collect()
    }
}

fn perturb(params: &mut ParamSet, seed: u64, scale: f64, replace: bool) {
    let mut rng = Rng::new(seed);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            let r = scale * rng.gaussian();
            *v = if replace { r } else { *v + r };
        }
    }
}

pub fn denoiser_case() -> ModelCase {
    let cfg = UNetConfig {
        in_channels: 1,
        base_channels: 2,
        depth: 2,
        time_embed_dim: 4,
        tap_layers: vec![0, 1],
        norm_groups: 1,
    };
    let mut net = UNet::new(cfg, &mut Rng::new(5)).unwrap();
    // Non-zero biases and norm parameters so every path carries gradient.
    perturb(&mut net.params, 6, 0.1, false);
    let s = ScheduleConfig::default().build().unwrap();
    let images = gaussian(&mut Rng::new(7), &[2, 1, 8, 8]).unwrap();
    let cfg = net.cfg.clone();
    ModelCase {
        name: "denoiser training loss",
        params: net.params,
        inputs: vec![images],
        loss: Box::new(move |g, p, x, grads| {
            let net = UNet::from_params(cfg.clone(), p.clone())?;
            let bound = p.bind(g, grads);
            let l = denoise_loss(&net.with_bound(&bound), g, &x[0], &mut Rng::new(8), &s)?;
            let value = g.value(l).item()?;
            let mut out = Vec::new();
            if grads {
                let mut gr = g.backward(l)?;
                out = bound.gradients(g, &mut gr).into_iter().collect();
            }
            Ok((value, out))
        }),
    }
}

fn random_detector(channels: &[usize], hidden: usize, seed: u64) -> ChangeDetector {
    let fdaf = FdafConfig {
        hidden,
        max_flow: 2.0,
        ..FdafConfig::default()
    };
    let head = CdHeadConfig {
        hidden: 4,
        ..CdHeadConfig::default()
    };
    let mut det = ChangeDetector::new(channels, fdaf, head, &mut Rng::new(seed)).unwrap();
    perturb(&mut det.params, seed + 1, 0.4, true);
    det
}

fn mask(n: usize, size: usize) -> Tensor {
    Tensor::from_fn(vec![n, 1, size, size], |i| ((i * 7) % 5 < 2) as u8 as f64).unwrap()
}

pub fn fusion_case() -> ModelCase {
    let det = random_detector(&[3, 2], 4, 10);
    let mut rng = Rng::new(11);
    let inputs = vec![
        gaussian(&mut rng, &[1, 3, 2, 2]).unwrap(),
        gaussian(&mut rng, &[1, 2, 4, 4]).unwrap(),
        gaussian(&mut rng, &[1, 3, 2, 2]).unwrap(),
        gaussian(&mut rng, &[1, 2, 4, 4]).unwrap(),
    ];
    let m = mask(1, 8);
    let template = det.clone();
    ModelCase {
        name: "flow fusion and classifier loss",
        params: det.params,
        inputs,
        loss: Box::new(move |g, p, x, grads| {
            let det = ChangeDetector {
                params: p.clone(),
                ..template.clone()
            };
            let (bf, bh) = det.bind(g, grads);
            let vars: Vec<_> = x.iter().map(|t| g.leaf(t.clone(), grads)).collect();
            let (logits, _) = det.forward(g, &bf, &bh, &vars[..2], &vars[2..], (8, 8))?;
            let l = bce_loss(g, logits, &m, 1.3)?;
            let value = g.value(l).item()?;
            let mut out = Vec::new();
            if grads {
                let mut gr = g.backward(l)?;
                for (k, v) in bf.gradients(g, &mut gr) {
                    out.push((format!("fdaf.{k}"), v));
                }
                for (k, v) in bh.gradients(g, &mut gr) {
                    out.push((format!("head.{k}"), v));
                }
                for (i, &v) in vars.iter().enumerate() {
                    out.push((format!("input.{i}"), gr.get(v).unwrap().clone()));
                }
            }
            Ok((value, out))
        }),
    }
}

/// Denoiser features of both images, flow fusion and classifier under one
/// BCE loss.
pub fn end_to_end_case() -> ModelCase {
    let cfg = UNetConfig {
        in_channels: 1,
        base_channels: 2,
        depth: 2,
        time_embed_dim: 4,
        tap_layers: vec![0, 1],
        norm_groups: 1,
    };
    let mut net = UNet::new(cfg, &mut Rng::new(20)).unwrap();
    perturb(&mut net.params, 21, 0.1, false);
    let mut rng = Rng::new(23);
    let s = ScheduleConfig::default().build().unwrap();
    let steps = [TimestepIndex::new(5, 100).unwrap()];
    // One timestep: level channels are the decoder widths [8, 4].
    let det = random_detector(&[8, 4], 2, 22);
    let mut all = ParamSet::new();
    all.extend_prefixed("unet.", &net.params);
    all.extend_prefixed("cd.", &det.params);

    let img_a = gaussian(&mut rng, &[1, 1, 8, 8]).unwrap();
    let img_b = gaussian(&mut rng, &[1, 1, 8, 8]).unwrap();
    let eps = vec![gaussian(&mut rng, &[1, 1, 8, 8]).unwrap()];
    let m = mask(1, 8);
    let (unet_cfg, det_t) = (net.cfg.clone(), det);
    ModelCase {
        name: "end-to-end change loss",
        params: all,
        inputs: vec![],
        loss: Box::new(move |g, p, _, grads| {
            let net = UNet::from_params(unet_cfg.clone(), p.strip_prefix("unet."))?;
            let det = ChangeDetector {
                params: p.strip_prefix("cd."),
                ..det_t.clone()
            };
            let bn = net.params.bind(g, grads);
            let pa = record_features(&net, g, &bn, &img_a, &steps, &eps, &s)?;
            let pb = record_features(&net, g, &bn, &img_b, &steps, &eps, &s)?;
            let (bf, bh) = det.bind(g, grads);
            let (logits, _) = det.forward(g, &bf, &bh, &pa, &pb, (8, 8))?;
            let l = bce_loss(g, logits, &m, 1.0)?;
            let value = g.value(l).item()?;
            let mut out = Vec::new();
            if grads {
                let mut gr = g.backward(l)?;
                for (k, v) in bn.gradients(g, &mut gr) {
                    out.push((format!("unet.{k}"), v));
                }
                for (k, v) in bf.gradients(g, &mut gr) {
                    out.push((format!("cd.fdaf.{k}"), v));
                }
                for (k, v) in bh.gradients(g, &mut gr) {
                    out.push((format!("cd.head.{k}"), v));
                }
            }
            Ok((value, out))
        }),
    }
}
