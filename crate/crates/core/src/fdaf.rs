//! Flow dual-alignment fusion.
//!
//! For every pyramid level a small convolutional head looks at both
//! temporal feature maps and predicts two displacement fields:
//!
//! * `flow_ab`: where each pixel of A's frame lands in B's frame; warping B
//!   by it gives `B̃`, B resampled onto A.
//! * `flow_ba`: the reverse displacement; warping A by it gives `Ã`.
//!
//! The fused feature is `concat(|Ã − B|, |A − B̃|)`. With alignment off the
//! fused feature is `concat(|A − B|, |A − B|)`, so the classifier input
//! width is identical in both arms.
//!
//! The head `r(X, Y)` emits four channels for `concat(X, Y)`. It is
//! evaluated for both input orders and combined as
//!
//! ```text
//! s(A, B) = ½ (r(A, B)[0..2] + r(B, A)[2..4])
//! flow_ab = max_flow · tanh(½ (s(A, B) − s(B, A)))
//! flow_ba = −flow_ab
//! ```
//!
//! so swapping the inputs swaps the flows, and identical inputs give zero
//! flow (hence all-zero fused features).

use serde::{Deserialize, Serialize};

use crate::diffusion::FeaturePyramid;
use crate::numerics::{Bound, Graph, ParamSet, Rng, Tensor, Var};
use crate::{Error, Result};

pub const HEAD_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Flow estimation, warping both ways, dual differences.
    Dual,
    /// Plain absolute differences, duplicated.
    Off,
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" | "on" => Ok(AlignMode::Dual),
            "off" => Ok(AlignMode::Off),
            other => Err(Error::Config(format!("unknown alignment mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdafConfig {
    pub mode: AlignMode,
    /// Flow bound in pixels at the finest level; coarser levels scale it by
    /// their resolution ratio.
    pub max_flow: f64,
    /// Width of the two hidden layers of each flow head.
    pub hidden: usize,
}

impl Default for FdafConfig {
    fn default() -> Self {
        Self {
            mode: AlignMode::Dual,
            max_flow: 8.0,
            hidden: HEAD_HIDDEN,
        }
    }
}

impl FdafConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_flow > 0.0 && self.max_flow.is_finite()) {
            return Err(Error::Config(format!("max_flow must be positive, got {}", self.max_flow)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("flow head width must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel `(dx, dy)` displacements, `[N, 2, H, W]`, channel 0 = dx.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        match t.shape() {
            [_, 2, _, _] => {}
            s => return Err(Error::Shape(format!("flow field must be [N, 2, H, W], got {s:?}"))),
        }
        t.ensure_finite("flow field")?;
        Ok(Self(t))
    }

    /// Same displacement everywhere.
    pub fn constant(n: usize, h: usize, w: usize, dx: f64, dy: f64) -> Result<Self> {
        let hw = h * w;
        Self::new(Tensor::from_fn(vec![n, 2, h, w], |i| {
            if (i / hw).is_multiple_of(2) {
                dx
            } else {
                dy
            }
        })?)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Per-pixel Euclidean magnitude, `[N, 1, H, W]`.
    pub fn magnitude(&self) -> Tensor {
        let s = self.0.shape();
        let hw = s[2] * s[3];
        let d = self.0.data();
        Tensor::from_fn(vec![s[0], 1, s[2], s[3]], |i| {
            let (n, p) = (i / hw, i % hw);
            let dx = d[n * 2 * hw + p];
            let dy = d[n * 2 * hw + hw + p];
            (dx * dx + dy * dy).sqrt()
        })
        .expect("non-empty flow")
    }
}

/// Backward warp: `out(c, y, x)` samples `feat(c, ·, ·)` bilinearly at
/// `(y + dy, x + dx)`. Samples outside the grid read zero.
pub fn bilinear_warp(feat: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let mut g = Graph::new();
    let f = g.constant(feat.clone());
    let fl = g.constant(flow.0.clone());
    let out = g.warp(f, fl).map_err(|e| match e {
        Error::Shape(m) => Error::Contract(m),
        other => other,
    })?;
    Ok(g.value(out).clone())
}

/// Parameters for one flow head per level; the last layer starts at zero so
/// untrained heads predict zero flow.
pub fn init_params(level_channels: &[usize], hidden: usize, rng: &mut Rng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (l, &c) in level_channels.iter().enumerate() {
        let layers = [(hidden, 2 * c), (hidden, hidden)];
        for (i, (c_out, c_in)) in layers.into_iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            p.insert(
                format!("l{l}.conv{}.w", i + 1),
                Tensor::from_fn(vec![c_out, c_in, 3, 3], |_| std * rng.gaussian())?,
            );
            p.insert(format!("l{l}.conv{}.b", i + 1), Tensor::zeros(vec![c_out])?);
        }
        p.insert(format!("l{l}.conv3.w"), Tensor::zeros(vec![4, hidden, 3, 3])?);
        p.insert(format!("l{l}.conv3.b"), Tensor::zeros(vec![4])?);
    }
    Ok(p)
}

fn head(g: &mut Graph, p: &Bound, level: usize, x: Var, y: Var) -> Result<Var> {
    let mut h = g.concat(&[x, y])?;
    for i in 1..=3 {
        let w = p.get(&format!("l{level}.conv{i}.w"))?;
        let b = p.get(&format!("l{level}.conv{i}.b"))?;
        h = g.conv2d(h, w, b, 1, 1)?;
        if i < 3 {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Records flow estimation for one level; returns `(flow_ab, flow_ba)`.
pub fn estimate_flows_graph(
    g: &mut Graph,
    p: &Bound,
    level: usize,
    a: Var,
    b: Var,
    max_flow: f64,
) -> Result<(Var, Var)> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Contract(format!(
            "feature shapes differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let r_ab = head(g, p, level, a, b)?;
    let r_ba = head(g, p, level, b, a)?;
    let ab_fwd = g.slice_channels(r_ab, 0, 2)?;
    let ab_rev = g.slice_channels(r_ab, 2, 2)?;
    let ba_fwd = g.slice_channels(r_ba, 0, 2)?;
    let ba_rev = g.slice_channels(r_ba, 2, 2)?;
    // 4 · ½(s(A,B) − s(B,A))
    let plus = g.add(ab_fwd, ba_rev)?;
    let minus = g.add(ba_fwd, ab_rev)?;
    let d = g.sub(plus, minus)?;
    let d = g.mul_scalar(d, 0.25)?;
    let t = g.tanh(d)?;
    let flow_ab = g.mul_scalar(t, max_flow)?;
    let flow_ba = g.mul_scalar(flow_ab, -1.0)?;
    Ok((flow_ab, flow_ba))
}

/// Flow estimation for one level of concrete feature maps.
pub fn estimate_flows(
    feat_a: &Tensor,
    feat_b: &Tensor,
    params: &ParamSet,
    level: usize,
    max_flow: f64,
) -> Result<(FlowField, FlowField)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let a = g.constant(feat_a.clone());
    let b = g.constant(feat_b.clone());
    let (ab, ba) = estimate_flows_graph(&mut g, &bound, level, a, b, max_flow)?;
    Ok((FlowField::new(g.value(ab).clone())?, FlowField::new(g.value(ba).clone())?))
}

/// `concat(|warp(A, flow_ba) − B|, |A − warp(B, flow_ab)|)`.
pub fn fuse_with_flows(g: &mut Graph, a: Var, b: Var, flow_ab: Var, flow_ba: Var) -> Result<Var> {
    let a_on_b = g.warp(a, flow_ba)?;
    let b_on_a = g.warp(b, flow_ab)?;
    let d1 = g.sub(a_on_b, b)?;
    let d1 = g.abs(d1)?;
    let d2 = g.sub(a, b_on_a)?;
    let d2 = g.abs(d2)?;
    g.concat(&[d1, d2])
}

/// Fused features of every level, recorded on a graph.
pub struct FusedFeatures {
    pub levels: Vec<Var>,
    /// `(flow_ab, flow_ba)` per level in dual mode.
    pub flows: Vec<(Var, Var)>,
    pub mode: AlignMode,
}

/// Flow bound for each level: `max_flow` at the finest resolution, scaled
/// down with the level's resolution.
pub fn level_max_flows(extents: &[usize], max_flow: f64) -> Vec<f64> {
    let finest = extents.iter().copied().max().unwrap_or(1) as f64;
    extents.iter().map(|&h| max_flow * h as f64 / finest).collect()
}

pub fn fdaf_fuse_graph(
    g: &mut Graph,
    pyr_a: &[Var],
    pyr_b: &[Var],
    p: &Bound,
    cfg: &FdafConfig,
) -> Result<FusedFeatures> {
    if pyr_a.len() != pyr_b.len() || pyr_a.is_empty() {
        return Err(Error::Contract(format!(
            "pyramids have {} and {} levels",
            pyr_a.len(),
            pyr_b.len()
        )));
    }
    for (&a, &b) in pyr_a.iter().zip(pyr_b) {
        if g.shape(a) != g.shape(b) || g.shape(a).len() != 4 {
            return Err(Error::Contract(format!(
                "incompatible pyramid levels {:?} and {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
    }
    let extents: Vec<usize> = pyr_a.iter().map(|&a| g.shape(a)[2]).collect();
    let bounds = level_max_flows(&extents, cfg.max_flow);
    let mut levels = Vec::with_capacity(pyr_a.len());
    let mut flows = Vec::new();
    for (l, (&a, &b)) in pyr_a.iter().zip(pyr_b).enumerate() {
        let fused = match cfg.mode {
            AlignMode::Off => {
                let d = g.sub(a, b)?;
                let d = g.abs(d)?;
                g.concat(&[d, d])?
            }
            AlignMode::Dual => {
                let (ab, ba) = estimate_flows_graph(g, p, l, a, b, bounds[l])?;
                flows.push((ab, ba));
                fuse_with_flows(g, a, b, ab, ba)?
            }
        };
        levels.push(fused);
    }
    Ok(FusedFeatures {
        levels,
        flows,
        mode: cfg.mode,
    })
}

/// Tensor-level fusion of two pyramids.
pub fn fdaf_fuse(
    pyr_a: &FeaturePyramid,
    pyr_b: &FeaturePyramid,
    params: &ParamSet,
    cfg: &FdafConfig,
) -> Result<(Vec<Tensor>, AlignMode)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let a: Vec<Var> = pyr_a.levels.iter().map(|t| g.constant(t.clone())).collect();
    let b: Vec<Var> = pyr_b.levels.iter().map(|t| g.constant(t.clone())).collect();
    let fused = fdaf_fuse_graph(&mut g, &a, &b, &bound, cfg)?;
    Ok((
        fused.levels.iter().map(|&v| g.value(v).clone()).collect(),
        fused.mode,
    ))
}
