//! Change classifier over fused features, its loss, thresholding, and
//! pixel metrics.
//!
//! Head: per level a 3×3 convolution to `hidden` channels and ReLU,
//! nearest-neighbour upsampling to the image resolution, a sum over levels,
//! and a 1×1 convolution to one logit per pixel.

use serde::{Deserialize, Serialize};

use crate::diffusion::FeaturePyramid;
use crate::fdaf::{self, FdafConfig, FusedFeatures};
use crate::numerics::{sigmoid, Bound, Graph, ParamSet, Rng, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdHeadConfig {
    pub hidden: usize,
    /// Decision threshold on the change probability.
    pub tau: f64,
    /// BCE weight of positive (changed) pixels; 1 is plain BCE.
    pub pos_weight: f64,
}

impl Default for CdHeadConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            tau: 0.5,
            pos_weight: 2.0,
        }
    }
}

impl CdHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("classifier hidden width must be positive".into()));
        }
        check_tau(self.tau)?;
        if !(self.pos_weight > 0.0 && self.pos_weight.is_finite()) {
            return Err(Error::Config(format!("pos_weight must be positive, got {}", self.pos_weight)));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold must lie in (0, 1), got {tau}")))
    }
}

/// Head parameters for pyramid levels with `fused_channels[l]` input channels.
pub fn init_head_params(fused_channels: &[usize], hidden: usize, rng: &mut Rng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (l, &c) in fused_channels.iter().enumerate() {
        let std = (2.0 / (c * 9) as f64).sqrt();
        p.insert(
            format!("l{l}.conv.w"),
            Tensor::from_fn(vec![hidden, c, 3, 3], |_| std * rng.gaussian())?,
        );
        p.insert(format!("l{l}.conv.b"), Tensor::zeros(vec![hidden])?);
    }
    let std = (2.0 / hidden as f64).sqrt();
    p.insert("proj.w", Tensor::from_fn(vec![1, hidden, 1, 1], |_| std * rng.gaussian())?);
    p.insert("proj.b", Tensor::zeros(vec![1])?);
    Ok(p)
}

/// Records the head on `g`; returns `[N, 1, H, W]` logits.
pub fn classify_graph(g: &mut Graph, p: &Bound, fused: &[Var], out_hw: (usize, usize)) -> Result<Var> {
    if fused.is_empty() {
        return Err(Error::Contract("classifier needs at least one level".into()));
    }
    let mut acc: Option<Var> = None;
    for (l, &f) in fused.iter().enumerate() {
        let [_, _, h, w] = *g.shape(f) else {
            return Err(Error::Contract(format!("level {l} is not NCHW")));
        };
        if !out_hw.0.is_multiple_of(h) || !out_hw.1.is_multiple_of(w) || out_hw.0 / h != out_hw.1 / w {
            return Err(Error::Contract(format!(
                "level {l} extent {h}x{w} does not divide output {}x{}",
                out_hw.0, out_hw.1
            )));
        }
        let y = g.conv2d(f, p.get(&format!("l{l}.conv.w"))?, p.get(&format!("l{l}.conv.b"))?, 1, 1)?;
        let y = g.relu(y)?;
        let y = g.upsample(y, out_hw.0 / h)?;
        acc = Some(match acc {
            None => y,
            Some(a) => g.add(a, y)?,
        });
    }
    let acc = acc.expect("at least one level");
    g.conv2d(acc, p.get("proj.w")?, p.get("proj.b")?, 1, 0)
}

/// Classifier output for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMap {
    pub logits: Tensor,
    pub probs: Tensor,
    pub mask: Tensor,
}

impl ChangeMap {
    pub fn from_logits(logits: Tensor, tau: f64) -> Result<Self> {
        let probs = logits.map(sigmoid);
        let mask = threshold(&probs, tau)?;
        Ok(Self { logits, probs, mask })
    }
}

/// Classifier over already-fused level tensors.
pub fn classify(fused: &[Tensor], params: &ParamSet, out_hw: (usize, usize), tau: f64) -> Result<ChangeMap> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let vars: Vec<Var> = fused.iter().map(|t| g.constant(t.clone())).collect();
    let logits = classify_graph(&mut g, &bound, &vars, out_hw)?;
    ChangeMap::from_logits(g.value(logits).clone(), tau)
}

/// Mean stable binary cross-entropy of `logits` against a {0, 1} mask.
pub fn bce_loss(g: &mut Graph, logits: Var, mask: &Tensor, pos_weight: f64) -> Result<Var> {
    g.bce_with_logits(logits, mask, pos_weight)
}

/// `1` where `prob ≥ tau`, else `0`.
pub fn threshold(probs: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    Ok(probs.map(|p| if p >= tau { 1.0 } else { 0.0 }))
}

/// Pixel confusion counts and the ratios derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub oa: f64,
    pub tau: f64,
    /// Ratios whose denominator was zero; they are reported as 0.
    pub undefined: Vec<String>,
}

impl MetricsReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, tau: f64) -> Self {
        let mut undefined = Vec::new();
        let mut ratio = |name: &str, num: u64, den: u64| {
            if den == 0 {
                undefined.push(name.to_string());
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio("precision", tp, tp + fp);
        let recall = ratio("recall", tp, tp + fn_);
        let f1 = ratio("f1", 2 * tp, 2 * tp + fp + fn_);
        let iou = ratio("iou", tp, tp + fp + fn_);
        let oa = ratio("oa", tp + tn, tp + fp + fn_ + tn);
        Self {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            iou,
            oa,
            tau,
            undefined,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Sums counts of several reports and recomputes the ratios.
    pub fn pooled(reports: &[MetricsReport], tau: f64) -> Self {
        let sum = |f: fn(&MetricsReport) -> u64| reports.iter().map(f).sum();
        Self::from_counts(sum(|r| r.tp), sum(|r| r.fp), sum(|r| r.fn_), sum(|r| r.tn), tau)
    }
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    match t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Contract(format!("{what} must be binary, found {v}"))),
        None => Ok(()),
    }
}

/// Pixel-wise comparison of binary masks. `tau` is echoed unchanged.
pub fn evaluate(pred: &Tensor, truth: &Tensor) -> Result<MetricsReport> {
    evaluate_at(pred, truth, 0.5)
}

pub fn evaluate_at(pred: &Tensor, truth: &Tensor, tau: f64) -> Result<MetricsReport> {
    pred.expect_same_shape(truth, "evaluate")
        .map_err(|e| Error::Contract(e.to_string()))?;
    check_binary(pred, "prediction")?;
    check_binary(truth, "ground truth")?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn, tau))
}

/// Fused channel count per level for the given pyramid channels.
pub fn fused_channels(pyramid_channels: &[usize]) -> Vec<usize> {
    pyramid_channels.iter().map(|c| 2 * c).collect()
}

/// FDAF heads plus the classifier, with parameters under `fdaf.` and `head.`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeDetector {
    pub fdaf: FdafConfig,
    pub head: CdHeadConfig,
    pub params: ParamSet,
}

impl ChangeDetector {
    /// `pyramid_channels` are the per-level channel counts of one temporal
    /// branch, coarse to fine.
    pub fn new(pyramid_channels: &[usize], fdaf_cfg: FdafConfig, head: CdHeadConfig, rng: &mut Rng) -> Result<Self> {
        fdaf_cfg.validate()?;
        head.validate()?;
        let mut params = ParamSet::new();
        params.extend_prefixed("fdaf.", &fdaf::init_params(pyramid_channels, fdaf_cfg.hidden, rng)?);
        params.extend_prefixed(
            "head.",
            &init_head_params(&fused_channels(pyramid_channels), head.hidden, rng)?,
        );
        Ok(Self {
            fdaf: fdaf_cfg,
            head,
            params,
        })
    }

    /// Records fusion and classification; returns logits and the fused levels.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound_fdaf: &Bound,
        bound_head: &Bound,
        pyr_a: &[Var],
        pyr_b: &[Var],
        out_hw: (usize, usize),
    ) -> Result<(Var, FusedFeatures)> {
        let fused = fdaf::fdaf_fuse_graph(g, pyr_a, pyr_b, bound_fdaf, &self.fdaf)?;
        let logits = classify_graph(g, bound_head, &fused.levels, out_hw)?;
        Ok((logits, fused))
    }

    /// Binds both parameter groups on `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> (Bound, Bound) {
        (
            self.params.strip_prefix("fdaf.").bind(g, trainable),
            self.params.strip_prefix("head.").bind(g, trainable),
        )
    }

    /// Inference on a pair of pyramids.
    pub fn predict(&self, pyr_a: &FeaturePyramid, pyr_b: &FeaturePyramid, out_hw: (usize, usize)) -> Result<ChangeMap> {
        let mut g = Graph::new();
        let (bf, bh) = self.bind(&mut g, false);
        let a: Vec<Var> = pyr_a.levels.iter().map(|t| g.constant(t.clone())).collect();
        let b: Vec<Var> = pyr_b.levels.iter().map(|t| g.constant(t.clone())).collect();
        let (logits, _) = self.forward(&mut g, &bf, &bh, &a, &b, out_hw)?;
        ChangeMap::from_logits(g.value(logits).clone(), self.head.tau)
    }
}
