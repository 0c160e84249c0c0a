//! Training loops for the denoiser and the change detector, and split-level
//! feature extraction and evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cdnet::{bce_loss, evaluate_at, threshold, ChangeDetector, ChangeMap, MetricsReport};
use crate::denoiser::UNet;
use crate::diffusion::{
    denoise_loss, extract_features_with, record_features, FeaturePyramid, NoiseSchedule, TimestepIndex,
};
use crate::numerics::{gaussian, Adam, AdamConfig, Graph, Rng, Tensor, Var};
use crate::synthdata::SamplePair;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            lr: 2e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the flow heads.
    pub flow_lr_scale: f64,
    pub seed: u64,
}

impl Default for CdTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch: 8,
            lr: 3e-3,
            flow_lr_scale: 1.0,
            seed: 0,
        }
    }
}

fn check_batch(batch: usize, lr: f64) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    Ok(())
}

fn finite_loss(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Trains `net` on `images` (`[N, C, H, W]`) with the noise-prediction loss.
/// Each step draws `batch` images uniformly with replacement. Returns the
/// loss of every step; `on_step` sees `(step, loss)` as training runs.
pub fn train_denoiser(
    net: &mut UNet,
    images: &Tensor,
    s: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    check_batch(cfg.batch, cfg.lr)?;
    let n = images.shape().first().copied().unwrap_or(0);
    if images.rank() != 4 || n == 0 {
        return Err(Error::Contract(format!(
            "training images must be [N, C, H, W], got {:?}",
            images.shape()
        )));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<Tensor> = (0..cfg.batch)
            .map(|_| images.slice_outer(rng.below(n), 1))
            .collect::<Result<_>>()?;
        let batch = Tensor::stack_outer(&picks.iter().collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let bound = net.params.bind(&mut g, true);
        let loss = denoise_loss(&net.with_bound(&bound), &mut g, &batch, &mut rng, s)?;
        let value = finite_loss(g.value(loss).item()?, "denoiser loss")?;
        let mut grads = g.backward(loss)?;
        let grads = bound.gradients(&g, &mut grads);
        adam.step(&mut net.params, &grads)?;
        losses.push(value);
        on_step(step, value);
    }
    Ok(losses)
}

/// Fixed noise probe used for feature extraction: one tensor per timestep,
/// shared by every image, so features are a deterministic function of the
/// image and identical images give identical features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProbe {
    pub timesteps: Vec<TimestepIndex>,
    /// `[1, C, H, W]` per timestep.
    pub eps: Vec<Tensor>,
}

impl FeatureProbe {
    pub fn new(timesteps: &[TimestepIndex], image_shape: &[usize], seed: u64) -> Result<Self> {
        let root = Rng::new(seed);
        let eps = timesteps
            .iter()
            .map(|k| gaussian(&mut root.fork(k.get() as u64), image_shape))
            .collect::<Result<_>>()?;
        Ok(Self {
            timesteps: timesteps.to_vec(),
            eps,
        })
    }

    /// Probe noise repeated over a batch of `n`.
    pub fn batched(&self, n: usize) -> Result<Vec<Tensor>> {
        self.eps
            .iter()
            .map(|e| Tensor::stack_outer(&vec![e; n]))
            .collect()
    }
}

/// Features of a `[N, C, H, W]` batch under the probe noise.
pub fn probe_features(net: &UNet, images: &Tensor, probe: &FeatureProbe, s: &NoiseSchedule) -> Result<FeaturePyramid> {
    let n = images.shape()[0];
    extract_features_with(net, images, &probe.timesteps, &probe.batched(n)?, s)
}

/// Images, masks, and (when the backbone is frozen) precomputed features of
/// one data split.
#[derive(Clone, Debug)]
pub struct CdSplit {
    /// `[N, 1, H, W]`.
    pub img_a: Tensor,
    pub img_b: Tensor,
    pub masks: Tensor,
    pub feat_a: FeaturePyramid,
    pub feat_b: FeaturePyramid,
}

impl CdSplit {
    /// Stacks `pairs` and extracts their features in chunks of `chunk`.
    pub fn build(pairs: &[SamplePair], net: &UNet, probe: &FeatureProbe, s: &NoiseSchedule, chunk: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("empty split".into()));
        }
        let stack = |f: fn(&SamplePair) -> &Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = pairs.iter().map(|p| f(p).clone().reshape(prepend_one(f(p).shape()))).collect::<Result<_>>()?;
            Tensor::stack_outer(&parts.iter().collect::<Vec<_>>())
        };
        let img_a = stack(|p| &p.img_a)?;
        let img_b = stack(|p| &p.img_b)?;
        let masks = stack(|p| &p.mask)?;
        let feat_a = chunked_features(net, &img_a, probe, s, chunk)?;
        let feat_b = chunked_features(net, &img_b, probe, s, chunk)?;
        Ok(Self {
            img_a,
            img_b,
            masks,
            feat_a,
            feat_b,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn out_hw(&self) -> (usize, usize) {
        let s = self.masks.shape();
        (s[2], s[3])
    }

    fn gather(&self, idx: &[usize]) -> Result<(FeaturePyramid, FeaturePyramid, Tensor, Tensor, Tensor)> {
        let pick_pyr = |p: &FeaturePyramid| -> Result<FeaturePyramid> {
            let parts = idx.iter().map(|&i| p.select(i)).collect::<Result<Vec<_>>>()?;
            FeaturePyramid::stack(&parts.iter().collect::<Vec<_>>())
        };
        let pick = |t: &Tensor| -> Result<Tensor> {
            let parts = idx.iter().map(|&i| t.slice_outer(i, 1)).collect::<Result<Vec<_>>>()?;
            Tensor::stack_outer(&parts.iter().collect::<Vec<_>>())
        };
        Ok((
            pick_pyr(&self.feat_a)?,
            pick_pyr(&self.feat_b)?,
            pick(&self.masks)?,
            pick(&self.img_a)?,
            pick(&self.img_b)?,
        ))
    }
}

fn prepend_one(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

fn chunked_features(net: &UNet, images: &Tensor, probe: &FeatureProbe, s: &NoiseSchedule, chunk: usize) -> Result<FeaturePyramid> {
    let n = images.shape()[0];
    let chunk = chunk.max(1);
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.min(n - start);
        parts.push(probe_features(net, &images.slice_outer(start, len)?, probe, s)?);
        start += len;
    }
    FeaturePyramid::stack(&parts.iter().collect::<Vec<_>>())
}

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val: Option<MetricsReport>,
}

/// Trains the FDAF heads and classifier of `det` with BCE on `train`.
///
/// With `backbone = Some(..)` the denoiser is fine-tuned jointly and
/// features are recomputed each step; otherwise the precomputed features of
/// the split are used. Each epoch visits every sample once in a seeded
/// random order and, when `val` is given, reports its pooled metrics.
#[allow(clippy::too_many_arguments)]
pub fn train_change_detector(
    det: &mut ChangeDetector,
    mut backbone: Option<(&mut UNet, &FeatureProbe, &NoiseSchedule)>,
    train: &CdSplit,
    val: Option<&CdSplit>,
    cfg: &CdTrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Vec<EpochReport>> {
    check_batch(cfg.batch, cfg.lr)?;
    check_batch(cfg.batch, cfg.lr * cfg.flow_lr_scale)?;
    let mut rng = Rng::new(cfg.seed);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = Adam::new(adam_cfg);
    let mut adam_flow = Adam::new(AdamConfig::with_lr(cfg.lr * cfg.flow_lr_scale));
    let mut adam_net = Adam::new(adam_cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch) {
            let (fa, fb, mask, ia, ib) = train.gather(idx)?;
            let mut g = Graph::new();
            let (bf, bh) = det.bind(&mut g, true);
            let (pa, pb, bound_net) = match backbone.as_mut() {
                Some((net, probe, s)) => {
                    let bn = net.params.bind(&mut g, true);
                    let eps = probe.batched(idx.len())?;
                    let pa = record_features(net, &mut g, &bn, &ia, &probe.timesteps, &eps, s)?;
                    let pb = record_features(net, &mut g, &bn, &ib, &probe.timesteps, &eps, s)?;
                    (pa, pb, Some(bn))
                }
                None => {
                    let pa: Vec<Var> = fa.levels.into_iter().map(|t| g.constant(t)).collect();
                    let pb: Vec<Var> = fb.levels.into_iter().map(|t| g.constant(t)).collect();
                    (pa, pb, None)
                }
            };
            let (logits, _) = det.forward(&mut g, &bf, &bh, &pa, &pb, train.out_hw())?;
            let loss = bce_loss(&mut g, logits, &mask, det.head.pos_weight)?;
            let value = finite_loss(g.value(loss).item()?, "change loss")?;
            total += value * idx.len() as f64;
            let mut grads = g.backward(loss)?;
            let prefixed = |p: &str, m: BTreeMap<String, Tensor>| -> BTreeMap<String, Tensor> {
                m.into_iter().map(|(k, v)| (format!("{p}{k}"), v)).collect()
            };
            adam_flow.step(&mut det.params, &prefixed("fdaf.", bf.gradients(&g, &mut grads)))?;
            adam.step(&mut det.params, &prefixed("head.", bh.gradients(&g, &mut grads)))?;
            if let (Some((net, _, _)), Some(bn)) = (backbone.as_mut(), bound_net) {
                let g_net = bn.gradients(&g, &mut grads);
                adam_net.step(&mut net.params, &g_net)?;
            }
        }
        let val_report = match (val, backbone.as_ref()) {
            (Some(v), None) => Some(evaluate_split(det, v, cfg.batch)?.0),
            (Some(v), Some((net, probe, s))) => {
                // Features depend on the updated backbone.
                let fresh = CdSplit {
                    feat_a: chunked_features(net, &v.img_a, probe, s, cfg.batch)?,
                    feat_b: chunked_features(net, &v.img_b, probe, s, cfg.batch)?,
                    ..v.clone()
                };
                Some(evaluate_split(det, &fresh, cfg.batch)?.0)
            }
            (None, _) => None,
        };
        let report = EpochReport {
            epoch,
            mean_loss: total / train.len() as f64,
            val: val_report,
        };
        on_epoch(&report);
        reports.push(report);
    }
    Ok(reports)
}

/// Change maps of every sample of `split`, in order, each `[1, 1, H, W]`.
pub fn predict_split(det: &ChangeDetector, split: &CdSplit, chunk: usize) -> Result<Vec<ChangeMap>> {
    let n = split.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let idx: Vec<usize> = (start..start + len).collect();
        let (fa, fb, _, _, _) = split.gather(&idx)?;
        let cm = det.predict(&fa, &fb, split.out_hw())?;
        for i in 0..len {
            let logits = cm.logits.slice_outer(i, 1)?;
            out.push(ChangeMap::from_logits(logits, det.head.tau)?);
        }
        start += len;
    }
    Ok(out)
}

/// Pooled metrics over the split at the detector's threshold, plus the
/// per-sample reports in order.
pub fn evaluate_split(det: &ChangeDetector, split: &CdSplit, chunk: usize) -> Result<(MetricsReport, Vec<MetricsReport>)> {
    let maps = predict_split(det, split, chunk)?;
    let per: Vec<MetricsReport> = maps
        .iter()
        .enumerate()
        .map(|(i, m)| evaluate_at(&m.mask, &split.masks.slice_outer(i, 1)?, det.head.tau))
        .collect::<Result<_>>()?;
    Ok((MetricsReport::pooled(&per, det.head.tau), per))
}

/// Pooled F1 for each threshold of `taus` over precomputed maps.
pub fn f1_by_threshold(maps: &[ChangeMap], truth: &[Tensor], taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    taus.iter()
        .map(|&tau| {
            let per = maps
                .iter()
                .zip(truth)
                .map(|(m, t)| evaluate_at(&threshold(&m.probs, tau)?, t, tau))
                .collect::<Result<Vec<_>>>()?;
            Ok((tau, MetricsReport::pooled(&per, tau).f1))
        })
        .collect()
}
