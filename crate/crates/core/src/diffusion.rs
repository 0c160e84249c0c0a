//! Noise schedule, forward noising, the noise-prediction objective, ancestral
//! sampling, and multi-timestep feature extraction.
//!
//! Symbols: `β_k` is the per-step variance, `α_k = 1 − β_k`,
//! `ᾱ_k = ∏_{j≤k} α_j`, and `σ_k = √β_k`. The forward process noises a clean
//! image as `u_k = √ᾱ_k · u_0 + √(1 − ᾱ_k) · ε`, and one reverse step is
//!
//! ```text
//! u_{k-1} = (u_k − (1 − α_k) / √(1 − ᾱ_k) · M(u_k, k)) / √α_k + σ_k · q
//! ```
//!
//! with `q ~ N(0, I)` for `k > 1` and `q = 0` on the last step.

use serde::{Deserialize, Serialize};

use crate::denoiser::UNet;
use crate::numerics::{gaussian, Bound, Graph, Rng, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Per-timestep constants, indexed by `k = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// A timestep `k` with `1 ≤ k ≤ T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimestepIndex(usize);

impl TimestepIndex {
    pub fn new(k: usize, steps: usize) -> Result<Self> {
        if k == 0 || k > steps {
            return Err(Error::Contract(format!("timestep {k} outside 1..={steps}")));
        }
        Ok(Self(k))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

/// Linearly spaced `β` from `beta_start` to `beta_end` inclusive.
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    let sigma = beta.iter().map(|b| b.sqrt()).collect();
    Ok(NoiseSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn timestep(&self, k: usize) -> Result<TimestepIndex> {
        TimestepIndex::new(k, self.steps())
    }

    fn idx(&self, k: TimestepIndex) -> Result<usize> {
        if k.0 > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {} outside 1..={}",
                k.0,
                self.steps()
            )));
        }
        Ok(k.0 - 1)
    }

    pub fn beta(&self, k: TimestepIndex) -> Result<f64> {
        Ok(self.beta[self.idx(k)?])
    }

    pub fn alpha(&self, k: TimestepIndex) -> Result<f64> {
        Ok(self.alpha[self.idx(k)?])
    }

    pub fn alpha_bar(&self, k: TimestepIndex) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(k)?])
    }

    pub fn sigma(&self, k: TimestepIndex) -> Result<f64> {
        Ok(self.sigma[self.idx(k)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }
}

/// Anything that predicts the injected noise from a noisy batch.
pub trait Denoiser {
    /// `noisy` is `[N, ...]`; `steps` holds one timestep per batch element.
    fn predict(&self, g: &mut Graph, noisy: Var, steps: &[TimestepIndex]) -> Result<Var>;
}

/// `√ᾱ_k · u0 + √(1 − ᾱ_k) · eps`, element-wise.
pub fn forward_diffuse(u0: &Tensor, k: TimestepIndex, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    u0.expect_same_shape(eps, "forward_diffuse")
        .map_err(|e| Error::Contract(e.to_string()))?;
    let ab = s.alpha_bar(k)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    u0.zip_map(eps, |x, e| a * x + b * e)
}

/// Monte Carlo estimate of `E ‖M(u_k, k) − ε‖²` per pixel, recorded on `g`.
///
/// One `k` per batch element is drawn first (uniform on `1..=T`), then a
/// single Gaussian tensor for the whole batch.
pub fn denoise_loss(
    model: &impl Denoiser,
    g: &mut Graph,
    u0_batch: &Tensor,
    rng: &mut Rng,
    s: &NoiseSchedule,
) -> Result<Var> {
    let n = match u0_batch.shape().first() {
        Some(&n) if u0_batch.rank() >= 2 => n,
        _ => {
            return Err(Error::Contract(format!(
                "denoise_loss needs a batch, got shape {:?}",
                u0_batch.shape()
            )))
        }
    };
    let steps: Vec<TimestepIndex> = (0..n)
        .map(|_| TimestepIndex(1 + rng.below(s.steps())))
        .collect();
    let eps = gaussian(rng, u0_batch.shape())?;
    let per = u0_batch.numel() / n;
    let mut noisy = Vec::with_capacity(u0_batch.numel());
    for (i, &k) in steps.iter().enumerate() {
        let ab = s.alpha_bar(k)?;
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let span = i * per..(i + 1) * per;
        noisy.extend(
            u0_batch.data()[span.clone()]
                .iter()
                .zip(&eps.data()[span])
                .map(|(x, e)| a * x + b * e),
        );
    }
    let noisy = g.constant(Tensor::new(u0_batch.shape().to_vec(), noisy)?);
    let pred = model.predict(g, noisy, &steps)?;
    let target = g.constant(eps);
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// One ancestral step from `u_k` to `u_{k-1}`.
pub fn reverse_step(
    model: &impl Denoiser,
    u_k: &Tensor,
    k: TimestepIndex,
    q: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    s.idx(k)?;
    u_k.expect_same_shape(q, "reverse_step noise")
        .map_err(|e| Error::Contract(e.to_string()))?;
    if k.0 == 1 && q.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Contract("no noise may be injected at k = 1".into()));
    }
    let n = u_k.shape().first().copied().unwrap_or(1);
    let mut g = Graph::new();
    let x = g.constant(u_k.clone());
    let pred = model.predict(&mut g, x, &vec![k; n])?;
    let pred = g.value(pred);
    u_k.expect_same_shape(pred, "denoiser output")?;
    let (alpha, ab, sigma) = (s.alpha(k)?, s.alpha_bar(k)?, s.sigma(k)?);
    let coef = (1.0 - alpha) / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    let data = u_k
        .data()
        .iter()
        .zip(pred.data())
        .zip(q.data())
        .map(|((&u, &m), &z)| inv * (u - coef * m) + sigma * z)
        .collect();
    let out = Tensor::new(u_k.shape().to_vec(), data)?;
    out.ensure_finite("reverse_step")?;
    Ok(out)
}

/// Ancestral sampling from pure noise; the result is clamped to `[-1, 1]`
/// only after the final step.
pub fn sample(model: &impl Denoiser, shape: &[usize], rng: &mut Rng, s: &NoiseSchedule) -> Result<Tensor> {
    let mut u = gaussian(rng, shape)?;
    for k in (1..=s.steps()).rev() {
        let q = if k > 1 {
            gaussian(rng, shape)?
        } else {
            Tensor::zeros(shape.to_vec())?
        };
        u = reverse_step(model, &u, TimestepIndex(k), &q, s)?;
    }
    Ok(u.map(|v| v.clamp(-1.0, 1.0)))
}

/// Decoder activations of the denoiser at one or more noise levels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    /// `[N, C, h, w]` tensors ordered coarse to fine.
    pub levels: Vec<Tensor>,
    pub timesteps: Vec<usize>,
}

impl FeaturePyramid {
    /// Spatial extents `(h, w)` of each level.
    pub fn extents(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|t| (t.shape()[2], t.shape()[3]))
            .collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.shape()[1]).collect()
    }

    /// Batch element `i` as its own pyramid.
    pub fn select(&self, i: usize) -> Result<FeaturePyramid> {
        Ok(FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|t| t.slice_outer(i, 1))
                .collect::<Result<_>>()?,
            timesteps: self.timesteps.clone(),
        })
    }

    /// Concatenates pyramids along the batch axis.
    pub fn stack(parts: &[&FeaturePyramid]) -> Result<FeaturePyramid> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("stack of zero pyramids".into()))?;
        let levels = (0..first.levels.len())
            .map(|l| {
                let ts: Vec<&Tensor> = parts.iter().map(|p| &p.levels[l]).collect();
                Tensor::stack_outer(&ts)
            })
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid {
            levels,
            timesteps: first.timesteps.clone(),
        })
    }
}

/// Noises `image` at each requested timestep (fresh `ε` per timestep, drawn
/// in order) and collects the configured decoder taps. Levels concatenate
/// the per-timestep activations along the channel axis.
pub fn extract_features(
    model: &UNet,
    image: &Tensor,
    timesteps: &[TimestepIndex],
    rng: &mut Rng,
    s: &NoiseSchedule,
) -> Result<FeaturePyramid> {
    let eps = timesteps
        .iter()
        .map(|_| gaussian(rng, image.shape()))
        .collect::<Result<Vec<_>>>()?;
    extract_features_with(model, image, timesteps, &eps, s)
}

/// [`extract_features`] with caller-supplied noise, one tensor per timestep
/// shaped like `image`.
pub fn extract_features_with(
    model: &UNet,
    image: &Tensor,
    timesteps: &[TimestepIndex],
    eps: &[Tensor],
    s: &NoiseSchedule,
) -> Result<FeaturePyramid> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let levels = record_features(model, &mut g, &bound, image, timesteps, eps, s)?;
    Ok(FeaturePyramid {
        levels: levels.iter().map(|&v| g.value(v).clone()).collect(),
        timesteps: timesteps.iter().map(|k| k.0).collect(),
    })
}

/// Records feature extraction on `g` so that gradients can reach the
/// denoiser parameters in `p`. Returns one var per tap level, coarse first.
pub fn record_features(
    model: &UNet,
    g: &mut Graph,
    p: &Bound,
    image: &Tensor,
    timesteps: &[TimestepIndex],
    eps: &[Tensor],
    s: &NoiseSchedule,
) -> Result<Vec<Var>> {
    if timesteps.is_empty() {
        return Err(Error::Contract("feature extraction needs at least one timestep".into()));
    }
    if eps.len() != timesteps.len() {
        return Err(Error::Contract(format!(
            "{} noise tensors for {} timesteps",
            eps.len(),
            timesteps.len()
        )));
    }
    if model.cfg.tap_layers.is_empty() {
        return Err(Error::Config("denoiser has no tap layers".into()));
    }
    let n = image.shape().first().copied().unwrap_or(1);
    let mut per_level: Vec<Vec<Var>> = vec![Vec::new(); model.cfg.tap_layers.len()];
    for (&k, e) in timesteps.iter().zip(eps) {
        let noisy = forward_diffuse(image, k, e, s)?;
        let x = g.constant(noisy);
        let out = model.forward(g, p, x, &vec![k; n])?;
        for (slot, &(_, v)) in per_level.iter_mut().zip(&out.taps) {
            slot.push(v);
        }
    }
    per_level
        .into_iter()
        .map(|parts| if parts.len() == 1 { Ok(parts[0]) } else { g.concat(&parts) })
        .collect()
}

/// Channel-axis concatenation of `[N, C_i, h, w]` tensors.
pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = parts.iter().map(|t| g.constant(t.clone())).collect();
    let out = g.concat(&vars)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetConfig;

    struct Fixed(Tensor);

    impl Denoiser for Fixed {
        fn predict(&self, g: &mut Graph, _: Var, _: &[TimestepIndex]) -> Result<Var> {
            Ok(g.constant(self.0.clone()))
        }
    }

    #[test]
    fn two_step_schedule_by_hand() {
        let s = make_linear_schedule(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alphas()[0] - 0.9).abs() < 1e-15);
        assert!((s.alphas()[1] - 0.8).abs() < 1e-15);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bars()[1] - 0.72).abs() < 1e-15);
        assert_eq!(s.sigmas(), &[0.1f64.sqrt(), 0.2f64.sqrt()]);
    }

    #[test]
    fn single_step_schedule() {
        let s = make_linear_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.steps(), 1);
        assert!((s.alpha_bars()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_bounds_are_enforced() {
        assert!(matches!(make_linear_schedule(10, 0.1, 1.0), Err(Error::Config(_))));
        assert!(matches!(make_linear_schedule(0, 0.1, 0.2), Err(Error::Config(_))));
        assert!(matches!(make_linear_schedule(10, 0.2, 0.1), Err(Error::Config(_))));
        assert!(matches!(make_linear_schedule(10, 0.0, 0.1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_noise_scales_the_image() {
        let s = ScheduleConfig::default().build().unwrap();
        let k = s.timestep(30).unwrap();
        let u0 = Tensor::new(vec![3], vec![0.5, -1.0, 0.25]).unwrap();
        let out = forward_diffuse(&u0, k, &u0.zeros_like(), &s).unwrap();
        let a = s.alpha_bar(k).unwrap().sqrt();
        assert_eq!(out, u0.map(|v| a * v));
    }

    #[test]
    fn forward_diffuse_by_hand() {
        // ᾱ = 0.25 at k = 1 of a one-step schedule with β = 0.75.
        let s = make_linear_schedule(1, 0.75, 0.75).unwrap();
        let u0 = Tensor::new(vec![1], vec![1.0]).unwrap();
        let eps = Tensor::new(vec![1], vec![2.0]).unwrap();
        let out = forward_diffuse(&u0, s.timestep(1).unwrap(), &eps, &s).unwrap();
        assert!((out.data()[0] - 2.23205081).abs() < 1e-8);
    }

    #[test]
    fn forward_diffuse_shape_mismatch() {
        let s = ScheduleConfig::default().build().unwrap();
        let u0 = Tensor::zeros(vec![2]).unwrap();
        let eps = Tensor::zeros(vec![3]).unwrap();
        assert!(matches!(
            forward_diffuse(&u0, s.timestep(1).unwrap(), &eps, &s),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reverse_step_by_hand() {
        // α = 0.64 and ᾱ = 0.36: step 2 of a schedule with α₁ = 0.5625.
        let s = NoiseSchedule {
            beta: vec![0.4375, 0.36],
            alpha: vec![0.5625, 0.64],
            alpha_bar: vec![0.5625, 0.36],
            sigma: vec![0.4375f64.sqrt(), 0.6],
        };
        let u = Tensor::new(vec![1], vec![2.0]).unwrap();
        let model = Fixed(Tensor::new(vec![1], vec![1.0]).unwrap());
        let out = reverse_step(&model, &u, TimestepIndex(2), &u.zeros_like(), &s).unwrap();
        assert!((out.data()[0] - 1.9375).abs() < 1e-12);
    }

    #[test]
    fn reverse_step_zero_model_zero_noise() {
        let s = ScheduleConfig::default().build().unwrap();
        let k = s.timestep(40).unwrap();
        let u = Tensor::new(vec![2], vec![1.0, -3.0]).unwrap();
        let out = reverse_step(&Fixed(u.zeros_like()), &u, k, &u.zeros_like(), &s).unwrap();
        let a = s.alpha(k).unwrap().sqrt();
        for (o, v) in out.data().iter().zip(u.data()) {
            assert!((o - v / a).abs() < 1e-14);
        }
    }

    #[test]
    fn reverse_step_rejects_noise_on_last_step_and_bad_k() {
        let s = ScheduleConfig::default().build().unwrap();
        let u = Tensor::zeros(vec![2]).unwrap();
        let q = Tensor::full(vec![2], 0.1).unwrap();
        let model = Fixed(u.clone());
        assert!(reverse_step(&model, &u, TimestepIndex(1), &q, &s).is_err());
        assert!(reverse_step(&model, &u, TimestepIndex(101), &u, &s).is_err());
        assert!(TimestepIndex::new(0, 100).is_err());
    }

    #[test]
    fn denoise_loss_rejects_empty_batch() {
        let s = ScheduleConfig::default().build().unwrap();
        let mut g = Graph::new();
        let model = Fixed(Tensor::scalar(0.0));
        let scalar = Tensor::scalar(0.0);
        assert!(denoise_loss(&model, &mut g, &scalar, &mut Rng::new(0), &s).is_err());
    }

    #[test]
    fn feature_levels_and_repeated_timesteps() {
        let net = UNet::new(UNetConfig::default(), &mut Rng::new(3)).unwrap();
        let s = ScheduleConfig::default().build().unwrap();
        let img = Tensor::zeros(vec![1, 1, 32, 32]).unwrap();
        let one = extract_features(&net, &img, &[s.timestep(5).unwrap()], &mut Rng::new(1), &s).unwrap();
        assert_eq!(one.extents(), vec![(8, 8), (16, 16)]);
        assert_eq!(one.channels(), vec![32, 16]);
        let k = s.timestep(50).unwrap();
        let two = extract_features(&net, &img, &[k, k], &mut Rng::new(1), &s).unwrap();
        assert_eq!(two.channels(), vec![64, 32]);
        let again = extract_features(&net, &img, &[k, k], &mut Rng::new(1), &s).unwrap();
        assert_eq!(two, again);
        assert!(extract_features(&net, &img, &[], &mut Rng::new(1), &s).is_err());
    }
}
