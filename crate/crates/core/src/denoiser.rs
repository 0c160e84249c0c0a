//! The noise-prediction network: a small time-conditioned U-Net whose
//! decoder activations double as change-detection features.
//!
//! Layout for `depth = d` (channels `c_i = base · 2^i`):
//!
//! ```text
//! inc     conv3x3 in→c0, GN, ReLU                         (skip 0, full res)
//! down_i  conv3x3/2 c_{i-1}→c_i, GN, +t, ReLU,
//!         conv3x3 c_i→c_i, GN, ReLU                       (skip i), i = 1..d
//! mid     conv3x3 c_d→c_d, GN, +t, ReLU                   decoder stage 0
//! up_j    nearest x2, conv3x3 c_{l+1}→c_l, concat skip l,
//!         conv3x3 2c_l→c_l, GN, +t, ReLU                  decoder stage j, l = d-j
//! out     conv3x3 c0→in (plain, no activation)
//! ```
//!
//! Decoder stages `0..d` run from coarsest (`H / 2^d`) to `H / 2`; the last
//! up block at full resolution only feeds the output convolution and is not
//! a tap. `+t` adds a per-stage linear projection of the shared time MLP.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, TimestepIndex};
use crate::numerics::{Bound, Graph, ParamSet, Rng, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    /// Decoder stage indices exported as features, `0 = coarsest`.
    pub tap_layers: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 8,
            depth: 2,
            time_embed_dim: 32,
            tap_layers: vec![0, 1],
            norm_groups: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("unet depth must be at least 1".into()));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("unet channel counts must be positive".into()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and positive, got {}",
                self.time_embed_dim
            )));
        }
        if self.norm_groups == 0 || !self.base_channels.is_multiple_of(self.norm_groups) {
            return Err(Error::Config(format!(
                "norm_groups {} must divide base_channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        for (i, &t) in self.tap_layers.iter().enumerate() {
            if t >= self.depth {
                return Err(Error::Config(format!(
                    "tap layer {t} is not a decoder stage (0..{})",
                    self.depth
                )));
            }
            if self.tap_layers[..i].contains(&t) {
                return Err(Error::Config(format!("tap layer {t} listed twice")));
            }
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channel count of decoder stage `stage`.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.channels(self.depth - stage)
    }

    /// Downsampling factor of decoder stage `stage` relative to the input.
    pub fn stage_stride(&self, stage: usize) -> usize {
        1 << (self.depth - stage)
    }

    /// Taps in coarse-to-fine order.
    pub fn sorted_taps(&self) -> Vec<usize> {
        let mut t = self.tap_layers.clone();
        t.sort_unstable();
        t
    }

    /// Checks an `[N, C, H, W]` input shape against the configuration.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::Contract(format!("unet input must be NCHW, got {shape:?}")));
        };
        let m = 1 << self.depth;
        if c != self.in_channels || h % m != 0 || w % m != 0 {
            return Err(Error::Contract(format!(
                "unet input {shape:?}: expected {} channels and extents divisible by {m}",
                self.in_channels
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of `k`: entry `2i` is `sin(k / 10000^(2i/dim))`,
/// entry `2i + 1` the matching cosine.
pub fn time_embedding(k: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!("embedding dimension must be even, got {dim}")));
    }
    let mut data = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let arg = k as f64 * freq;
        data[2 * i] = arg.sin();
        data[2 * i + 1] = arg.cos();
    }
    Tensor::new(vec![dim], data)
}

fn he_normal(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| std * rng.gaussian())
}

fn add_conv(p: &mut ParamSet, rng: &mut Rng, name: &str, c_out: usize, c_in: usize, k: usize) -> Result<()> {
    p.insert(format!("{name}.w"), he_normal(rng, vec![c_out, c_in, k, k], c_in * k * k)?);
    p.insert(format!("{name}.b"), Tensor::zeros(vec![c_out])?);
    Ok(())
}

fn add_norm(p: &mut ParamSet, name: &str, c: usize) -> Result<()> {
    p.insert(format!("{name}.g"), Tensor::full(vec![c], 1.0)?);
    p.insert(format!("{name}.b"), Tensor::zeros(vec![c])?);
    Ok(())
}

fn add_linear(p: &mut ParamSet, rng: &mut Rng, name: &str, d_in: usize, d_out: usize) -> Result<()> {
    p.insert(format!("{name}.w"), he_normal(rng, vec![d_in, d_out], d_in)?);
    p.insert(format!("{name}.b"), Tensor::zeros(vec![d_out])?);
    Ok(())
}

/// He-normal weights (`std = sqrt(2 / fan_in)`), zero biases, unit
/// normalization gains. Parameters are drawn in a fixed order.
pub fn init_params(cfg: &UNetConfig, rng: &mut Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let d = cfg.time_embed_dim;
    add_linear(&mut p, rng, "time.fc", d, d)?;
    add_conv(&mut p, rng, "inc.conv", cfg.channels(0), cfg.in_channels, 3)?;
    add_norm(&mut p, "inc.gn", cfg.channels(0))?;
    for i in 1..=cfg.depth {
        let (c_prev, c) = (cfg.channels(i - 1), cfg.channels(i));
        add_conv(&mut p, rng, &format!("down{i}.conv"), c, c_prev, 3)?;
        add_norm(&mut p, &format!("down{i}.gn"), c)?;
        add_linear(&mut p, rng, &format!("down{i}.time"), d, c)?;
        add_conv(&mut p, rng, &format!("down{i}.conv2"), c, c, 3)?;
        add_norm(&mut p, &format!("down{i}.gn2"), c)?;
    }
    let cd = cfg.channels(cfg.depth);
    add_conv(&mut p, rng, "mid.conv", cd, cd, 3)?;
    add_norm(&mut p, "mid.gn", cd)?;
    add_linear(&mut p, rng, "mid.time", d, cd)?;
    for j in 1..=cfg.depth {
        let l = cfg.depth - j;
        let c = cfg.channels(l);
        add_conv(&mut p, rng, &format!("up{j}.conv"), c, cfg.channels(l + 1), 3)?;
        add_conv(&mut p, rng, &format!("up{j}.merge"), c, 2 * c, 3)?;
        add_norm(&mut p, &format!("up{j}.gn"), c)?;
        add_linear(&mut p, rng, &format!("up{j}.time"), d, c)?;
    }
    add_conv(&mut p, rng, "out.conv", cfg.in_channels, cfg.channels(0), 3)?;
    Ok(p)
}

/// Result of one forward pass.
pub struct UNetOutput {
    /// Predicted noise, same shape as the input.
    pub eps: Var,
    /// `(decoder stage, activation)` for every configured tap, coarse to fine.
    pub taps: Vec<(usize, Var)>,
}

/// A configured network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub params: ParamSet,
}

impl UNet {
    pub fn new(cfg: UNetConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&cfg, rng)?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: UNetConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let expected = init_params(&cfg, &mut Rng::new(0))?;
        for (name, t) in expected.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        Ok(Self { cfg, params })
    }

    /// Records the forward pass on `g` using already-bound parameters.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, steps: &[TimestepIndex]) -> Result<UNetOutput> {
        let cfg = &self.cfg;
        cfg.check_input(g.shape(x))?;
        let n = g.shape(x)[0];
        if steps.len() != n {
            return Err(Error::Contract(format!(
                "{} timesteps for a batch of {n}",
                steps.len()
            )));
        }
        let d = cfg.time_embed_dim;
        let mut emb = Vec::with_capacity(n * d);
        for k in steps {
            emb.extend_from_slice(time_embedding(k.get(), d)?.data());
        }
        let emb = g.constant(Tensor::new(vec![n, d], emb)?);
        let t = linear(g, p, "time.fc", emb)?;
        let t = g.relu(t)?;

        let groups = cfg.norm_groups;
        let mut skips = Vec::with_capacity(cfg.depth);
        let h = conv(g, p, "inc.conv", x, 1)?;
        let h = norm(g, p, "inc.gn", h, groups)?;
        let mut h = g.relu(h)?;
        for i in 1..=cfg.depth {
            skips.push(h);
            let y = conv(g, p, &format!("down{i}.conv"), h, 2)?;
            let y = norm(g, p, &format!("down{i}.gn"), y, groups)?;
            let y = add_time(g, p, &format!("down{i}.time"), y, t)?;
            let y = g.relu(y)?;
            let y = conv(g, p, &format!("down{i}.conv2"), y, 1)?;
            let y = norm(g, p, &format!("down{i}.gn2"), y, groups)?;
            h = g.relu(y)?;
        }

        let mut taps = Vec::new();
        let y = conv(g, p, "mid.conv", h, 1)?;
        let y = norm(g, p, "mid.gn", y, groups)?;
        let y = add_time(g, p, "mid.time", y, t)?;
        h = g.relu(y)?;
        if cfg.tap_layers.contains(&0) {
            taps.push((0, h));
        }
        for j in 1..=cfg.depth {
            let y = g.upsample(h, 2)?;
            let y = conv(g, p, &format!("up{j}.conv"), y, 1)?;
            let skip = skips[cfg.depth - j];
            let y = g.concat(&[y, skip])?;
            let y = conv(g, p, &format!("up{j}.merge"), y, 1)?;
            let y = norm(g, p, &format!("up{j}.gn"), y, groups)?;
            let y = add_time(g, p, &format!("up{j}.time"), y, t)?;
            h = g.relu(y)?;
            if j < cfg.depth && cfg.tap_layers.contains(&j) {
                taps.push((j, h));
            }
        }
        let eps = conv(g, p, "out.conv", h, 1)?;
        Ok(UNetOutput { eps, taps })
    }

    /// View that records against parameters already bound on the graph,
    /// so gradients flow into them.
    pub fn with_bound<'a>(&'a self, bound: &'a Bound) -> BoundUNet<'a> {
        BoundUNet { net: self, bound }
    }
}

fn conv(g: &mut Graph, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, b, stride, k / 2)
}

fn norm(g: &mut Graph, p: &Bound, name: &str, x: Var, groups: usize) -> Result<Var> {
    let gamma = p.get(&format!("{name}.g"))?;
    let beta = p.get(&format!("{name}.b"))?;
    g.group_norm(x, gamma, beta, groups)
}

fn linear(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, p.get(&format!("{name}.w"))?)?;
    g.add_row(y, p.get(&format!("{name}.b"))?)
}

fn add_time(g: &mut Graph, p: &Bound, name: &str, x: Var, t: Var) -> Result<Var> {
    let proj = linear(g, p, name, t)?;
    g.add_channels(x, proj)
}

impl Denoiser for UNet {
    fn predict(&self, g: &mut Graph, noisy: Var, steps: &[TimestepIndex]) -> Result<Var> {
        let bound = self.params.bind(g, false);
        Ok(self.forward(g, &bound, noisy, steps)?.eps)
    }
}

/// A [`UNet`] whose parameters live on a specific graph.
pub struct BoundUNet<'a> {
    net: &'a UNet,
    bound: &'a Bound,
}

impl Denoiser for BoundUNet<'_> {
    fn predict(&self, g: &mut Graph, noisy: Var, steps: &[TimestepIndex]) -> Result<Var> {
        Ok(self.net.forward(g, self.bound, noisy, steps)?.eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(k: usize, n: usize) -> Vec<TimestepIndex> {
        vec![TimestepIndex::new(k, 100).unwrap(); n]
    }

    #[test]
    fn embedding_at_zero_is_sin_zero_cos_one() {
        let e = time_embedding(0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e.data()[2 * i], 0.0);
            assert_eq!(e.data()[2 * i + 1], 1.0);
        }
    }

    #[test]
    fn embedding_dim_two_at_one() {
        let e = time_embedding(1, 2).unwrap();
        assert!((e.data()[0] - 0.841471).abs() < 1e-6);
        assert!((e.data()[1] - 0.540302).abs() < 1e-6);
    }

    #[test]
    fn odd_embedding_dim_is_config_error() {
        assert!(matches!(time_embedding(3, 5), Err(Error::Config(_))));
    }

    #[test]
    fn embeddings_are_pairwise_distinct() {
        let all: Vec<Tensor> = (1..=100).map(|k| time_embedding(k, 16).unwrap()).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let dist: f64 = all[i]
                    .data()
                    .iter()
                    .zip(all[j].data())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(dist > 1e-6, "k={} and k={} collide", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn default_shapes_and_taps() {
        let net = UNet::new(UNetConfig::default(), &mut Rng::new(1)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(vec![1, 1, 32, 32]).unwrap());
        let bound = net.params.bind(&mut g, false);
        let out = net.forward(&mut g, &bound, x, &ts(5, 1)).unwrap();
        assert_eq!(g.shape(out.eps), &[1, 1, 32, 32]);
        let shapes: Vec<_> = out.taps.iter().map(|&(s, v)| (s, g.shape(v).to_vec())).collect();
        assert_eq!(shapes, vec![(0, vec![1, 32, 8, 8]), (1, vec![1, 16, 16, 16])]);
    }

    #[test]
    fn zero_parameters_predict_zero_noise() {
        let mut net = UNet::new(UNetConfig::default(), &mut Rng::new(1)).unwrap();
        net.params = net.params.zeroed();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![2, 1, 16, 16], 0.3).unwrap());
        let eps = net.predict(&mut g, x, &ts(7, 2)).unwrap();
        assert!(g.value(eps).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = UNetConfig::default();
        let a = init_params(&cfg, &mut Rng::new(9)).unwrap();
        let b = init_params(&cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.iter() {
            if name.ends_with(".b") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn he_variance_on_large_layers() {
        let p = init_params(&UNetConfig::default(), &mut Rng::new(4)).unwrap();
        let mut checked = 0;
        for (name, t) in p.iter() {
            if !name.ends_with(".w") || t.numel() < 256 {
                continue;
            }
            let fan_in: usize = t.shape()[1..].iter().product::<usize>().max(1);
            let fan_in = if t.rank() == 2 { t.shape()[0] } else { fan_in };
            let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
            let expected = 2.0 / fan_in as f64;
            assert!((var / expected - 1.0).abs() < 0.2, "{name}: {var} vs {expected}");
            checked += 1;
        }
        assert!(checked >= 8);
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let bad = UNetConfig {
            tap_layers: vec![2],
            ..UNetConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let cfg = UNetConfig::default();
        assert!(cfg.check_input(&[1, 1, 30, 32]).is_err());
        assert!(cfg.check_input(&[1, 2, 32, 32]).is_err());
    }
}
