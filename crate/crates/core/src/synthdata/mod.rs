//! Deterministic synthetic bi-temporal scenes.
//!
//! A scene is a smooth brightness gradient with anti-aliased rectangles and
//! disks on top. Time B copies time A, then some objects are added, removed
//! or moved. The change mask covers the pixel-centre footprints of every
//! changed object (old and new position) and is fixed before any nuisance
//! (misregistration, brightness shift, noise) touches the images.

mod dataset;
pub mod pgm;

pub use dataset::{read_dataset, write_dataset, DatasetManifest, SampleEntry, MANIFEST};

use serde::{Deserialize, Serialize};

use crate::fdaf::{bilinear_warp, FlowField};
use crate::numerics::{Rng, Tensor};
use crate::{Error, Result};

/// Subsamples per pixel axis used for anti-aliasing.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub size: usize,
    pub channels: usize,
    /// Inclusive range of objects present in the base scene.
    pub n_objects: [usize; 2],
    pub change_rate: f64,
    pub illum_delta: f64,
    pub noise_sigma: f64,
    pub misreg_max: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            size: 32,
            channels: 1,
            n_objects: [2, 4],
            change_rate: 0.3,
            illum_delta: 0.1,
            noise_sigma: 0.03,
            misreg_max: 0.5,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::Config(format!("scene size {} is below 8", self.size)));
        }
        if self.channels != 1 {
            return Err(Error::Config(format!(
                "only single-channel scenes are generated, got {} channels",
                self.channels
            )));
        }
        if self.n_objects[0] > self.n_objects[1] {
            return Err(Error::Config(format!("empty object range {:?}", self.n_objects)));
        }
        if !(0.0..=1.0).contains(&self.change_rate) {
            return Err(Error::Config(format!("change_rate {} outside [0, 1]", self.change_rate)));
        }
        for (name, v) in [
            ("illum_delta", self.illum_delta),
            ("noise_sigma", self.noise_sigma),
            ("misreg_max", self.misreg_max),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Scene extent must survive `depth` halvings of the denoiser.
    pub fn check_depth(&self, depth: usize) -> Result<()> {
        if !self.size.is_multiple_of(1 << depth) {
            return Err(Error::Config(format!(
                "scene size {} is not divisible by 2^{depth}",
                self.size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned rectangle given by centre and half extents.
    Rect { cx: f64, cy: f64, hw: f64, hh: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Point containment; boundary points count as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { cx, cy, hw, hh } => (x - cx).abs() <= hw && (y - cy).abs() <= hh,
            Shape::Disk { cx, cy, r } => {
                let (dx, dy) = (x - cx, y - cy);
                dx * dx + dy * dy <= r * r
            }
        }
    }

    pub fn centre(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { cx, cy, .. } | Shape::Disk { cx, cy, .. } => (cx, cy),
        }
    }

    pub fn moved_to(&self, x: f64, y: f64) -> Shape {
        match *self {
            Shape::Rect { hw, hh, .. } => Shape::Rect { cx: x, cy: y, hw, hh },
            Shape::Disk { r, .. } => Shape::Disk { cx: x, cy: y, r },
        }
    }

    fn half_extents(&self) -> (f64, f64) {
        match *self {
            Shape::Rect { hw, hh, .. } => (hw, hh),
            Shape::Disk { r, .. } => (r, r),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Change {
    None,
    /// Absent at time A, present at time B.
    Add,
    /// Present at time A, absent at time B.
    Remove,
    Move { cx: f64, cy: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub intensity: f64,
    pub change: Change,
}

impl SceneObject {
    pub fn at_a(&self) -> Option<Shape> {
        match self.change {
            Change::Add => None,
            _ => Some(self.shape),
        }
    }

    pub fn at_b(&self) -> Option<Shape> {
        match self.change {
            Change::Remove => None,
            Change::Move { cx, cy } => Some(self.shape.moved_to(cx, cy)),
            _ => Some(self.shape),
        }
    }
}

/// Background `level + gx·(x/size − ½) + gy·(y/size − ½)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub level: f64,
    pub gx: f64,
    pub gy: f64,
}

impl Background {
    fn at(&self, x: f64, y: f64, size: f64) -> f64 {
        self.level + self.gx * (x / size - 0.5) + self.gy * (y / size - 0.5)
    }
}

/// Semantic content of a pair, before nuisance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePlan {
    pub background: Background,
    pub objects: Vec<SceneObject>,
}

/// Nuisance actually applied to a pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nuisance {
    /// Brightness offset added to B.
    pub brightness: f64,
    /// B is resampled at `(x + shift[0], y + shift[1])`.
    pub shift: [f64; 2],
    pub noise_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub index: u64,
    pub nuisance: Nuisance,
    pub plan: ScenePlan,
}

/// One bi-temporal sample. Images and mask are `[1, size, size]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub img_a: Tensor,
    pub img_b: Tensor,
    pub mask: Tensor,
    pub meta: SampleMeta,
}

/// Renders one time of a plan on a `canvas`² grid whose pixel `pad` sits at
/// scene coordinate 0.
fn render(plan: &ScenePlan, shapes: &[(Shape, f64)], size: usize, canvas: usize, pad: usize) -> Vec<f64> {
    let mut out = vec![0.0; canvas * canvas];
    let sub = SUPERSAMPLE as f64;
    for i in 0..canvas {
        for j in 0..canvas {
            let x0 = j as f64 - pad as f64;
            let y0 = i as f64 - pad as f64;
            let mut v = plan.background.at(x0 + 0.5, y0 + 0.5, size as f64);
            for &(shape, intensity) in shapes {
                let mut hits = 0;
                for si in 0..SUPERSAMPLE {
                    for sj in 0..SUPERSAMPLE {
                        let x = x0 + (sj as f64 + 0.5) / sub;
                        let y = y0 + (si as f64 + 0.5) / sub;
                        if shape.contains(x, y) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    let c = hits as f64 / (sub * sub);
                    v = v * (1.0 - c) + intensity * c;
                }
            }
            out[i * canvas + j] = v;
        }
    }
    out
}

/// Pixels whose centre lies inside `shape`.
pub fn footprint(shape: &Shape, size: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            out[i * size + j] = shape.contains(j as f64 + 0.5, i as f64 + 0.5);
        }
    }
    out
}

/// Union of old and new footprints of every changed object.
pub fn change_mask(plan: &ScenePlan, size: usize) -> Tensor {
    let mut mask = vec![0.0; size * size];
    for obj in plan.objects.iter().filter(|o| o.change != Change::None) {
        for shape in [obj.at_a(), obj.at_b()].into_iter().flatten() {
            for (m, inside) in mask.iter_mut().zip(footprint(&shape, size)) {
                if inside {
                    *m = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![1, size, size], mask).expect("mask extent")
}

fn random_centre(rng: &mut Rng, size: f64, half: (f64, f64)) -> (f64, f64) {
    let x = rng.uniform_range(half.0 + 1.0, size - half.0 - 1.0);
    let y = rng.uniform_range(half.1 + 1.0, size - half.1 - 1.0);
    (x, y)
}

/// Draws the semantic content of a sample.
pub fn plan_scene(cfg: &SceneConfig, rng: &mut Rng) -> ScenePlan {
    let size = cfg.size as f64;
    let scale = size / 32.0;
    let background = Background {
        level: rng.uniform_range(-0.7, -0.3),
        gx: rng.uniform_range(-0.3, 0.3),
        gy: rng.uniform_range(-0.3, 0.3),
    };
    let count = cfg.n_objects[0] + rng.below(cfg.n_objects[1] - cfg.n_objects[0] + 1);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let proto = if rng.bernoulli(0.5) {
            Shape::Rect {
                cx: 0.0,
                cy: 0.0,
                hw: scale * rng.uniform_range(4.0, 8.0),
                hh: scale * rng.uniform_range(4.0, 8.0),
            }
        } else {
            Shape::Disk {
                cx: 0.0,
                cy: 0.0,
                r: scale * rng.uniform_range(4.0, 7.5),
            }
        };
        let half = proto.half_extents();
        let (cx, cy) = random_centre(rng, size, half);
        let shape = proto.moved_to(cx, cy);
        let intensity = rng.uniform_range(0.2, 0.9);
        let change = if rng.bernoulli(cfg.change_rate) {
            match rng.below(3) {
                0 => Change::Add,
                1 => Change::Remove,
                _ => {
                    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
                    let dist = scale * rng.uniform_range(3.0, 7.0);
                    let clampx = |v: f64| v.clamp(half.0 + 1.0, size - half.0 - 1.0);
                    let clampy = |v: f64| v.clamp(half.1 + 1.0, size - half.1 - 1.0);
                    Change::Move {
                        cx: clampx(cx + dist * angle.cos()),
                        cy: clampy(cy + dist * angle.sin()),
                    }
                }
            }
        } else {
            Change::None
        };
        objects.push(SceneObject {
            shape,
            intensity,
            change,
        });
    }
    ScenePlan { background, objects }
}

/// Renders a plan and applies nuisance drawn from `rng`.
pub fn realize(cfg: &SceneConfig, plan: &ScenePlan, index: u64, rng: &mut Rng) -> Result<SamplePair> {
    cfg.validate()?;
    let size = cfg.size;
    let shapes_a: Vec<(Shape, f64)> = plan
        .objects
        .iter()
        .filter_map(|o| o.at_a().map(|s| (s, o.intensity)))
        .collect();
    let shapes_b: Vec<(Shape, f64)> = plan
        .objects
        .iter()
        .filter_map(|o| o.at_b().map(|s| (s, o.intensity)))
        .collect();
    let mask = change_mask(plan, size);

    let nuisance = Nuisance {
        brightness: rng.uniform_range(-cfg.illum_delta, cfg.illum_delta),
        shift: [
            rng.uniform_range(-cfg.misreg_max, cfg.misreg_max),
            rng.uniform_range(-cfg.misreg_max, cfg.misreg_max),
        ],
        noise_sigma: cfg.noise_sigma,
    };

    let mut a = render(plan, &shapes_a, size, size, 0);
    let mut b = if cfg.misreg_max > 0.0 {
        // Render with a margin so the shifted crop never samples outside the scene.
        let pad = cfg.misreg_max.ceil() as usize + 1;
        let canvas = size + 2 * pad;
        let wide = Tensor::new(vec![1, 1, canvas, canvas], render(plan, &shapes_b, size, canvas, pad))?;
        let flow = FlowField::constant(1, canvas, canvas, nuisance.shift[0], nuisance.shift[1])?;
        let shifted = bilinear_warp(&wide, &flow)?;
        let mut crop = Vec::with_capacity(size * size);
        for i in 0..size {
            let row = (i + pad) * canvas + pad;
            crop.extend_from_slice(&shifted.data()[row..row + size]);
        }
        crop
    } else {
        render(plan, &shapes_b, size, size, 0)
    };
    if cfg.illum_delta > 0.0 {
        b.iter_mut().for_each(|v| *v += nuisance.brightness);
    }
    if cfg.noise_sigma > 0.0 {
        for v in a.iter_mut().chain(b.iter_mut()) {
            *v += cfg.noise_sigma * rng.gaussian();
        }
    }
    for v in a.iter_mut().chain(b.iter_mut()) {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(SamplePair {
        img_a: Tensor::new(vec![1, size, size], a)?,
        img_b: Tensor::new(vec![1, size, size], b)?,
        mask,
        meta: SampleMeta {
            index,
            nuisance,
            plan: plan.clone(),
        },
    })
}

/// Sample `index` of the dataset defined by `cfg`; a pure function of both.
pub fn generate_pair(cfg: &SceneConfig, index: u64) -> Result<SamplePair> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed).fork(index);
    let plan = plan_scene(cfg, &mut rng);
    realize(cfg, &plan, index, &mut rng)
}

/// Samples `first..first + count`.
pub fn generate_range(cfg: &SceneConfig, first: u64, count: usize) -> Result<Vec<SamplePair>> {
    (first..first + count as u64).map(|i| generate_pair(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SceneConfig {
        SceneConfig {
            change_rate: 0.0,
            illum_delta: 0.0,
            noise_sigma: 0.0,
            misreg_max: 0.0,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn no_op_generator_is_bit_exact() {
        for index in 0..20 {
            let p = generate_pair(&quiet(), index).unwrap();
            let same = p
                .img_a
                .data()
                .iter()
                .zip(p.img_b.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "sample {index}");
            assert!(p.mask.data().iter().all(|&m| m == 0.0));
        }
    }

    #[test]
    fn pure_nuisance_pair_has_empty_mask() {
        let cfg = SceneConfig {
            change_rate: 0.0,
            misreg_max: 2.0,
            ..SceneConfig::default()
        };
        for index in 0..20 {
            let p = generate_pair(&cfg, index).unwrap();
            assert!(p.mask.data().iter().all(|&m| m == 0.0));
            let diff = p.img_a.zip_map(&p.img_b, |a, b| (a - b).abs()).unwrap().mean();
            assert!(diff > 0.0, "sample {index}");
        }
    }

    #[test]
    fn same_seed_and_index_repeat() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_pair(&cfg, 7).unwrap(), generate_pair(&cfg, 7).unwrap());
        assert_ne!(generate_pair(&cfg, 7).unwrap().img_a, generate_pair(&cfg, 8).unwrap().img_a);
    }

    #[test]
    fn images_stay_in_range() {
        let cfg = SceneConfig {
            noise_sigma: 0.5,
            illum_delta: 0.5,
            misreg_max: 2.0,
            ..SceneConfig::default()
        };
        for index in 0..10 {
            let p = generate_pair(&cfg, index).unwrap();
            for t in [&p.img_a, &p.img_b] {
                assert_eq!(t.shape(), &[1, 32, 32]);
                assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn changes_appear_in_mask() {
        let cfg = SceneConfig {
            change_rate: 1.0,
            ..SceneConfig::default()
        };
        let p = generate_pair(&cfg, 3).unwrap();
        assert!(p.mask.sum() > 0.0);
    }

    #[test]
    fn zero_shift_crop_matches_direct_render() {
        let plan = plan_scene(&SceneConfig::default(), &mut Rng::new(5));
        let shapes: Vec<(Shape, f64)> = plan.objects.iter().map(|o| (o.shape, o.intensity)).collect();
        let direct = render(&plan, &shapes, 16, 16, 0);
        let wide = render(&plan, &shapes, 16, 20, 2);
        for i in 0..16 {
            assert_eq!(&direct[i * 16..(i + 1) * 16], &wide[(i + 2) * 20 + 2..(i + 2) * 20 + 18]);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            SceneConfig { change_rate: 1.5, ..SceneConfig::default() },
            SceneConfig { misreg_max: -1.0, ..SceneConfig::default() },
            SceneConfig { n_objects: [4, 2], ..SceneConfig::default() },
            SceneConfig { size: 4, ..SceneConfig::default() },
            SceneConfig { channels: 3, ..SceneConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(generate_pair(&cfg, 0), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(SceneConfig::default().check_depth(2).is_ok());
        assert!(SceneConfig { size: 36, ..SceneConfig::default() }.check_depth(3).is_err());
    }
}
