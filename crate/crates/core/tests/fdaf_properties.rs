use diffcd::diffusion::FeaturePyramid;
use diffcd::fdaf::{bilinear_warp, fdaf_fuse, init_params, AlignMode, FdafConfig, FlowField};
use diffcd::numerics::{gaussian, ParamSet, Rng, Tensor};

/// `out[y][x] = feat[y + dy][x + dx]`, zero outside.
fn shifted(feat: &Tensor, dx: isize, dy: isize) -> Tensor {
    let s = feat.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![0.0; feat.numel()];
    for plane in 0..n * c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (sy, sx) = (y + dy, x + dx);
                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    out[plane * h * w + (y as usize) * w + x as usize] =
                        feat.data()[plane * h * w + (sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

#[test]
fn integer_flows_equal_zero_filled_shifts() {
    let feat = gaussian(&mut Rng::new(11), &[1, 3, 8, 8]).unwrap();
    for dy in -2..=2isize {
        for dx in -2..=2isize {
            let flow = FlowField::constant(1, 8, 8, dx as f64, dy as f64).unwrap();
            let out = bilinear_warp(&feat, &flow).unwrap();
            assert_eq!(out, shifted(&feat, dx, dy), "shift ({dx}, {dy})");
        }
    }
}

#[test]
fn oracle_flow_aligns_translated_pair() {
    let a = gaussian(&mut Rng::new(12), &[1, 2, 8, 8]).unwrap();
    // B shows A's content moved one pixel to the right.
    let b = shifted(&a, -1, 0);
    // Sampling A one pixel to the left reproduces B.
    let a_on_b = bilinear_warp(&a, &FlowField::constant(1, 8, 8, -1.0, 0.0).unwrap()).unwrap();
    let diff = a_on_b.zip_map(&b, |x, y| (x - y).abs()).unwrap();
    for c in 0..2 {
        for y in 0..8 {
            for x in 1..8 {
                assert_eq!(diff.data()[c * 64 + y * 8 + x], 0.0);
            }
        }
    }
}

fn random_params(channels: &[usize], seed: u64) -> ParamSet {
    let mut p = init_params(channels, 8, &mut Rng::new(seed)).unwrap();
    let mut rng = Rng::new(seed ^ 0x5555);
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v = 0.3 * rng.gaussian();
        }
    }
    p
}

fn random_pyramid(rng: &mut Rng) -> FeaturePyramid {
    FeaturePyramid {
        levels: vec![
            gaussian(rng, &[2, 4, 4, 4]).unwrap(),
            gaussian(rng, &[2, 2, 8, 8]).unwrap(),
        ],
        timesteps: vec![5, 50],
    }
}

#[test]
fn identical_pyramids_fuse_to_zero_in_every_mode() {
    for seed in 0..10 {
        let pyr = random_pyramid(&mut Rng::new(200 + seed));
        let params = random_params(&[4, 2], seed);
        for mode in [AlignMode::Dual, AlignMode::Off] {
            let cfg = FdafConfig {
                mode,
                ..FdafConfig::default()
            };
            let (fused, got) = fdaf_fuse(&pyr, &pyr, &params, &cfg).unwrap();
            assert_eq!(got, mode);
            for level in &fused {
                assert!(level.data().iter().all(|&v| v == 0.0), "seed {seed} {mode:?}");
            }
        }
    }
}

#[test]
fn swapping_inputs_swaps_concatenation_halves() {
    for seed in 0..10 {
        let mut rng = Rng::new(300 + seed);
        let a = random_pyramid(&mut rng);
        let b = random_pyramid(&mut rng);
        let params = random_params(&[4, 2], seed);
        for mode in [AlignMode::Dual, AlignMode::Off] {
            let cfg = FdafConfig {
                mode,
                ..FdafConfig::default()
            };
            let (ab, _) = fdaf_fuse(&a, &b, &params, &cfg).unwrap();
            let (ba, _) = fdaf_fuse(&b, &a, &params, &cfg).unwrap();
            for (x, y) in ab.iter().zip(&ba) {
                let s = x.shape();
                let half = s[1] / 2 * s[2] * s[3];
                for n in 0..s[0] {
                    let base = n * 2 * half;
                    let (x0, x1) = x.data()[base..base + 2 * half].split_at(half);
                    let (y0, y1) = y.data()[base..base + 2 * half].split_at(half);
                    assert_eq!(x0, y1);
                    assert_eq!(x1, y0);
                }
            }
        }
    }
}

#[test]
fn fused_channel_count_is_twice_the_input() {
    let mut rng = Rng::new(1);
    let a = random_pyramid(&mut rng);
    let b = random_pyramid(&mut rng);
    let (fused, _) = fdaf_fuse(&a, &b, &random_params(&[4, 2], 3), &FdafConfig::default()).unwrap();
    assert_eq!(fused.len(), 2);
    assert_eq!(fused[0].shape(), &[2, 8, 4, 4]);
    assert_eq!(fused[1].shape(), &[2, 4, 8, 8]);
}

#[test]
fn fresh_parameters_match_off_mode() {
    let mut rng = Rng::new(2);
    let a = random_pyramid(&mut rng);
    let b = random_pyramid(&mut rng);
    let p = init_params(&[4, 2], 8, &mut Rng::new(9)).unwrap();
    let (dual, _) = fdaf_fuse(&a, &b, &p, &FdafConfig::default()).unwrap();
    let off_cfg = FdafConfig {
        mode: AlignMode::Off,
        ..FdafConfig::default()
    };
    let (off, _) = fdaf_fuse(&a, &b, &p, &off_cfg).unwrap();
    assert_eq!(dual, off);
}
