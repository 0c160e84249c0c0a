use diffcd::cdnet::{evaluate, MetricsReport};
use diffcd::denoiser::{UNet, UNetConfig};
use diffcd::diffusion::{make_linear_schedule, sample};
use diffcd::numerics::{Graph, Rng, Tensor};
use diffcd::synthdata::{generate_range, SceneConfig};
use diffcd::training::{train_denoiser, DiffusionTrainConfig};

fn random_mask(rng: &mut Rng, n: usize, p: f64) -> Tensor {
    Tensor::from_fn(vec![1, n, n], |_| if rng.bernoulli(p) { 1.0 } else { 0.0 }).unwrap()
}

#[test]
fn f1_and_iou_agree_and_pooling_sums_counts() {
    let mut rng = Rng::new(3);
    let mut reports = Vec::new();
    for i in 0..200 {
        let n = 1 + i % 9;
        let pred = random_mask(&mut rng, n, 0.4);
        let truth = random_mask(&mut rng, n, 0.3);
        let r = evaluate(&pred, &truth).unwrap();
        assert_eq!(r.total(), (n * n) as u64);
        if r.tp > 0 {
            assert!((r.f1 - 2.0 * r.iou / (1.0 + r.iou)).abs() < 1e-12);
            assert!(r.f1 >= r.iou);
        }
        reports.push(r);
    }
    let pooled = MetricsReport::pooled(&reports, 0.5);
    assert_eq!(pooled.tp, reports.iter().map(|r| r.tp).sum::<u64>());
    assert_eq!(pooled.total(), reports.iter().map(|r| r.total()).sum::<u64>());
}

#[test]
fn bce_stays_finite_for_extreme_logits() {
    let logits = [-1e4, -745.0, -30.0, 0.0, 30.0, 745.0, 1e4];
    for &target in &[0.0, 1.0] {
        let mut g = Graph::new();
        let z = g.param(Tensor::new(vec![1, 1, 1, 7], logits.to_vec()).unwrap());
        let mask = Tensor::full(vec![1, 1, 1, 7], target).unwrap();
        let loss = g.bce_with_logits(z, &mask, 2.0).unwrap();
        assert!(g.value(loss).item().unwrap().is_finite());
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(z).unwrap().is_finite());
    }
}

fn tiny_setup() -> (UNetConfig, Tensor) {
    let cfg = UNetConfig {
        base_channels: 4,
        time_embed_dim: 8,
        norm_groups: 2,
        ..UNetConfig::default()
    };
    let scene = SceneConfig {
        size: 16,
        ..SceneConfig::default()
    };
    let pairs = generate_range(&scene, 0, 8).unwrap();
    let parts: Vec<Tensor> = pairs
        .iter()
        .map(|p| p.img_a.clone().reshape(vec![1, 1, 16, 16]).unwrap())
        .collect();
    (cfg, Tensor::stack_outer(&parts.iter().collect::<Vec<_>>()).unwrap())
}

#[test]
fn denoiser_training_lowers_loss_and_is_reproducible() {
    let (cfg, images) = tiny_setup();
    let s = make_linear_schedule(50, 1e-4, 0.05).unwrap();
    let tc = DiffusionTrainConfig {
        steps: 80,
        batch: 4,
        lr: 3e-3,
        seed: 5,
    };
    let run = || {
        let mut net = UNet::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let losses = train_denoiser(&mut net, &images, &s, &tc, |_, _| {}).unwrap();
        (net, losses)
    };
    let (net, losses) = run();
    let (again, losses_again) = run();
    assert_eq!(losses, losses_again);
    assert_eq!(net.params, again.params);
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[70..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "loss {head} -> {tail}");
}

#[test]
fn sampling_is_clamped_and_seeded() {
    let (cfg, _) = tiny_setup();
    let net = UNet::new(cfg, &mut Rng::new(2)).unwrap();
    let s = make_linear_schedule(10, 1e-4, 0.05).unwrap();
    let a = sample(&net, &[2, 1, 16, 16], &mut Rng::new(4), &s).unwrap();
    let b = sample(&net, &[2, 1, 16, 16], &mut Rng::new(4), &s).unwrap();
    assert_eq!(a.shape(), &[2, 1, 16, 16]);
    assert_eq!(a, b);
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}
