//! Argument parsing and the five subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use diffcd::cdnet::{evaluate_at, ChangeDetector, MetricsReport};
use diffcd::denoiser::UNet;
use diffcd::diffusion::NoiseSchedule;
use diffcd::fdaf::{estimate_flows, level_max_flows, AlignMode};
use diffcd::numerics::{Rng, Tensor};
use diffcd::synthdata::{pgm, read_dataset, write_dataset, SamplePair};
use diffcd::training::{
    evaluate_split, f1_by_threshold, predict_split, probe_features, train_change_detector, train_denoiser, CdSplit,
    EpochReport, FeatureProbe,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::CliError;

/// Stream of the run seed used to initialise parameters.
const INIT_STREAM: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "diffcd", version, about = "Diffusion-feature change detection on synthetic scenes")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        count: usize,
        /// Index of the first sample; disjoint ranges give disjoint splits.
        #[arg(long, default_value_t = 0)]
        first_index: u64,
    },
    /// Pretrain the denoiser on every image of a dataset.
    TrainDiffusion {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train flow heads and classifier on frozen (or, with --unfreeze, tuned) features.
    TrainCd {
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// Alignment: on (dual) or off.
        #[arg(long)]
        fdaf: Option<String>,
        #[arg(long)]
        unfreeze: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a test split and write report.json.
    Eval {
        #[arg(long)]
        diffusion: Option<PathBuf>,
        #[arg(long)]
        cd: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score the `M_{i}.pgm` masks of this directory instead of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Also write one probability heatmap per sample.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Predict the change mask of one image pair.
    Infer {
        #[arg(long)]
        diffusion: PathBuf,
        #[arg(long)]
        cd: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

/// Runs a parsed command line; output lines go to `log`.
pub fn run(cli: Cli, log: &mut dyn FnMut(&str)) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    let out = cli
        .out
        .ok_or_else(|| CliError::Usage("missing required flag --out <path>".into()))?;
    match cli.command {
        Command::Synth { count, first_index } => cmd_synth(&cfg, &out, count, first_index, log),
        Command::TrainDiffusion { data, steps } => {
            let data = pick_data(data, &cfg.data.train, "train")?;
            let mut cfg = cfg;
            if let Some(s) = steps {
                cfg.train.diffusion.steps = s;
            }
            cmd_train_diffusion(&cfg, &data, &out, log)
        }
        Command::TrainCd {
            diffusion,
            data,
            val,
            fdaf,
            unfreeze,
            epochs,
        } => {
            let data = pick_data(data, &cfg.data.train, "train")?;
            let val = val.or_else(|| cfg.data.val.clone());
            let mut cfg = cfg;
            if let Some(mode) = fdaf {
                cfg.fdaf.mode = mode.parse()?;
            }
            if let Some(e) = epochs {
                cfg.train.cd.epochs = e;
            }
            cmd_train_cd(&cfg, &diffusion, &data, val.as_deref(), unfreeze, &out, log)
        }
        Command::Eval {
            diffusion,
            cd,
            data,
            predictions,
            heatmaps,
        } => {
            let data = pick_data(data, &cfg.data.test, "test")?;
            let source = match (predictions, diffusion, cd) {
                (Some(p), _, _) => Predictions::Masks(p),
                (None, Some(d), Some(c)) => Predictions::Model { diffusion: d, cd: c },
                _ => {
                    return Err(CliError::Usage(
                        "eval needs --diffusion and --cd checkpoints, or --predictions".into(),
                    ))
                }
            };
            cmd_eval(&cfg, &source, &data, heatmaps, &out, log)
        }
        Command::Infer { diffusion, cd, a, b } => cmd_infer(&diffusion, &cd, &a, &b, &out, log),
    }
}

fn pick_data(flag: Option<PathBuf>, configured: &Option<PathBuf>, split: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("no {split} data: pass --data or set data.{split}")))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    write_text(path, &text)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_pairs(dir: &Path) -> Result<Vec<SamplePair>, CliError> {
    let (_, pairs) = read_dataset(dir)?;
    Ok(pairs)
}

fn batch_of_one(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1];
    s.extend_from_slice(shape);
    s
}

/// `[N, C, H, W]` stack of one image per pair.
fn stack_images(pairs: &[SamplePair], pick: fn(&SamplePair) -> &Tensor) -> Result<Tensor, CliError> {
    let parts: Vec<Tensor> = pairs
        .iter()
        .map(|p| {
            let t = pick(p);
            t.clone().reshape(batch_of_one(t.shape()))
        })
        .collect::<Result<_, _>>()?;
    Ok(Tensor::stack_outer(&parts.iter().collect::<Vec<_>>())?)
}

pub fn cmd_synth(
    cfg: &RunConfig,
    out: &Path,
    count: usize,
    first_index: u64,
    log: &mut dyn FnMut(&str),
) -> Result<(), CliError> {
    write_dataset(&cfg.data.scene, first_index, count, out)?;
    log(&out.join(diffcd::synthdata::MANIFEST).display().to_string());
    Ok(())
}

pub fn cmd_train_diffusion(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<(), CliError> {
    let pairs = load_pairs(data)?;
    let images = {
        let a = stack_images(&pairs, |p| &p.img_a)?;
        let b = stack_images(&pairs, |p| &p.img_b)?;
        Tensor::stack_outer(&[&a, &b])?
    };
    cfg.unet.check_input(images.shape())?;
    let schedule = cfg.schedule()?;
    let mut net = UNet::new(cfg.unet.clone(), &mut Rng::new(cfg.train.diffusion.seed).fork(INIT_STREAM))?;
    let mut losses = Vec::new();
    let result = train_denoiser(&mut net, &images, &schedule, &cfg.train.diffusion, |_, l| losses.push(l));
    create_dir(out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l:e}").expect("string write");
    }
    write_text(&out.join("loss.csv"), &csv)?;
    if let Err(e) = result {
        return Err(match e {
            diffcd::Error::NonFinite(_) => CliError::Numeric(format!(
                "diffusion training diverged at step {}: {e}",
                losses.len()
            )),
            other => other.into(),
        });
    }
    let mut ck = Checkpoint::new("diffusion", cfg.clone(), net.params);
    ck.meta.insert("steps".into(), json!(losses.len()));
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        ck.meta.insert("first_loss".into(), json!(first));
        ck.meta.insert("final_loss".into(), json!(last));
        log(&format!("trained {} steps: loss {first:.6} -> {last:.6}", losses.len()));
    } else {
        log("no training steps; wrote initial parameters");
    }
    ck.save(out)
}

/// Denoiser, change detector and the settings needed to run them.
pub struct Models {
    pub net: UNet,
    pub det: ChangeDetector,
    pub schedule: NoiseSchedule,
    pub config: RunConfig,
}

impl Models {
    pub fn load(diffusion: &Path, cd: &Path) -> Result<Self, CliError> {
        let diff = Checkpoint::load_kind(diffusion, "diffusion")?;
        let cdck = Checkpoint::load_kind(cd, "cd")?;
        let config = cdck.config.clone();
        let tuned = cdck.params.strip_prefix("unet.");
        let backbone = if tuned.is_empty() { diff.params } else { tuned };
        let net = UNet::from_params(config.unet.clone(), backbone)?;
        let det = ChangeDetector {
            fdaf: config.fdaf.clone(),
            head: config.cd.clone(),
            params: {
                let mut p = diffcd::numerics::ParamSet::new();
                p.extend_prefixed("fdaf.", &cdck.params.strip_prefix("fdaf."));
                p.extend_prefixed("head.", &cdck.params.strip_prefix("head."));
                p
            },
        };
        let schedule = config.schedule()?;
        Ok(Self {
            net,
            det,
            schedule,
            config,
        })
    }

    /// Probe noise for images of shape `[C, H, W]`.
    pub fn probe(&self, image_shape: &[usize]) -> Result<FeatureProbe, CliError> {
        let ts = self.config.timesteps(&self.schedule)?;
        Ok(FeatureProbe::new(&ts, &batch_of_one(image_shape), self.config.features.probe_seed)?)
    }

    pub fn split(&self, pairs: &[SamplePair]) -> Result<CdSplit, CliError> {
        let probe = self.probe(pairs[0].img_a.shape())?;
        Ok(CdSplit::build(pairs, &self.net, &probe, &self.schedule, self.config.features.chunk)?)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train_cd(
    cfg: &RunConfig,
    diffusion: &Path,
    data: &Path,
    val: Option<&Path>,
    unfreeze: bool,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<(), CliError> {
    let diff = Checkpoint::load_kind(diffusion, "diffusion")?;
    // The backbone is defined by its own checkpoint.
    let mut cfg = cfg.clone();
    cfg.unet = diff.config.unet.clone();
    cfg.schedule = diff.config.schedule.clone();
    cfg.validate()?;
    let mut net = UNet::from_params(cfg.unet.clone(), diff.params)?;
    let schedule = cfg.schedule()?;
    let pairs = load_pairs(data)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{}: dataset is empty", data.display())));
    }
    let val_pairs = val.map(load_pairs).transpose()?;
    let ts = cfg.timesteps(&schedule)?;
    let probe = FeatureProbe::new(&ts, &batch_of_one(pairs[0].img_a.shape()), cfg.features.probe_seed)?;
    let chunk = cfg.features.chunk;
    let train = CdSplit::build(&pairs, &net, &probe, &schedule, chunk)?;
    let val_split = match &val_pairs {
        Some(v) if !v.is_empty() => Some(CdSplit::build(v, &net, &probe, &schedule, chunk)?),
        _ => None,
    };
    let mut det = ChangeDetector::new(
        &train.feat_a.channels(),
        cfg.fdaf.clone(),
        cfg.cd.clone(),
        &mut Rng::new(cfg.train.cd.seed).fork(INIT_STREAM),
    )?;
    let mut csv = String::from("epoch,loss,val_f1\n");
    let backbone = if unfreeze {
        Some((&mut net, &probe, &schedule))
    } else {
        None
    };
    let trace = train_change_detector(&mut det, backbone, &train, val_split.as_ref(), &cfg.train.cd, |r| {
        let f1 = r.val.as_ref().map(|m| format!("{:.6}", m.f1)).unwrap_or_default();
        writeln!(csv, "{},{:e},{f1}", r.epoch, r.mean_loss).expect("string write");
        log(&format!("epoch {} loss {:.6} val_f1 {}", r.epoch, r.mean_loss, if f1.is_empty() { "-" } else { &f1 }));
    })
    .map_err(|e| match e {
        diffcd::Error::NonFinite(m) => CliError::Numeric(format!("change training diverged: {m}")),
        other => other.into(),
    })?;
    create_dir(out)?;
    write_text(&out.join("train_log.csv"), &csv)?;
    let mut params = det.params.clone();
    if unfreeze {
        params.extend_prefixed("unet.", &net.params);
    }
    let mut ck = Checkpoint::new("cd", cfg, params);
    ck.meta.insert("pyramid_channels".into(), json!(train.feat_a.channels()));
    ck.meta.insert("unfreeze".into(), json!(unfreeze));
    ck.meta.insert("trace".into(), serde_json::to_value(&trace).expect("trace serializes"));
    ck.save(out)
}

pub enum Predictions {
    Model { diffusion: PathBuf, cd: PathBuf },
    /// Directory holding one `M_{index}.pgm` per test sample.
    Masks(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: u64,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestTau {
    pub tau: f64,
    pub f1: f64,
}

/// Layout of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    pub per_sample: Vec<SampleReport>,
    /// Threshold with the best pooled F1 on a 0.05 grid (model runs only).
    pub best_tau: Option<BestTau>,
    pub config: RunConfig,
}

/// Pools per-sample reports into an [`EvalReport`].
pub fn build_report(
    indices: &[u64],
    per: Vec<MetricsReport>,
    tau: f64,
    best_tau: Option<BestTau>,
    config: RunConfig,
) -> EvalReport {
    EvalReport {
        metrics: MetricsReport::pooled(&per, tau),
        per_sample: indices
            .iter()
            .zip(per)
            .map(|(&index, metrics)| SampleReport { index, metrics })
            .collect(),
        best_tau,
        config,
    }
}

/// Probabilities in `[0, 1]` as a graymap.
fn write_probability(path: &Path, probs: &Tensor) -> Result<(), CliError> {
    Ok(pgm::write_image(path, &probs.map(|p| 2.0 * p - 1.0))?)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    source: &Predictions,
    data: &Path,
    heatmaps: bool,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<(), CliError> {
    let pairs = load_pairs(data)?;
    let indices: Vec<u64> = pairs.iter().map(|p| p.meta.index).collect();
    create_dir(out)?;
    let report = match source {
        Predictions::Masks(dir) => {
            let tau = cfg.cd.tau;
            let per = pairs
                .iter()
                .map(|p| {
                    let pred = pgm::read_mask(&dir.join(format!("M_{}.pgm", p.meta.index)))?;
                    if pred.shape() != p.mask.shape() {
                        return Err(CliError::Usage(format!(
                            "prediction for sample {} has extent {:?}, truth {:?}",
                            p.meta.index,
                            pred.shape(),
                            p.mask.shape()
                        )));
                    }
                    Ok(evaluate_at(&pred, &p.mask, tau)?)
                })
                .collect::<Result<Vec<_>, CliError>>()?;
            build_report(&indices, per, tau, None, cfg.clone())
        }
        Predictions::Model { diffusion, cd } => {
            let models = Models::load(diffusion, cd)?;
            let split = models.split(&pairs)?;
            let chunk = models.config.features.chunk;
            let (_, per) = evaluate_split(&models.det, &split, chunk)?;
            let maps = predict_split(&models.det, &split, chunk)?;
            let truths: Vec<Tensor> = (0..split.len())
                .map(|i| split.masks.slice_outer(i, 1))
                .collect::<Result<_, _>>()?;
            let grid: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
            let best = f1_by_threshold(&maps, &truths, &grid)?
                .into_iter()
                .fold(None, |best: Option<BestTau>, (tau, f1)| match best {
                    Some(b) if b.f1 >= f1 => Some(b),
                    _ => Some(BestTau { tau, f1 }),
                });
            if heatmaps {
                for (map, index) in maps.iter().zip(&indices) {
                    write_probability(&out.join(format!("heatmap_{index}.pgm")), &map.probs)?;
                }
            }
            build_report(&indices, per, models.det.head.tau, best, models.config.clone())
        }
    };
    write_json(&out.join("report.json"), &report)?;
    let m = &report.metrics;
    log(&format!(
        "{} samples: F1 {:.4} IoU {:.4} precision {:.4} recall {:.4} OA {:.4}",
        pairs.len(),
        m.f1,
        m.iou,
        m.precision,
        m.recall,
        m.oa
    ));
    Ok(())
}

pub fn cmd_infer(
    diffusion: &Path,
    cd: &Path,
    a: &Path,
    b: &Path,
    out: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<(), CliError> {
    let models = Models::load(diffusion, cd)?;
    let img_a = pgm::read_image(a)?;
    let img_b = pgm::read_image(b)?;
    if img_a.shape() != img_b.shape() {
        return Err(CliError::Usage(format!(
            "image extents differ: {} is {:?}, {} is {:?}",
            a.display(),
            &img_a.shape()[1..],
            b.display(),
            &img_b.shape()[1..]
        )));
    }
    let shape = img_a.shape().to_vec();
    let (img_a, img_b) = (img_a.reshape(batch_of_one(&shape))?, img_b.reshape(batch_of_one(&shape))?);
    models.config.unet.check_input(img_a.shape())?;
    let probe = models.probe(&shape)?;
    let fa = probe_features(&models.net, &img_a, &probe, &models.schedule)?;
    let fb = probe_features(&models.net, &img_b, &probe, &models.schedule)?;
    let hw = (shape[1], shape[2]);
    let cm = models.det.predict(&fa, &fb, hw)?;
    create_dir(out)?;
    pgm::write_mask(&out.join("mask.pgm"), &cm.mask)?;
    write_probability(&out.join("prob.pgm"), &cm.probs)?;
    if models.det.fdaf.mode == AlignMode::Dual {
        write_flows(&models.det, &fa.levels, &fb.levels, out)?;
    }
    log(&format!("changed fraction {:.4}", cm.mask.mean()));
    Ok(())
}

/// Writes `flow_l{level}.pgm`, the A→B flow magnitude scaled so the level's
/// bound maps to white.
fn write_flows(det: &ChangeDetector, a: &[Tensor], b: &[Tensor], out: &Path) -> Result<(), CliError> {
    let params = det.params.strip_prefix("fdaf.");
    let extents: Vec<usize> = a.iter().map(|t| t.shape()[2]).collect();
    let bounds = level_max_flows(&extents, det.fdaf.max_flow);
    for (l, ((fa, fb), bound)) in a.iter().zip(b).zip(bounds).enumerate() {
        let (ab, _) = estimate_flows(fa, fb, &params, l, bound)?;
        let mag = ab.magnitude().map(|m| 2.0 * (m / bound) - 1.0);
        pgm::write_image(&out.join(format!("flow_l{l}.pgm")), &mag)?;
    }
    Ok(())
}

/// Per-epoch trace stored in CD checkpoints.
pub fn trace_of(ck: &Checkpoint) -> Option<Vec<EpochReport>> {
    ck.meta
        .get("trace")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}
