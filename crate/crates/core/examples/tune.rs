//! Scratch harness for tuning the acceptance-fixture training recipe.
//! Mirrors the acceptance suite's shared fixture (same model, data, and
//! evaluation protocol) with hyperparameters taken from environment
//! variables, and prints the criterion 8/9/10 quantities.

use std::time::Instant;

use sdr_core::datagen::{self, HoleRect, Scene};
use sdr_core::guidance::GuidanceConfig;
use sdr_core::objectives::{compute_metrics, compute_metrics_masked, MetricOptions};
use sdr_core::pipeline::{self, ModelConfig, RefineConfig};
use sdr_core::propagation::PropagationConfig;
use sdr_core::trainer::{self, LossKind, SparsityProtocol, TrainConfig, TrainStart};

const EVAL_LEVELS: [usize; 3] = [20, 50, 200];
const N_EVAL: usize = 20;
fn severity() -> f64 {
    envf("SEVERITY", 0.6)
}

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envu(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envlist(key: &str, default: &[usize]) -> Vec<usize> {
    match std::env::var(key) {
        Ok(v) => v.split(',').filter_map(|t| t.trim().parse().ok()).collect(),
        Err(_) => default.to_vec(),
    }
}

fn scene_source(seed: u64) -> sdr_core::Result<Scene<f32>> {
    datagen::gen_scene(seed, 32, 32, 0.5)
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn main() {
    let model = ModelConfig {
        guidance: GuidanceConfig {
            hf_channels: envu("HF", 8),
            out_channels: envu("GOUT", 16),
            widths: [envu("W0", 8), envu("W1", 16), envu("W2", 32)],
            with_depth_head: false,
        },
        propagation: PropagationConfig {
            window: envu("WINDOW", 13),
            channels: envu("CHANNELS", 8),
            guidance_channels: envu("GOUT", 16),
        },
    };
    let refine_cfg = RefineConfig::default();
    let train_cfg = TrainConfig {
        epochs: envu("EPOCHS", 36),
        steps_per_epoch: envu("STEPS", 40),
        batch_size: envu("BATCH", 2),
        lr: envf("LR", 2e-3),
        lr_halving_epochs: envlist("HALVE", &[26, 32]),
        weight_decay: envf("WD", 1e-4),
        loss: LossKind::L1L2,
        protocol: SparsityProtocol::Points {
            min_s: envu("MIN_S", 10),
            max_s: envu("MAX_S", 250),
        },
        mde_severity: severity(),
        max_layer1_iters: envu("CAP", 12),
        seed: envu("SEED", 42) as u64,
        ..TrainConfig::default()
    };
    println!("config: {train_cfg:?}");
    println!("model: {model:?}");

    let params = if envu("INIT", 0) == 1 {
        println!("untrained init, no training");
        trainer::initial_params::<f32>(&train_cfg, &model).expect("init")
    } else if let Ok(path) = std::env::var("LOAD") {
        println!("loading params from {path}");
        sdr_core::params::ParamSet::<f32>::load(std::path::Path::new(&path)).expect("load")
    } else {
        let t0 = Instant::now();
        let trained = trainer::train(
            &train_cfg,
            &model,
            &refine_cfg,
            &scene_source,
            TrainStart::Fresh,
            None,
        )
        .expect("training");
        let train_secs = t0.elapsed().as_secs_f64();
        for (e, l) in trained.log.epoch_means() {
            println!("epoch {e:3}  mean loss {l:.6}");
        }
        println!("train: {train_secs:.0}s");
        if let Ok(path) = std::env::var("SAVE") {
            trained.params.save(std::path::Path::new(&path)).expect("save");
            println!("saved params to {path}");
        }
        trained.params
    };
    let opts = MetricOptions::default();
    let frozen_cfg = RefineConfig {
        mask_update: false,
        ..refine_cfg
    };
    let mut baseline = Vec::new();
    let mut level_rmse = [Vec::new(), Vec::new(), Vec::new()];
    let mut ablation = Vec::new();
    let mut hole_model = Vec::new();
    let mut hole_base = Vec::new();
    let te = Instant::now();
    for i in 0..N_EVAL as u64 {
        let scene = scene_source(500_000 + i).unwrap();
        let d0 = datagen::simulate_mde(&scene.gt_depth, 700_000 + i, severity()).unwrap();
        baseline.push(compute_metrics(&d0, &scene.gt_depth, opts).unwrap().rmse);
        for (k, &level) in EVAL_LEVELS.iter().enumerate() {
            let sparse =
                datagen::sample_points(&scene.gt_depth, level, 900_000 + i * 10 + k as u64)
                    .unwrap();
            let (refined, _) = pipeline::refine(
                &params, &model, &refine_cfg, &scene.image, &sparse, &d0, None,
            )
            .unwrap();
            level_rmse[k].push(compute_metrics(&refined, &scene.gt_depth, opts).unwrap().rmse);
            if level == EVAL_LEVELS[0] {
                let (ablated, _) = pipeline::refine(
                    &params, &model, &frozen_cfg, &scene.image, &sparse, &d0, None,
                )
                .unwrap();
                ablation.push(compute_metrics(&ablated, &scene.gt_depth, opts).unwrap().rmse);
            }
        }
        let full = datagen::sample_points(&scene.gt_depth, 200, 800_000 + i).unwrap();
        let (holed, region) = datagen::mask_hole(&full, HoleRect::centered_half(32, 32)).unwrap();
        let (refined, _) = pipeline::refine(
            &params, &model, &refine_cfg, &scene.image, &holed, &d0, None,
        )
        .unwrap();
        hole_model.push(
            compute_metrics_masked(&refined, &scene.gt_depth, &region, opts)
                .unwrap()
                .rmse,
        );
        hole_base.push(
            compute_metrics_masked(&d0, &scene.gt_depth, &region, opts)
                .unwrap()
                .rmse,
        );
    }
    let b = mean(&baseline);
    println!("eval: {:.0}s", te.elapsed().as_secs_f64());
    println!("baseline rmse {b:.4}");
    for (k, &level) in EVAL_LEVELS.iter().enumerate() {
        let m = mean(&level_rmse[k]);
        println!(
            "s={level:<4} rmse {m:.4}  gain {:.1}%",
            100.0 * (1.0 - m / b)
        );
    }
    let abl = mean(&ablation);
    let full20 = mean(&level_rmse[0]);
    println!(
        "ablation rmse {abl:.4} vs full {full20:.4}  degradation {:.1}% (need >= 10%)",
        100.0 * (abl / full20 - 1.0)
    );
    let wins = hole_model
        .iter()
        .zip(&hole_base)
        .filter(|(m, b)| m < b)
        .count();
    println!(
        "hole: model {:.4} baseline {:.4} wins {wins}/{}",
        mean(&hole_model),
        mean(&hole_base),
        N_EVAL
    );

    if envu("DUMP", 0) == 1 {
        for prefix in ["prop1", "prop2"] {
            let b = params.get(&format!("{prefix}.offset_bias")).unwrap();
            let data: Vec<f64> = b.data().iter().map(|v| (*v).into()).collect();
            let p = (data.len() as f64).sqrt() as usize;
            let center = data[(p / 2) * p + p / 2];
            let max = data.iter().cloned().fold(f64::MIN, f64::max);
            let min = data.iter().cloned().fold(f64::MAX, f64::min);
            let mean = data.iter().sum::<f64>() / data.len() as f64;
            println!(
                "{prefix}.offset_bias: center {center:.4} min {min:.4} max {max:.4} mean {mean:.4}"
            );
            for name in ["query.gamma", "key.gamma", "query.weight", "key.weight"] {
                let t = params.get(&format!("{prefix}.{name}")).unwrap();
                let d: Vec<f64> = t.data().iter().map(|v| (*v).into()).collect();
                let rms = (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt();
                println!("  {prefix}.{name}: rms {rms:.4}");
            }
        }
    }

    if envu("DUMP2", 0) == 1 {
        use sdr_core::guidance;
        use sdr_core::propagation;
        use sdr_core::PropagationMask;
        let level = envu("DUMP2_S", 20);
        let scene = scene_source(500_000).unwrap();
        let d0 = datagen::simulate_mde(&scene.gt_depth, 700_000, severity()).unwrap();
        let sparse = datagen::sample_points(&scene.gt_depth, level, 900_000).unwrap();
        let g = guidance::guidance_forward(
            &params, pipeline::GUIDANCE_PREFIX, &model.guidance, &scene.image, &sparse, &d0,
        )
        .unwrap();
        let s_plane = sparse.as_tensor();
        let mask0 = PropagationMask::from_sparse(&sparse).into_tensor();
        let mut depth = d0.as_tensor().clone();
        let stats = |t: &sdr_core::tensor::Tensor<f32>| {
            let d: Vec<f64> = t.data().iter().map(|v| *v as f64).collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let max = d.iter().cloned().fold(f64::MIN, f64::max);
            (mean, max)
        };
        for prefix in ["prop1", "prop2"] {
            let mut mask = mask0.clone();
            for it in 0..6 {
                let d_tilde = propagation::clamp_seeds(&depth, s_plane, &mask0).unwrap();
                let (nd, nm) =
                    propagation::step(&params, prefix, &model.propagation, &d_tilde, &g, &mask)
                        .unwrap();
                let delta: f64 = nd
                    .data()
                    .iter()
                    .zip(d_tilde.data())
                    .map(|(a, b)| ((*a - *b) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                depth = nd;
                mask = nm;
                let (mm, mx) = stats(&mask);
                let rmse = {
                    let dm = sdr_core::DepthMap::new(depth.clone()).unwrap();
                    compute_metrics(&dm, &scene.gt_depth, opts).unwrap().rmse
                };
                println!(
                    "{prefix} iter {it}: mask mean {mm:.4} max {mx:.4}  |dD| {delta:.3}  rmse {rmse:.4}"
                );
            }
        }
    }

    if envu("DIAG", 0) == 1 {
        let scene = scene_source(500_000).unwrap();
        let d0 = datagen::simulate_mde(&scene.gt_depth, 700_000, severity()).unwrap();
        for (k, &level) in EVAL_LEVELS.iter().enumerate() {
            let sparse =
                datagen::sample_points(&scene.gt_depth, level, 900_000 + k as u64).unwrap();
            let (_, diag) = pipeline::refine(
                &params,
                &model,
                &refine_cfg,
                &scene.image,
                &sparse,
                &d0,
                Some(&scene.gt_depth),
            )
            .unwrap();
            let fmt = |v: &[f64]| {
                v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
            };
            println!("diag s={level}: support [{}]", fmt(&diag.mask_support));
            println!("diag s={level}: rmse    [{}]", fmt(&diag.rmse));
        }
    }
}
