//! `sdr train`: train the refinement model on streamed synthetic scenes.
//!
//! Writes `params.bin` (final parameters), `train_log.csv` (per-step
//! losses), and `checkpoint.bin` (parameters plus optimizer state, updated
//! after every epoch). `--resume` restarts from such a checkpoint: the
//! stored optimizer step count determines the next epoch, so the
//! configuration must match the original run.

use std::path::{Path, PathBuf};

use sdr_core::datagen;
use sdr_core::params::ParamSet;
use sdr_core::trainer::{self, TrainStart};
use sdr_core::SdrError;

use crate::commands::{config_err, CmdResult};
use crate::config::RunConfig;
use crate::imageio::write_atomic;

#[derive(clap::Args)]
pub struct Args {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Resume from a checkpoint written by a previous run with the same
    /// configuration
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

/// Saves a parameter set atomically (encode to a temp file, then rename).
fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<(), SdrError> {
    let tmp = path.with_extension("tmp");
    params.save(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn run(args: Args) -> CmdResult {
    let cfg = RunConfig::load(&args.config)?;
    let train_cfg = cfg.train_config();
    let model = cfg.model_config();
    let refine_cfg = cfg.refine_config();
    std::fs::create_dir_all(&args.out_dir).map_err(SdrError::from)?;

    let start = match &args.resume {
        None => TrainStart::Fresh,
        Some(path) => {
            let state = ParamSet::<f32>::load(path)?;
            let step = state.get("opt.step").map_err(|_| {
                config_err(format!(
                    "{}: not a training checkpoint (no optimizer state)",
                    path.display()
                ))
            })?;
            let step = step.data()[0] as usize;
            let per_epoch = train_cfg.steps_per_epoch;
            if per_epoch == 0 || step % per_epoch != 0 {
                return Err(config_err(format!(
                    "{}: checkpoint step count {step} is not an epoch boundary for \
                     steps_per_epoch = {}; was it written under a different configuration?",
                    path.display(),
                    train_cfg.steps_per_epoch
                )));
            }
            let next_epoch = step / per_epoch;
            println!("resuming at epoch {next_epoch} from {}", path.display());
            TrainStart::Checkpoint { state, next_epoch }
        }
    };

    let (h, w, complexity) = (cfg.scene.height, cfg.scene.width, cfg.scene.complexity);
    let scenes = move |seed: u64| datagen::gen_scene::<f32>(seed, h, w, complexity);
    let checkpoint = args.out_dir.join("checkpoint.bin");
    let t0 = std::time::Instant::now();
    let out = trainer::train(
        &train_cfg,
        &model,
        &refine_cfg,
        &scenes,
        start,
        Some(&checkpoint),
    )?;

    for (epoch, mean) in out.log.epoch_means() {
        println!("epoch {epoch:3}  mean loss {mean:.6}");
    }
    save_params(&args.out_dir.join("params.bin"), &out.params)?;
    write_atomic(
        &args.out_dir.join("train_log.csv"),
        out.log.to_csv().as_bytes(),
    )?;
    println!(
        "trained {} parameter tensor(s) in {:.1}s; wrote {}",
        out.params.len(),
        t0.elapsed().as_secs_f64(),
        args.out_dir.join("params.bin").display()
    );
    Ok(())
}
