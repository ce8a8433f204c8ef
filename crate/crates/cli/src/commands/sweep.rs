//! `sdr sweep`: evaluate a trained model across sparsity levels on
//! held-out synthetic scenes.

use std::path::PathBuf;

use sdr_core::datagen::{self, HoleRect};
use sdr_core::objectives::MetricReport;
use sdr_core::params::ParamSet;
use sdr_core::trainer::{self, InitialEstimate, SweepOptions};

use crate::commands::{config_err, CmdResult};
use crate::config::{Mode, RunConfig};
use crate::imageio::write_atomic;

#[derive(clap::Args)]
pub struct Args {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Trained parameters (`params.bin` from `sdr train`)
    #[arg(long)]
    pub params: PathBuf,
    /// Measurement counts to evaluate, strictly increasing (e.g. 20,50,200)
    #[arg(long, value_delimiter = ',', required = true)]
    pub levels: Vec<usize>,
    /// Number of held-out scenes
    #[arg(long, default_value_t = 20)]
    pub scenes: usize,
    /// Also write the results as CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> CmdResult {
    let cfg = RunConfig::load(&args.config)?;
    if !args.levels.windows(2).all(|p| p[0] < p[1]) {
        return Err(config_err(format!(
            "levels must be strictly increasing, got {:?}",
            args.levels
        )));
    }
    let params = ParamSet::<f32>::load(&args.params)?;
    let model = cfg.model_config();
    let refine_cfg = cfg.refine_config();
    let (h, w, complexity) = (cfg.scene.height, cfg.scene.width, cfg.scene.complexity);
    let opts = SweepOptions {
        initial: match cfg.mode {
            Mode::Ordinary => InitialEstimate::Predicted,
            _ => InitialEstimate::Simulated,
        },
        severity: cfg.scene.severity,
        hole: (cfg.mode == Mode::Holefill).then(|| HoleRect::centered_half(h, w)),
        metrics: cfg.metric_options(),
    };
    let scenes = move |seed: u64| datagen::gen_scene::<f32>(seed, h, w, complexity);
    let result = trainer::evaluate_sweep(
        &params,
        &model,
        &refine_cfg,
        &args.levels,
        args.scenes,
        cfg.seed,
        opts,
        &scenes,
    )?;

    println!(
        "sweep over {} scene(s) of {h}x{w}, severity {}:",
        args.scenes, cfg.scene.severity
    );
    let row = |label: &str, r: &MetricReport| {
        println!(
            "  {label:>8}  rmse {:.4}  mae {:.4}  rel {:.4}  d1 {:.1}%",
            r.rmse, r.mae, r.rel, r.delta1
        );
    };
    row("baseline", &result.baseline);
    for level in &result.levels {
        row(&format!("s={}", level.level), &level.report);
        let gain = 1.0 - level.report.rmse / result.baseline.rmse;
        println!("            rmse gain over baseline: {:.1}%", 100.0 * gain);
    }
    if let Some(path) = &args.out {
        write_atomic(path, result.to_csv().as_bytes())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
