//! `sdr refine`: refine one depth map from files.
//!
//! In `sdr` mode the initial dense estimate comes from `--init-depth`; in
//! `ordinary` mode the model's own depth head predicts it. `holefill`
//! mode removes the measurements inside a centered hole covering half the
//! image before refining, and reports metrics over that hole only.

use std::path::PathBuf;

use sdr_core::datagen::{mask_hole, HoleRect};
use sdr_core::io::pfm::to_pfm_bytes;
use sdr_core::io::{read_pfm, read_sparse_csv};
use sdr_core::objectives::{compute_metrics, compute_metrics_masked};
use sdr_core::params::ParamSet;
use sdr_core::pipeline::{self, RefineDiagnostics};
use sdr_core::{DepthMap, Tensor};

use crate::commands::{config_err, CmdResult};
use crate::config::{Mode, RunConfig};
use crate::imageio;

#[derive(clap::Args)]
pub struct Args {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Trained parameters (`params.bin` from `sdr train`)
    #[arg(long)]
    pub params: PathBuf,
    /// Color image (PNG)
    #[arg(long)]
    pub image: PathBuf,
    /// Sparse measurements (CSV: `row,col,depth`)
    #[arg(long)]
    pub sparse: PathBuf,
    /// Initial dense depth estimate (PFM); required unless the mode
    /// predicts its own
    #[arg(long)]
    pub init_depth: Option<PathBuf>,
    /// Output path for the refined depth (PFM)
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth depth (PFM); enables metrics and the error map
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Write a grayscale error map against the ground truth (PNG)
    #[arg(long)]
    pub error_map: Option<PathBuf>,
}

fn print_diagnostics(diag: &RefineDiagnostics) {
    for warning in &diag.warnings {
        eprintln!("warning: {warning}");
    }
    match diag.schedule {
        Some(s) => println!(
            "schedule: spacing {:.2} px, {} + {} iterations",
            s.nu_s, s.n_layer1, s.n_layer2
        ),
        None => println!("schedule: none (fallback)"),
    }
    if let Some(last) = diag.mask_support.last() {
        println!(
            "mask support: {:.1}% of pixels after the final iteration",
            100.0 * last
        );
    }
}

pub fn run(args: Args) -> CmdResult {
    let cfg = RunConfig::load(&args.config)?;
    let model = cfg.model_config();
    let refine_cfg = cfg.refine_config();
    if args.error_map.is_some() && args.gt.is_none() {
        return Err(config_err("--error-map needs --gt to compare against"));
    }
    match (cfg.mode, &args.init_depth) {
        (Mode::Sdr | Mode::Holefill, None) => {
            return Err(config_err(format!(
                "mode '{:?}' refines an external estimate; pass --init-depth",
                cfg.mode
            )));
        }
        (Mode::Ordinary, Some(_)) => {
            return Err(config_err(
                "mode 'ordinary' predicts its own initial estimate; remove --init-depth",
            ));
        }
        _ => {}
    }

    let params = ParamSet::<f32>::load(&args.params)?;
    let image = imageio::read_image::<f32>(&args.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut sparse = read_sparse_csv::<f32>(&args.sparse, h, w)?;
    let gt = args
        .gt
        .as_ref()
        .map(|p| read_pfm::<f32>(p))
        .transpose()?;

    // In holefill mode, carve the demonstration hole out of the inputs.
    let hole: Option<Tensor<f32>> = if cfg.mode == Mode::Holefill {
        let rect = HoleRect::centered_half(h, w);
        let (holed, region) = mask_hole(&sparse, rect)?;
        println!(
            "holefill: removed {} measurement(s) inside the central {}x{} region",
            sparse.count() - holed.count(),
            rect.height,
            rect.width
        );
        sparse = holed;
        Some(region)
    } else {
        None
    };

    let (refined, diag): (DepthMap<f32>, RefineDiagnostics) = match cfg.mode {
        Mode::Ordinary => {
            pipeline::refine_predicted(&params, &model, &refine_cfg, &image, &sparse, gt.as_ref())?
        }
        Mode::Sdr | Mode::Holefill => {
            let d0 = read_pfm::<f32>(args.init_depth.as_ref().unwrap())?;
            pipeline::refine(
                &params,
                &model,
                &refine_cfg,
                &image,
                &sparse,
                &d0,
                gt.as_ref(),
            )?
        }
    };
    print_diagnostics(&diag);

    if let Some(gt) = &gt {
        let report = match &hole {
            Some(region) => compute_metrics_masked(&refined, gt, region, cfg.metric_options())?,
            None => compute_metrics(&refined, gt, cfg.metric_options())?,
        };
        println!("metrics: {}", report.to_line());
        if let Some(path) = &args.error_map {
            imageio::write_error_map(path, &refined, gt)?;
            println!("wrote error map {}", path.display());
        }
    }

    imageio::write_atomic(&args.out, &to_pfm_bytes(&refined))?;
    println!("wrote {}", args.out.display());
    Ok(())
}
