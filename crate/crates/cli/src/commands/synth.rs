//! `sdr synth`: write synthetic scene files for experimentation.

use std::path::PathBuf;

use sdr_core::datagen;
use sdr_core::io::pfm::to_pfm_bytes;
use sdr_core::io::sparse_csv::to_csv_string;

use crate::commands::CmdResult;
use crate::config::RunConfig;
use crate::imageio;

/// Distinct seed streams per scene, so the corruption and the measurement
/// pattern are independent of the geometry draw.
const MDE_STREAM: u64 = 0x6d64;
const SPARSE_STREAM: u64 = 0x7370;

#[derive(clap::Args)]
pub struct Args {
    /// Run configuration (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Directory for the generated files (created if missing)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// First scene seed; defaults to the configured run seed
    #[arg(long)]
    pub start_seed: Option<u64>,
}

pub fn run(args: Args) -> CmdResult {
    let cfg = RunConfig::load(&args.config)?;
    let base = args.start_seed.unwrap_or(cfg.seed);
    std::fs::create_dir_all(&args.out_dir)
        .map_err(sdr_core::SdrError::from)?;
    for i in 0..args.count {
        let seed = base + i as u64;
        let scene = datagen::gen_scene::<f32>(
            seed,
            cfg.scene.height,
            cfg.scene.width,
            cfg.scene.complexity,
        )?;
        let d0 = datagen::simulate_mde(&scene.gt_depth, seed ^ MDE_STREAM, cfg.scene.severity)?;
        let sparse =
            datagen::sample_points(&scene.gt_depth, cfg.scene.sparsity, seed ^ SPARSE_STREAM)?;

        let stem = format!("scene_{i:03}");
        imageio::write_image(&args.out_dir.join(format!("{stem}_image.png")), &scene.image)?;
        imageio::write_atomic(
            &args.out_dir.join(format!("{stem}_depth.pfm")),
            &to_pfm_bytes(&scene.gt_depth),
        )?;
        imageio::write_atomic(
            &args.out_dir.join(format!("{stem}_init.pfm")),
            &to_pfm_bytes(&d0),
        )?;
        imageio::write_atomic(
            &args.out_dir.join(format!("{stem}_sparse.csv")),
            to_csv_string(&sparse).as_bytes(),
        )?;
        println!(
            "{stem}: seed {seed}, {}x{}, {} measurements",
            cfg.scene.height,
            cfg.scene.width,
            sparse.count()
        );
    }
    println!(
        "wrote {} scene(s) to {}",
        args.count,
        args.out_dir.display()
    );
    Ok(())
}
