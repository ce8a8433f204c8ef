//! `sdr selftest`: fast internal consistency checks on randomized
//! instances. A compact version of the project's test suite, runnable
//! from a deployed binary without the source tree.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdr_core::datagen;
use sdr_core::io::{read_pfm, read_sparse_csv, write_pfm, write_sparse_csv};
use sdr_core::kernels;
use sdr_core::params::ParamSet;
use sdr_core::pipeline::{iteration_count, RefineConfig};
use sdr_core::propagation::{self, reference, PropagationConfig};
use sdr_core::{DepthMap, Result, Tensor};

use crate::commands::{binary_tensor, perturb, rand_tensor, CmdError, CmdResult};

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, default_value_t = 13)]
    pub seed: u64,
}

struct Outcome {
    failures: Vec<String>,
}

impl Outcome {
    fn record(&mut self, label: &str, result: Result<Option<String>>) {
        match result {
            Ok(None) => println!("[ok] {label}"),
            Ok(Some(detail)) => {
                println!("[failed] {label}: {detail}");
                self.failures.push(format!("{label}: {detail}"));
            }
            Err(e) => {
                println!("[failed] {label}: {e}");
                self.failures.push(format!("{label}: {e}"));
            }
        }
    }
}

fn random_layer(
    rng: &mut ChaCha8Rng,
    prefix: &str,
    cfg: &PropagationConfig,
) -> Result<ParamSet<f64>> {
    let mut params = ParamSet::new();
    propagation::init_params(&mut params, rng, prefix, cfg)?;
    perturb(&mut params, rng);
    Ok(params)
}

/// The optimized propagation step must match the brute-force
/// per-pixel-softmax reference bit-for-bit up to accumulation tolerance.
fn check_reference_equivalence(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let mut worst: f64 = 0.0;
    for window in [3, 5] {
        let cfg = PropagationConfig {
            window,
            channels: 3,
            guidance_channels: 2,
        };
        let params = random_layer(rng, "p", &cfg)?;
        let (h, w) = (rng.gen_range(8..14), rng.gen_range(8..14));
        let depth = rand_tensor(rng, &[h, w], 0.5, 6.0);
        let guide = rand_tensor(rng, &[2, h, w], -1.0, 1.0);
        let mask = binary_tensor(rng, &[h, w], 0.2);
        let (d_fast, m_fast) = propagation::step(&params, "p", &cfg, &depth, &guide, &mask)?;
        let (d_ref, m_ref) = reference::step_naive(&params, "p", &cfg, &depth, &guide, &mask)?;
        for (a, b) in d_fast
            .data()
            .iter()
            .zip(d_ref.data())
            .chain(m_fast.data().iter().zip(m_ref.data()))
        {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst > 1e-6).then(|| format!("max deviation {worst:.2e} exceeds 1e-6")))
}

/// Attention weights: each pixel's in-bounds weights sum to one and
/// out-of-bounds offsets carry exactly zero.
fn check_weight_normalization(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let (l, h, w, p) = (3, 9, 11, 5);
    let q = rand_tensor(rng, &[l, h, w], -1.0, 1.0);
    let k = rand_tensor(rng, &[l, h, w], -1.0, 1.0);
    let bias = rand_tensor(rng, &[p * p], -0.5, 0.5);
    let attn = kernels::window_attention(&q, &k, &bias, p)?;
    let r = (p / 2) as isize;
    let data = attn.data();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let o = ((dy + r) * p as isize + (dx + r)) as usize;
                    let v = data[o * h * w + y as usize * w + x as usize];
                    let inside =
                        y + dy >= 0 && y + dy < h as isize && x + dx >= 0 && x + dx < w as isize;
                    if inside {
                        if v < 0.0 {
                            return Ok(Some(format!("negative weight {v} at ({y},{x})")));
                        }
                        sum += v;
                    } else if v != 0.0 {
                        return Ok(Some(format!(
                            "out-of-bounds offset ({dy},{dx}) at ({y},{x}) holds {v}, not zero"
                        )));
                    }
                }
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Ok(Some(format!("weights at ({y},{x}) sum to {sum}")));
            }
        }
    }
    Ok(None)
}

fn support(mask: &Tensor<f64>) -> BTreeSet<(usize, usize)> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut set = BTreeSet::new();
    for y in 0..h {
        for x in 0..w {
            if mask.data()[y * w + x] > 0.0 {
                set.insert((y, x));
            }
        }
    }
    set
}

fn dilate(set: &BTreeSet<(usize, usize)>, radius: usize, h: usize, w: usize) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    let r = radius as isize;
    for &(y, x) in set {
        for dy in -r..=r {
            for dx in -r..=r {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && ny < h as isize && nx >= 0 && nx < w as isize {
                    out.insert((ny as usize, nx as usize));
                }
            }
        }
    }
    out
}

/// One propagation step grows the mask support by exactly the window
/// radius in Chebyshev distance.
fn check_mask_dilation(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    for window in [3, 5] {
        let cfg = PropagationConfig {
            window,
            channels: 2,
            guidance_channels: 2,
        };
        let params = random_layer(rng, "p", &cfg)?;
        let (h, w) = (12, 12);
        let depth = rand_tensor(rng, &[h, w], 0.5, 6.0);
        let guide = rand_tensor(rng, &[2, h, w], -1.0, 1.0);
        let mask = binary_tensor(rng, &[h, w], 0.08);
        let (_, mask_out) = propagation::step(&params, "p", &cfg, &depth, &guide, &mask)?;
        let got = support(&mask_out);
        let want = dilate(&support(&mask), window / 2, h, w);
        if got != want {
            return Ok(Some(format!(
                "window {window}: support of {} pixel(s) grew to {}, expected {}",
                support(&mask).len(),
                got.len(),
                want.len()
            )));
        }
    }
    Ok(None)
}

/// Pinned schedule values on the reference grid.
fn check_schedule(_rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let cfg = RefineConfig::default();
    let cases = [(500usize, 6usize), (10, 30), (228 * 304, 6)];
    for (s, want) in cases {
        let got = iteration_count(s, 228, 304, &cfg)?.n_layer1;
        if got != want {
            return Ok(Some(format!(
                "iteration count at s={s} on 228x304 is {got}, expected {want}"
            )));
        }
    }
    Ok(None)
}

/// Depth maps and sparse measurements survive a file round trip exactly.
fn check_round_trips(rng: &mut ChaCha8Rng) -> Result<Option<String>> {
    let dir = tempfile::tempdir().map_err(sdr_core::SdrError::from)?;
    let map = DepthMap::new(rand_tensor(rng, &[7, 5], 0.1, 9.0).cast::<f32>())?;
    let pfm = dir.path().join("d.pfm");
    write_pfm(&pfm, &map)?;
    let back = read_pfm::<f32>(&pfm)?;
    if back
        .as_tensor()
        .data()
        .iter()
        .zip(map.as_tensor().data())
        .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Ok(Some("depth map changed across the PFM round trip".into()));
    }
    let scene = datagen::gen_scene::<f32>(rng.gen(), 16, 16, 0.5)?;
    let sparse = datagen::sample_points(&scene.gt_depth, 30, rng.gen())?;
    let csv = dir.path().join("s.csv");
    write_sparse_csv(&csv, &sparse)?;
    let back = read_sparse_csv::<f32>(&csv, 16, 16)?;
    if back.points() != sparse.points() {
        return Ok(Some("sparse points changed across the CSV round trip".into()));
    }
    Ok(None)
}

pub fn run(args: Args) -> CmdResult {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut outcome = Outcome {
        failures: Vec::new(),
    };
    outcome.record(
        "propagation matches the brute-force reference",
        check_reference_equivalence(&mut rng),
    );
    outcome.record(
        "attention weights are normalized and in-bounds",
        check_weight_normalization(&mut rng),
    );
    outcome.record(
        "mask support dilates by the window radius",
        check_mask_dilation(&mut rng),
    );
    outcome.record("iteration schedule matches pinned values", check_schedule(&mut rng));
    outcome.record("file formats round-trip exactly", check_round_trips(&mut rng));

    if outcome.failures.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(CmdError::Threshold(format!(
            "{} check(s) failed: {}",
            outcome.failures.len(),
            outcome.failures.join("; ")
        )))
    }
}
