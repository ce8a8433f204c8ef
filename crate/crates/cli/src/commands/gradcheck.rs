//! `sdr gradcheck`: verify analytic gradients against central finite
//! differences for each trainable component. This is a fast smoke check
//! on randomized instances; inputs and loss targets are chosen away from
//! the non-smooth points of the operators so the comparison is valid.

use std::collections::BTreeMap;

use clap::ValueEnum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdr_core::gradcheck::{grad_check, GradCheckConfig};
use sdr_core::guidance::{self, GuidanceConfig};
use sdr_core::objectives::{SILOG_ALPHA, SILOG_LAMBDA};
use sdr_core::params::ParamSet;
use sdr_core::plane::{PropagationMask, SparseDepth};
use sdr_core::propagation::{self, PropagationConfig};
use sdr_core::tape::{Tape, ValueId};
use sdr_core::{Result, Tensor};

use crate::commands::{binary_tensor, perturb, rand_tensor, CmdError, CmdResult};

const THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scale {
    /// Smallest shapes; runs in a few seconds.
    Tiny,
    /// Larger shapes and more coordinates.
    Small,
}

#[derive(clap::Args)]
pub struct Args {
    #[arg(long, value_enum, default_value_t = Scale::Tiny)]
    pub scale: Scale,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

struct Dims {
    h: usize,
    w: usize,
    channels: usize,
    guidance_channels: usize,
    window: usize,
    widths: [usize; 3],
    hf: usize,
    max_coords: usize,
}

fn dims(scale: Scale) -> Dims {
    match scale {
        Scale::Tiny => Dims {
            h: 6,
            w: 6,
            channels: 2,
            guidance_channels: 2,
            window: 3,
            widths: [2, 3, 4],
            hf: 2,
            max_coords: 40,
        },
        Scale::Small => Dims {
            h: 10,
            w: 10,
            channels: 3,
            guidance_channels: 3,
            window: 5,
            widths: [4, 6, 8],
            hf: 3,
            max_coords: 80,
        },
    }
}

type Build = Box<dyn Fn(&ParamSet<f64>) -> Result<(Tape<f64>, ValueId)>>;

/// Runs one component: analytic gradients from the tape, numeric from
/// central differences, and prints the worst relative error.
fn check_component(
    name: &str,
    params: &ParamSet<f64>,
    build: &Build,
    max_coords: usize,
) -> std::result::Result<f64, CmdError> {
    let (tape, loss) = build(params)?;
    let grads = tape.backward(loss)?;
    let analytic: BTreeMap<String, Tensor<f64>> = tape.param_grads(&grads);
    // A small step keeps the finite difference from straddling rectifier
    // kinks; in f64 the loss still has ample precision at this scale.
    let cfg = GradCheckConfig {
        max_coords,
        eps: 1e-5,
        ..GradCheckConfig::default()
    };
    let report = grad_check(
        params,
        &analytic,
        |p| {
            let (tape, loss) = build(p)?;
            Ok(tape.value(loss).data()[0])
        },
        &cfg,
    )?;
    println!(
        "{name:<18} max rel err {:.3e} over {} coordinate(s){}",
        report.max_rel_err,
        report.checked,
        report
            .worst_param
            .as_ref()
            .map(|p| format!(" (worst: {p})"))
            .unwrap_or_default()
    );
    Ok(report.max_rel_err)
}

pub fn run(args: Args) -> CmdResult {
    let d = dims(args.scale);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut worst: f64 = 0.0;

    // Component 1: one propagation step, both outputs.
    let prop_cfg = PropagationConfig {
        window: d.window,
        channels: d.channels,
        guidance_channels: d.guidance_channels,
    };
    let mut prop_params = ParamSet::<f64>::new();
    propagation::init_params(&mut prop_params, &mut rng, "prop", &prop_cfg)?;
    perturb(&mut prop_params, &mut rng);
    let depth = rand_tensor(&mut rng, &[d.h, d.w], 1.0, 3.0);
    let guide = rand_tensor(&mut rng, &[d.guidance_channels, d.h, d.w], -1.0, 1.0);
    let mask = binary_tensor(&mut rng, &[d.h, d.w], 0.3);
    let step_build = |chained: bool| -> Build {
        let (depth, guide, mask) = (depth.clone(), guide.clone(), mask.clone());
        let prop_cfg = prop_cfg;
        Box::new(move |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let ids = propagation::bind_params(&mut tape, p, "prop")?;
            let d0 = tape.constant(depth.clone())?;
            let g = tape.constant(guide.clone())?;
            let m0 = tape.constant(mask.clone())?;
            let (mut dd, mut mm) = propagation::step_tape(&mut tape, &ids, &prop_cfg, d0, g, m0)?;
            if chained {
                let (d2, m2) = propagation::step_tape(&mut tape, &ids, &prop_cfg, dd, g, mm)?;
                dd = d2;
                mm = m2;
            }
            let t_depth =
                tape.constant(Tensor::from_vec(depth.shape(), vec![10.0; depth.len()])?)?;
            let t_mask =
                tape.constant(Tensor::from_vec(depth.shape(), vec![5.0; depth.len()])?)?;
            let ones =
                tape.constant(Tensor::from_vec(depth.shape(), vec![1.0; depth.len()])?)?;
            let l1 = tape.loss_l1l2(dd, t_depth, ones)?;
            let l2 = tape.loss_l1l2(mm, t_mask, ones)?;
            let total = tape.add(l1, l2)?;
            Ok((tape, total))
        })
    };
    worst = worst.max(check_component(
        "propagation-step",
        &prop_params,
        &step_build(false),
        d.max_coords,
    )?);

    // Component 2: two chained steps with the evolving mask.
    worst = worst.max(check_component(
        "chained-steps",
        &prop_params,
        &step_build(true),
        d.max_coords,
    )?);

    // Component 3: the guidance network including its depth head.
    let guide_cfg = GuidanceConfig {
        hf_channels: d.hf,
        out_channels: d.guidance_channels,
        widths: d.widths,
        with_depth_head: true,
    };
    // No perturbation here: the convolution init is already random (no
    // exactly-zero or exactly-one parameters to move off), and shifting
    // the fan-in-scaled biases pushes pre-activations toward the
    // rectifier kink where finite differences break down.
    let mut guide_params = ParamSet::<f64>::new();
    guidance::init_params(&mut guide_params, &mut rng, "g", &guide_cfg)?;
    let image = rand_tensor(&mut rng, &[3, d.h, d.w], 0.1, 0.9);
    let plane = {
        let mut z = Tensor::<f64>::zeros(&[d.h, d.w]);
        for _ in 0..4 {
            let y = rng.gen_range(0..d.h);
            let x = rng.gen_range(0..d.w);
            z.data_mut()[y * d.w + x] = rng.gen_range(1.0..3.0);
        }
        z
    };
    let sparse = SparseDepth::from_dense(plane)?;
    let mask0 = PropagationMask::from_sparse(&sparse).into_tensor();
    let d0 = rand_tensor(&mut rng, &[d.h, d.w], 1.0, 3.0);
    let guide_build: Build = {
        let (image, d0) = (image.clone(), d0.clone());
        let splane = sparse.as_tensor().clone();
        let guide_cfg = guide_cfg;
        Box::new(move |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let img = tape.constant(image.clone())?;
            let sp = tape.constant(splane.clone())?;
            let m0 = tape.constant(mask0.clone())?;
            let dd = tape.constant(d0.clone())?;
            let out =
                guidance::forward_tape(&mut tape, p, "g", &guide_cfg, img, sp, m0, dd, true)?;
            let n_feat = tape.value(out.features).len();
            let shape_feat = tape.value(out.features).shape().to_vec();
            let t_f = tape.constant(Tensor::from_vec(&shape_feat, vec![50.0; n_feat])?)?;
            let ones_f = tape.constant(Tensor::from_vec(&shape_feat, vec![1.0; n_feat])?)?;
            let l_f = tape.loss_l1l2(out.features, t_f, ones_f)?;
            let head = out.depth.expect("depth head requested");
            let shape_h = tape.value(head).shape().to_vec();
            let n_h = tape.value(head).len();
            let t_h = tape.constant(Tensor::from_vec(&shape_h, vec![50.0; n_h])?)?;
            let ones_h = tape.constant(Tensor::from_vec(&shape_h, vec![1.0; n_h])?)?;
            let l_h = tape.loss_l1l2(head, t_h, ones_h)?;
            let total = tape.add(l_f, l_h)?;
            Ok((tape, total))
        })
    };
    worst = worst.max(check_component(
        "guidance-network",
        &guide_params,
        &guide_build,
        d.max_coords,
    )?);

    // Component 4: both training losses with the prediction as the
    // differentiated quantity.
    let mut loss_params = ParamSet::<f64>::new();
    loss_params.insert("pred", rand_tensor(&mut rng, &[1, 12], 2.0, 4.0));
    let target = rand_tensor(&mut rng, &[1, 12], 0.5, 1.5);
    let loss_build: Build = {
        Box::new(move |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let pred = tape.param("pred", p.get("pred")?.clone())?;
            let t = tape.constant(target.clone())?;
            let ones = tape.constant(Tensor::from_vec(&[1, 12], vec![1.0; 12])?)?;
            let l1 = tape.loss_l1l2(pred, t, ones)?;
            let l2 = tape.loss_silog(pred, t, ones, SILOG_ALPHA, SILOG_LAMBDA)?;
            let total = tape.add(l1, l2)?;
            Ok((tape, total))
        })
    };
    worst = worst.max(check_component(
        "objectives",
        &loss_params,
        &loss_build,
        d.max_coords,
    )?);

    if worst > THRESHOLD {
        return Err(CmdError::Threshold(format!(
            "worst relative gradient error {worst:.3e} exceeds {THRESHOLD:.0e}"
        )));
    }
    println!("all gradients within {THRESHOLD:.0e}");
    Ok(())
}
