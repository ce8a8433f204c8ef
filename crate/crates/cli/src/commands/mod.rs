//! Subcommand implementations.

pub mod gradcheck;
pub mod refine;
pub mod selftest;
pub mod sweep;
pub mod synth;
pub mod train;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sdr_core::params::ParamSet;
use sdr_core::{SdrError, Tensor};

/// Command outcome: either a core error (mapped to exit codes 1-3 by its
/// kind) or a failed check threshold (exit code 4).
#[derive(Debug)]
pub enum CmdError {
    Core(SdrError),
    Threshold(String),
}

impl From<SdrError> for CmdError {
    fn from(e: SdrError) -> Self {
        CmdError::Core(e)
    }
}

pub type CmdResult = Result<(), CmdError>;

/// Shorthand for a usage/configuration failure.
pub fn config_err(msg: impl Into<String>) -> CmdError {
    CmdError::Core(SdrError::Config(msg.into()))
}

pub(crate) fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random zero/one plane with at least one positive entry.
pub(crate) fn binary_tensor(rng: &mut ChaCha8Rng, shape: &[usize], density: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 })
        .collect();
    if !data.contains(&1.0) {
        data[rng.gen_range(0..n)] = 1.0;
    }
    Tensor::from_vec(shape, data).unwrap()
}

/// Moves every parameter off its init point so no gradient path or
/// comparison is hidden behind an exactly-zero or exactly-one coordinate.
pub(crate) fn perturb(params: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v += rng.gen_range(-0.25..0.25);
        }
    }
}
