//! Finite-difference verification of analytic gradients.
//!
//! The check runs in `f64`: the caller rebuilds its graph at `f64` precision,
//! harvests analytic parameter gradients from one backward pass, and hands
//! both the parameters and a loss closure here. Central differences with a
//! seeded subsample of coordinates per parameter keep the cost bounded on
//! convolution weights with many values.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::SdrError;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central difference step. Must be positive.
    pub eps: f64,
    /// Upper bound on coordinates checked per parameter; coordinates are
    /// subsampled with `seed` when a parameter has more.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            max_coords: 64,
            seed: 0x5eed,
        }
    }
}

/// Worst relative disagreement found by [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Coordinates actually compared.
    pub checked: usize,
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_err: f64,
    /// Parameter and flat coordinate where the worst error occurred.
    pub worst_param: Option<String>,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

/// Compares `analytic` gradients against central differences of `loss_fn`.
///
/// `loss_fn` must be a pure function of the parameters; it is evaluated twice
/// on the unperturbed set first and any bitwise disagreement fails the check
/// before differences are taken.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    analytic: &BTreeMap<String, Tensor<f64>>,
    loss_fn: F,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet<f64>) -> Result<f64>,
{
    if !(config.eps > 0.0) {
        return Err(SdrError::Config(format!(
            "finite difference step must be positive, got {}",
            config.eps
        )));
    }
    let base = loss_fn(params)?;
    let again = loss_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(SdrError::NonDeterministic(format!(
            "loss evaluated twice on identical parameters: {base} vs {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: None,
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    for (name, tensor) in params.iter() {
        let grad = analytic.get(name).ok_or_else(|| {
            SdrError::Config(format!("no analytic gradient for parameter '{name}'"))
        })?;
        if grad.shape() != tensor.shape() {
            return Err(SdrError::ShapeMismatch {
                context: "grad_check analytic gradient",
                expected: tensor.shape().to_vec(),
                found: grad.shape().to_vec(),
            });
        }
        let len = tensor.len();
        let coords: Vec<usize> = if len <= config.max_coords {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, config.max_coords).into_vec()
        };
        for coord in coords {
            let mut plus = params.clone();
            plus.get_mut(name)?.data_mut()[coord] += config.eps;
            let mut minus = params.clone();
            minus.get_mut(name)?.data_mut()[coord] -= config.eps;
            let numeric = (loss_fn(&plus)? - loss_fn(&minus)?) / (2.0 * config.eps);
            let analytic_v = grad.data()[coord];
            let rel = (analytic_v - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = Some(name.clone());
                report.worst_coord = coord;
                report.worst_analytic = analytic_v;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
