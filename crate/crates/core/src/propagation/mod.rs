//! One step of masked spatial propagation.
//!
//! Each step lets every pixel attend over its window: queries come from the
//! current depth and the guidance features, keys are the same projection
//! feature-zeroed wherever the propagation mask is still zero, so attention
//! can only draw depth from pixels that measurement information has already
//! reached. The refined depth is blended in through the mask, and the mask
//! itself is propagated by the same attention weights.
//!
//! The step exists twice: [`step`] runs on plain tensors for inference, and
//! [`step_tape`] records the identical composition on a [`Tape`] for
//! training. Both call the same kernels; a parity test keeps them bit-equal.
//! [`reference`] holds an independent scalar-loop implementation used as an
//! oracle.

pub mod reference;

use rand::Rng;

use crate::error::SdrError;
use crate::kernels;
use crate::params::{conv_init, ParamSet};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Epsilon inside the query/key layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Static shape of one propagation layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationConfig {
    /// Attention window extent. Odd, at least 3.
    pub window: usize,
    /// Channels of the query/key projections.
    pub channels: usize,
    /// Channels of the guidance feature map.
    pub guidance_channels: usize,
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window < 3 {
            return Err(SdrError::Config(format!(
                "propagation window must be odd and >= 3, got {}",
                self.window
            )));
        }
        if self.channels == 0 || self.guidance_channels == 0 {
            return Err(SdrError::Config(
                "propagation channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parameter names of one layer under a prefix.
fn names(prefix: &str) -> [String; 7] {
    [
        format!("{prefix}.query.weight"),
        format!("{prefix}.query.gamma"),
        format!("{prefix}.query.beta"),
        format!("{prefix}.key.weight"),
        format!("{prefix}.key.gamma"),
        format!("{prefix}.key.beta"),
        format!("{prefix}.offset_bias"),
    ]
}

/// Inserts freshly initialized parameters for one layer. Projection weights
/// are fan-in scaled uniform, normalization is identity, the per-offset
/// attention bias starts at zero.
pub fn init_params<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &PropagationConfig,
) -> Result<()> {
    cfg.validate()?;
    let in_ch = 1 + cfg.guidance_channels;
    let [qw, qg, qb, kw, kg, kb, ob] = names(prefix);
    params.insert(qw, conv_init(rng, &[cfg.channels, in_ch, 1, 1], in_ch));
    params.insert(qg, Tensor::full(&[cfg.channels], T::ONE));
    params.insert(qb, Tensor::zeros(&[cfg.channels]));
    params.insert(kw, conv_init(rng, &[cfg.channels, in_ch, 1, 1], in_ch));
    params.insert(kg, Tensor::full(&[cfg.channels], T::ONE));
    params.insert(kb, Tensor::zeros(&[cfg.channels]));
    params.insert(ob, Tensor::zeros(&[cfg.window * cfg.window]));
    Ok(())
}

/// Pins measured pixels back to their measured depth:
/// `(1 - mask0) * depth + mask0 * sparse`. At a measured pixel the result is
/// bit-identical to the measurement; elsewhere it is bit-identical to the
/// input depth.
pub fn clamp_seeds<T: Scalar>(
    depth: &Tensor<T>,
    sparse: &Tensor<T>,
    mask0: &Tensor<T>,
) -> Result<Tensor<T>> {
    let keep = kernels::ew_mul(&kernels::affine(mask0, -T::ONE, T::ONE), depth)?;
    let pin = kernels::ew_mul(mask0, sparse)?;
    kernels::ew_add(&keep, &pin)
}

/// Tape twin of [`clamp_seeds`], recording the same op composition.
pub fn clamp_seeds_tape<T: Scalar>(
    tape: &mut Tape<T>,
    depth: ValueId,
    sparse: ValueId,
    mask0: ValueId,
) -> Result<ValueId> {
    let inv = tape.affine(mask0, -1.0, 1.0)?;
    let keep = tape.mul(inv, depth)?;
    let pin = tape.mul(mask0, sparse)?;
    tape.add(keep, pin)
}

/// One propagation step on plain tensors. `d_tilde` is the seed-clamped
/// depth `[h, w]`, `guidance` the feature map `[c, h, w]`, `mask` the current
/// propagation mask `[h, w]`. Returns the refined depth and the propagated
/// mask.
pub fn step<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &PropagationConfig,
    d_tilde: &Tensor<T>,
    guidance: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [qw, qg, qb, kw, kg, kb, ob] = names(prefix);
    let qk_in = kernels::concat_chan(&[d_tilde, guidance])?;
    let q = kernels::layer_norm_chan(
        &kernels::conv2d(&qk_in, params.get(&qw)?, None, 1, 0)?,
        params.get(&qg)?,
        params.get(&qb)?,
        LAYER_NORM_EPS,
    )?;
    let k = kernels::mul_broadcast_chan(
        &kernels::layer_norm_chan(
            &kernels::conv2d(&qk_in, params.get(&kw)?, None, 1, 0)?,
            params.get(&kg)?,
            params.get(&kb)?,
            LAYER_NORM_EPS,
        )?,
        mask,
    )?;
    let attn = kernels::window_attention(&q, &k, params.get(&ob)?, cfg.window)?;
    let refined = kernels::window_gather(&attn, d_tilde, cfg.window)?;
    let depth_out = blend(d_tilde, &refined, mask)?;
    let mask_out = kernels::window_gather(&attn, mask, cfg.window)?;
    Ok((depth_out, mask_out))
}

/// `(1 - mask) * d_tilde + mask * refined`. Where the mask is exactly zero
/// the input depth passes through bit-identically; where it is exactly one
/// the refined value replaces it bit-identically.
fn blend<T: Scalar>(
    d_tilde: &Tensor<T>,
    refined: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let keep = kernels::ew_mul(&kernels::affine(mask, -T::ONE, T::ONE), d_tilde)?;
    let take = kernels::ew_mul(mask, refined)?;
    kernels::ew_add(&keep, &take)
}

/// Tape handles of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub query_weight: ValueId,
    pub query_gamma: ValueId,
    pub query_beta: ValueId,
    pub key_weight: ValueId,
    pub key_gamma: ValueId,
    pub key_beta: ValueId,
    pub offset_bias: ValueId,
}

/// Records one layer's parameters on the tape under their set names, so
/// harvested gradients key back into the [`ParamSet`].
pub fn bind_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
) -> Result<LayerIds> {
    let [qw, qg, qb, kw, kg, kb, ob] = names(prefix);
    Ok(LayerIds {
        query_weight: tape.param(&qw, params.get(&qw)?.clone())?,
        query_gamma: tape.param(&qg, params.get(&qg)?.clone())?,
        query_beta: tape.param(&qb, params.get(&qb)?.clone())?,
        key_weight: tape.param(&kw, params.get(&kw)?.clone())?,
        key_gamma: tape.param(&kg, params.get(&kg)?.clone())?,
        key_beta: tape.param(&kb, params.get(&kb)?.clone())?,
        offset_bias: tape.param(&ob, params.get(&ob)?.clone())?,
    })
}

/// Tape twin of [`step`]: the identical composition, recorded for training.
pub fn step_tape<T: Scalar>(
    tape: &mut Tape<T>,
    ids: &LayerIds,
    cfg: &PropagationConfig,
    d_tilde: ValueId,
    guidance: ValueId,
    mask: ValueId,
) -> Result<(ValueId, ValueId)> {
    let qk_in = tape.concat_chan(&[d_tilde, guidance])?;
    let q_pre = tape.conv2d(qk_in, ids.query_weight, None, 1, 0)?;
    let q = tape.layer_norm_chan(q_pre, ids.query_gamma, ids.query_beta, LAYER_NORM_EPS)?;
    let k_pre = tape.conv2d(qk_in, ids.key_weight, None, 1, 0)?;
    let k_ln = tape.layer_norm_chan(k_pre, ids.key_gamma, ids.key_beta, LAYER_NORM_EPS)?;
    let k = tape.mul_broadcast_chan(k_ln, mask)?;
    let attn = tape.window_attention(q, k, ids.offset_bias, cfg.window)?;
    let refined = tape.window_gather(attn, d_tilde, cfg.window)?;
    let inv = tape.affine(mask, -1.0, 1.0)?;
    let keep = tape.mul(inv, d_tilde)?;
    let take = tape.mul(mask, refined)?;
    let depth_out = tape.add(keep, take)?;
    let mask_out = tape.window_gather(attn, mask, cfg.window)?;
    Ok((depth_out, mask_out))
}
