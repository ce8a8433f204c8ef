//! Brute-force reference for one propagation step.
//!
//! Everything is written as flat scalar loops over pixels, window offsets,
//! and channels, without going through the shared kernels. Accumulation
//! follows the same order as the optimized path (offsets row-major in
//! `(dy, dx)`, channels in index order, bias added before the channel dot
//! product), so the two implementations agree to the last bit and any
//! disagreement in a test points at a real logic difference.

use crate::params::ParamSet;
use crate::propagation::{PropagationConfig, LAYER_NORM_EPS};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Mirror of [`crate::propagation::step`] computed with naive loops.
pub fn step_naive<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &PropagationConfig,
    d_tilde: &Tensor<T>,
    guidance: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (d_tilde.shape()[0], d_tilde.shape()[1]);
    let l = cfg.channels;
    let cg = cfg.guidance_channels;
    let p = cfg.window;
    let half = (p / 2) as isize;

    let qw = params.get(&format!("{prefix}.query.weight"))?;
    let qg = params.get(&format!("{prefix}.query.gamma"))?;
    let qb = params.get(&format!("{prefix}.query.beta"))?;
    let kw = params.get(&format!("{prefix}.key.weight"))?;
    let kg = params.get(&format!("{prefix}.key.gamma"))?;
    let kb = params.get(&format!("{prefix}.key.beta"))?;
    let ob = params.get(&format!("{prefix}.offset_bias"))?;

    // Input at pixel (y, x) is [d_tilde; guidance], channel 0 the depth.
    let input_at = |c: usize, y: usize, x: usize| -> T {
        if c == 0 {
            d_tilde.at2(y, x)
        } else {
            guidance.at3(c - 1, y, x)
        }
    };

    // 1x1 projection followed by per-pixel layer normalization.
    let project = |weight: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>| -> Tensor<T> {
        let in_ch = 1 + cg;
        let mut out = Tensor::zeros(&[l, h, w]);
        for y in 0..h {
            for x in 0..w {
                let mut pre = vec![T::ZERO; l];
                for (lc, pv) in pre.iter_mut().enumerate() {
                    let mut acc = T::ZERO;
                    for c in 0..in_ch {
                        acc += input_at(c, y, x) * weight.data()[lc * in_ch + c];
                    }
                    *pv = acc;
                }
                let inv_l = T::ONE / T::from_f64(l as f64);
                let mut mean = T::ZERO;
                for &v in &pre {
                    mean += v;
                }
                mean *= inv_l;
                let mut var = T::ZERO;
                for &v in &pre {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_l;
                let inv_std = T::ONE / (var + T::from_f64(LAYER_NORM_EPS)).sqrt();
                for (lc, &v) in pre.iter().enumerate() {
                    let idx = out.idx3(lc, y, x);
                    out.data_mut()[idx] = gamma.data()[lc] * (v - mean) * inv_std + beta.data()[lc];
                }
            }
        }
        out
    };

    let q = project(qw, qg, qb);
    let k_unmasked = project(kw, kg, kb);
    // Keys are feature-zeroed where the mask is zero.
    let mut k = k_unmasked;
    for lc in 0..l {
        for y in 0..h {
            for x in 0..w {
                let idx = k.idx3(lc, y, x);
                k.data_mut()[idx] = k.data()[idx] * mask.at2(y, x);
            }
        }
    }

    let mut depth_out = Tensor::zeros(&[h, w]);
    let mut mask_out = Tensor::zeros(&[h, w]);
    let mut logits = vec![T::ZERO; p * p];
    for y in 0..h {
        for x in 0..w {
            // Logits of in-bounds offsets: bias plus the channel dot product.
            let mut max = None::<T>;
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = ((dy + half) as usize) * p + (dx + half) as usize;
                    let mut dot = ob.data()[t];
                    for lc in 0..l {
                        dot += q.at3(lc, y, x) * k.at3(lc, ky as usize, kx as usize);
                    }
                    logits[t] = dot;
                    max = Some(match max {
                        Some(m) => m.max(dot),
                        None => dot,
                    });
                }
            }
            let max = max.expect("center offset is always in bounds");
            let mut denom = T::ZERO;
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = ((dy + half) as usize) * p + (dx + half) as usize;
                    logits[t] = (logits[t] - max).exp();
                    denom += logits[t];
                }
            }
            // Attention-weighted window sums of depth and mask.
            let mut refined = T::ZERO;
            let mut mask_acc = T::ZERO;
            for dy in -half..=half {
                let ky = y as isize + dy;
                if ky < 0 || ky >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let kx = x as isize + dx;
                    if kx < 0 || kx >= w as isize {
                        continue;
                    }
                    let t = ((dy + half) as usize) * p + (dx + half) as usize;
                    let a = logits[t] / denom;
                    refined += a * d_tilde.at2(ky as usize, kx as usize);
                    mask_acc += a * mask.at2(ky as usize, kx as usize);
                }
            }
            let m_here = mask.at2(y, x);
            let didx = depth_out.idx2(y, x);
            depth_out.data_mut()[didx] =
                (T::ONE - m_here) * d_tilde.at2(y, x) + m_here * refined;
            let midx = mask_out.idx2(y, x);
            mask_out.data_mut()[midx] = mask_acc;
        }
    }
    Ok((depth_out, mask_out))
}
