//! Guidance feature network.
//!
//! Produces the feature plane that steers every propagation step. The image
//! passes through a high-frequency extractor (a 3x3 convolution minus a 1x1
//! convolution, so flat regions vanish and edges survive), gets concatenated
//! with the sparse depth, its validity mask, and the initial depth, and runs
//! through a small convolutional encoder-decoder with skip connections. An
//! optional second head on the shared trunk predicts an initial depth map
//! for the mode where no external depth estimate is available.
//!
//! Inputs of any spatial size are reflect-padded up to a multiple of the
//! total downsampling factor and the output is cropped back, so the feature
//! plane always matches the image size.
//!
//! The network is built once per graph, so there is a single tape
//! implementation; the plain-tensor entry points run a throwaway tape.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::SdrError;
use crate::params::{conv_init, ParamSet};
use crate::plane::{DepthMap, PropagationMask, SparseDepth};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Images are RGB.
pub const IMAGE_CHANNELS: usize = 3;

/// Total spatial downsampling across the encoder: three stride-2 stages.
pub const STAGE_FACTOR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuidanceConfig {
    /// Channels of the high-frequency extractor.
    pub hf_channels: usize,
    /// Channels of the produced guidance feature.
    pub out_channels: usize,
    /// Encoder stage widths, shallow to deep.
    pub widths: [usize; 3],
    /// Whether the parameter set carries the initial-depth head.
    pub with_depth_head: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            hf_channels: 8,
            out_channels: 64,
            widths: [16, 32, 64],
            with_depth_head: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hf_channels == 0 || self.out_channels == 0 || self.widths.contains(&0) {
            return Err(SdrError::Config(
                "guidance channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Every parameter of the network: `(name, shape, Some(fan_in))` for weights
/// initialized fan-in uniform, `(name, shape, None)` for zero-initialized
/// biases. Shared by initialization and tape binding so the two cannot
/// disagree.
fn param_specs(prefix: &str, cfg: &GuidanceConfig) -> Vec<(String, Vec<usize>, Option<usize>)> {
    let [w0, w1, w2] = cfg.widths;
    let hf = cfg.hf_channels;
    let ic = hf + 3;
    let cg = cfg.out_channels;
    let mut specs = vec![
        (
            format!("{prefix}.hf.conv3"),
            vec![hf, IMAGE_CHANNELS, 3, 3],
            Some(IMAGE_CHANNELS * 9),
        ),
        (
            format!("{prefix}.hf.conv1"),
            vec![hf, IMAGE_CHANNELS, 1, 1],
            Some(IMAGE_CHANNELS),
        ),
    ];
    // Plain convolutions store weights [out_ch, in_ch, kh, kw]; transposed
    // convolutions store [in_ch, out_ch, kh, kw]. Biases draw from the same
    // fan-in uniform range as their weights: a bias of exactly zero would
    // put ReLU preactivations exactly on the kink wherever an input patch is
    // all zeros, which breaks finite-difference gradient checks.
    fn conv(specs: &mut Vec<(String, Vec<usize>, Option<usize>)>, name: String, out: usize, inp: usize) {
        specs.push((format!("{name}.weight"), vec![out, inp, 3, 3], Some(inp * 9)));
        specs.push((format!("{name}.bias"), vec![out], Some(inp * 9)));
    }
    fn up(specs: &mut Vec<(String, Vec<usize>, Option<usize>)>, name: String, inp: usize, out: usize) {
        specs.push((format!("{name}.weight"), vec![inp, out, 3, 3], Some(inp * 9)));
        specs.push((format!("{name}.bias"), vec![out], Some(inp * 9)));
    }
    conv(&mut specs, format!("{prefix}.enc0"), w0, ic);
    conv(&mut specs, format!("{prefix}.enc1.down"), w0, w0);
    conv(&mut specs, format!("{prefix}.enc1.conv"), w0, w0);
    conv(&mut specs, format!("{prefix}.enc2.down"), w1, w0);
    conv(&mut specs, format!("{prefix}.enc2.conv"), w1, w1);
    conv(&mut specs, format!("{prefix}.enc3.down"), w2, w1);
    conv(&mut specs, format!("{prefix}.enc3.conv"), w2, w2);
    up(&mut specs, format!("{prefix}.dec2.up"), w2, w1);
    conv(&mut specs, format!("{prefix}.dec2.conv"), w1, 2 * w1);
    up(&mut specs, format!("{prefix}.dec1.up"), w1, w0);
    conv(&mut specs, format!("{prefix}.dec1.conv"), w0, 2 * w0);
    up(&mut specs, format!("{prefix}.dec0.up"), w0, w0);
    conv(&mut specs, format!("{prefix}.dec0.conv"), w1, 2 * w0);
    conv(&mut specs, format!("{prefix}.out"), cg, w1);
    if cfg.with_depth_head {
        conv(&mut specs, format!("{prefix}.depth_head"), 1, w1);
    }
    specs
}

/// Inserts freshly initialized network parameters under the prefix.
pub fn init_params<T: Scalar>(
    params: &mut ParamSet<T>,
    rng: &mut impl Rng,
    prefix: &str,
    cfg: &GuidanceConfig,
) -> Result<()> {
    cfg.validate()?;
    for (name, shape, fan_in) in param_specs(prefix, cfg) {
        let tensor = match fan_in {
            Some(fan) => conv_init(rng, &shape, fan),
            None => Tensor::zeros(&shape),
        };
        params.insert(name, tensor);
    }
    Ok(())
}

struct Bound {
    ids: BTreeMap<String, ValueId>,
    prefix: String,
}

impl Bound {
    fn id(&self, suffix: &str) -> ValueId {
        self.ids[&format!("{}.{}", self.prefix, suffix)]
    }
}

fn bind<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &GuidanceConfig,
) -> Result<Bound> {
    let mut ids = BTreeMap::new();
    for (name, _, _) in param_specs(prefix, cfg) {
        ids.insert(name.clone(), tape.param(&name, params.get(&name)?.clone())?);
    }
    Ok(Bound {
        ids,
        prefix: prefix.to_string(),
    })
}

/// Tape handles produced by [`forward_tape`].
pub struct GuidanceOut {
    /// Guidance feature, `[out_channels, h, w]`.
    pub features: ValueId,
    /// Initial-depth prediction `[1, h, w]`, present when requested.
    pub depth: Option<ValueId>,
}

/// High-frequency extraction: 3x3 convolution over a reflect-padded image
/// minus a 1x1 convolution, so the result has the image's spatial size.
fn high_freq_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    image: ValueId,
) -> Result<ValueId> {
    let padded = tape.reflect_pad(image, 1, 1, 1, 1)?;
    let broad = tape.conv2d(padded, bound.id("hf.conv3"), None, 1, 0)?;
    let point = tape.conv2d(image, bound.id("hf.conv1"), None, 1, 0)?;
    tape.sub(broad, point)
}

/// Records the full network. `sparse`, `mask0`, and `d0` are rank-2 planes;
/// `image` is `[3, h, w]`. With `want_depth` the initial-depth head runs on
/// the shared trunk (its parameters must exist in the set).
pub fn forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &GuidanceConfig,
    image: ValueId,
    sparse: ValueId,
    mask0: ValueId,
    d0: ValueId,
    want_depth: bool,
) -> Result<GuidanceOut> {
    cfg.validate()?;
    let bind_cfg = GuidanceConfig {
        with_depth_head: want_depth,
        ..*cfg
    };
    let bound = bind(tape, params, prefix, &bind_cfg)?;

    let image_shape = tape.value(image).shape().to_vec();
    if image_shape.len() != 3 || image_shape[0] != IMAGE_CHANNELS {
        return Err(SdrError::ShapeMismatch {
            context: "guidance image",
            expected: vec![IMAGE_CHANNELS, 0, 0],
            found: image_shape,
        });
    }
    let (h, w) = (image_shape[1], image_shape[2]);

    let hf = high_freq_tape(tape, &bound, image)?;
    let cat = tape.concat_chan(&[hf, sparse, mask0, d0])?;

    // Reflect-pad to a multiple of the downsampling factor so every stride-2
    // stage halves exactly and skip shapes match on the way up.
    let pad_b = (STAGE_FACTOR - h % STAGE_FACTOR) % STAGE_FACTOR;
    let pad_r = (STAGE_FACTOR - w % STAGE_FACTOR) % STAGE_FACTOR;
    let x = if pad_b > 0 || pad_r > 0 {
        tape.reflect_pad(cat, 0, pad_b, 0, pad_r)?
    } else {
        cat
    };

    let conv_relu = |tape: &mut Tape<T>, input, name: &str, stride| -> Result<ValueId> {
        let out = tape.conv2d(
            input,
            bound.id(&format!("{name}.weight")),
            Some(bound.id(&format!("{name}.bias"))),
            stride,
            1,
        )?;
        tape.relu(out)
    };

    let e0 = conv_relu(tape, x, "enc0", 1)?;
    let t = conv_relu(tape, e0, "enc1.down", 2)?;
    let e1 = conv_relu(tape, t, "enc1.conv", 1)?;
    let t = conv_relu(tape, e1, "enc2.down", 2)?;
    let e2 = conv_relu(tape, t, "enc2.conv", 1)?;
    let t = conv_relu(tape, e2, "enc3.down", 2)?;
    let e3 = conv_relu(tape, t, "enc3.conv", 1)?;

    let up = |tape: &mut Tape<T>, input, name: &str| -> Result<ValueId> {
        tape.conv_transpose2d(
            input,
            bound.id(&format!("{name}.weight")),
            Some(bound.id(&format!("{name}.bias"))),
            2,
            1,
            1,
        )
    };

    let u2 = up(tape, e3, "dec2.up")?;
    let cat2 = tape.concat_chan(&[u2, e2])?;
    let d2 = conv_relu(tape, cat2, "dec2.conv", 1)?;
    let u1 = up(tape, d2, "dec1.up")?;
    let cat1 = tape.concat_chan(&[u1, e1])?;
    let d1 = conv_relu(tape, cat1, "dec1.conv", 1)?;
    let u0 = up(tape, d1, "dec0.up")?;
    let cat0 = tape.concat_chan(&[u0, e0])?;
    let feat = conv_relu(tape, cat0, "dec0.conv", 1)?;

    let g_full = tape.conv2d(
        feat,
        bound.id("out.weight"),
        Some(bound.id("out.bias")),
        1,
        1,
    )?;
    let features = if pad_b > 0 || pad_r > 0 {
        tape.crop(g_full, 0, 0, h, w)?
    } else {
        g_full
    };

    let depth = if want_depth {
        let raw = tape.conv2d(
            feat,
            bound.id("depth_head.weight"),
            Some(bound.id("depth_head.bias")),
            1,
            1,
        )?;
        let pos = tape.softplus(raw)?;
        Some(if pad_b > 0 || pad_r > 0 {
            tape.crop(pos, 0, 0, h, w)?
        } else {
            pos
        })
    } else {
        None
    };

    Ok(GuidanceOut { features, depth })
}

/// High-frequency features of an image, on plain tensors.
pub fn extract_high_freq<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    image: &Tensor<T>,
) -> Result<Tensor<T>> {
    let broad = crate::kernels::conv2d(
        &crate::kernels::reflect_pad2d(image, 1, 1, 1, 1)?,
        params.get(&format!("{prefix}.hf.conv3"))?,
        None,
        1,
        0,
    )?;
    let point = crate::kernels::conv2d(
        image,
        params.get(&format!("{prefix}.hf.conv1"))?,
        None,
        1,
        0,
    )?;
    crate::kernels::ew_sub(&broad, &point)
}

/// Guidance feature of (image, sparse depth, initial depth) on plain
/// tensors. Runs the tape builder on a throwaway tape, so inference and
/// training share one implementation.
pub fn guidance_forward<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &GuidanceConfig,
    image: &Tensor<T>,
    sparse: &SparseDepth<T>,
    d0: &DepthMap<T>,
) -> Result<Tensor<T>> {
    let mask0 = PropagationMask::from_sparse(sparse);
    let mut tape = Tape::new();
    let image_id = tape.constant(image.clone())?;
    let s_id = tape.constant(sparse.as_tensor().clone())?;
    let m_id = tape.constant(mask0.into_tensor())?;
    let d_id = tape.constant(d0.as_tensor().clone())?;
    let out = forward_tape(
        &mut tape, params, prefix, cfg, image_id, s_id, m_id, d_id, false,
    )?;
    Ok(tape.value(out.features).clone())
}

/// Joint guidance feature and initial-depth prediction for the mode without
/// an external depth estimate. The depth input channel is zero-filled and
/// the depth head runs on the shared trunk.
pub fn predict_initial_depth<T: Scalar>(
    params: &ParamSet<T>,
    prefix: &str,
    cfg: &GuidanceConfig,
    image: &Tensor<T>,
    sparse: &SparseDepth<T>,
) -> Result<(Tensor<T>, DepthMap<T>)> {
    let mask0 = PropagationMask::from_sparse(sparse);
    let (h, w) = (sparse.height(), sparse.width());
    let mut tape = Tape::new();
    let image_id = tape.constant(image.clone())?;
    let s_id = tape.constant(sparse.as_tensor().clone())?;
    let m_id = tape.constant(mask0.into_tensor())?;
    let d_id = tape.constant(Tensor::zeros(&[h, w]))?;
    let out = forward_tape(
        &mut tape, params, prefix, cfg, image_id, s_id, m_id, d_id, true,
    )?;
    let features = tape.value(out.features).clone();
    let depth = tape
        .value(out.depth.expect("depth requested"))
        .clone()
        .reshaped(&[h, w])?;
    Ok((features, DepthMap::new(depth)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> GuidanceConfig {
        GuidanceConfig {
            hf_channels: 2,
            out_channels: 5,
            widths: [2, 3, 4],
            with_depth_head: false,
        }
    }

    fn seeded_setup(
        seed: u64,
        h: usize,
        w: usize,
        cfg: &GuidanceConfig,
    ) -> (ParamSet<f64>, Tensor<f64>, SparseDepth<f64>, DepthMap<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_params(&mut params, &mut rng, "guide", cfg).unwrap();
        let image: Tensor<f64> =
            crate::params::uniform_tensor(&mut rng, &[IMAGE_CHANNELS, h, w], 0.5);
        let image = image.map(|v| v + 0.5);
        let sparse = SparseDepth::from_points(
            h,
            w,
            &[(1, 1, 2.0), (h - 2, w - 2, 3.5), (h / 2, w / 2, 1.25)],
        )
        .unwrap();
        let d0: Tensor<f64> = crate::params::uniform_tensor(&mut rng, &[h, w], 0.5);
        let d0 = DepthMap::new(d0.map(|v| v + 2.0)).unwrap();
        (params, image, sparse, d0)
    }

    #[test]
    fn high_freq_of_constant_image_vanishes() {
        // Averaging 3x3 against identity 1x1, channel-diagonal: any constant
        // image has no high-frequency content anywhere, borders included.
        let cfg = GuidanceConfig {
            hf_channels: 3,
            ..tiny_cfg()
        };
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&mut params, &mut rng, "guide", &cfg).unwrap();
        let mut w3 = Tensor::zeros(&[3, 3, 3, 3]);
        let mut w1 = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            for k in 0..9 {
                w3.data_mut()[(c * 3 + c) * 9 + k] = 1.0 / 9.0;
            }
            w1.data_mut()[c * 3 + c] = 1.0;
        }
        params.insert("guide.hf.conv3", w3);
        params.insert("guide.hf.conv1", w1);

        let image = Tensor::from_vec(
            &[3, 6, 7],
            (0..3)
                .flat_map(|c| std::iter::repeat(0.3 + 0.2 * c as f64).take(42))
                .collect(),
        )
        .unwrap();
        let hf = extract_high_freq(&params, "guide", &image).unwrap();
        for &v in hf.data() {
            assert!(v.abs() < 1e-12, "residual high frequency {v}");
        }
    }

    #[test]
    fn high_freq_impulse_is_local() {
        let cfg = GuidanceConfig {
            hf_channels: 1,
            ..tiny_cfg()
        };
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&mut params, &mut rng, "guide", &cfg).unwrap();
        // 3x3 kernel acting on the first image channel only, zero 1x1.
        let mut w3 = Tensor::zeros(&[1, 3, 3, 3]);
        for (k, v) in [0.5, -1.0, 0.25, 2.0, 3.0, -0.5, 1.0, 0.75, -2.0]
            .iter()
            .enumerate()
        {
            w3.data_mut()[k] = *v;
        }
        params.insert("guide.hf.conv3", w3.clone());
        params.insert("guide.hf.conv1", Tensor::zeros(&[1, 3, 1, 1]));

        let mut image = Tensor::zeros(&[3, 9, 9]);
        let idx = image.idx3(0, 4, 4);
        image.data_mut()[idx] = 1.0;
        let hf = extract_high_freq(&params, "guide", &image).unwrap();
        // Cross-correlation of an impulse reproduces the kernel reversed
        // around the impulse, zero elsewhere.
        for y in 0..9 {
            for x in 0..9 {
                let v = hf.at3(0, y, x);
                if (3..=5).contains(&y) && (3..=5).contains(&x) {
                    let expect = w3.data()[(5 - y) * 3 + (5 - x)];
                    assert_eq!(v, expect, "at ({y}, {x})");
                } else {
                    assert_eq!(v, 0.0, "at ({y}, {x})");
                }
            }
        }
    }

    #[test]
    fn zero_kernels_give_zero_high_freq() {
        let mut params = ParamSet::<f64>::new();
        params.insert("guide.hf.conv3", Tensor::zeros(&[2, 3, 3, 3]));
        params.insert("guide.hf.conv1", Tensor::zeros(&[2, 3, 1, 1]));
        let image = Tensor::full(&[3, 5, 5], 0.7);
        let hf = extract_high_freq(&params, "guide", &image).unwrap();
        assert!(hf.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_keeps_spatial_size_across_awkward_sizes() {
        let cfg = tiny_cfg();
        for &(h, w) in &[(16usize, 16usize), (17, 23), (40, 33), (16, 21)] {
            let (params, image, sparse, d0) = seeded_setup(5, h, w, &cfg);
            let g = guidance_forward(&params, "guide", &cfg, &image, &sparse, &d0).unwrap();
            assert_eq!(g.shape(), &[cfg.out_channels, h, w], "size {h}x{w}");
        }
    }

    #[test]
    fn zero_params_give_zero_output() {
        let cfg = tiny_cfg();
        let (mut params, image, sparse, d0) = seeded_setup(6, 17, 19, &cfg);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let g = guidance_forward(&params, "guide", &cfg, &image, &sparse, &d0).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg();
        let (params, image, sparse, d0) = seeded_setup(7, 20, 18, &cfg);
        let a = guidance_forward(&params, "guide", &cfg, &image, &sparse, &d0).unwrap();
        let b = guidance_forward(&params, "guide", &cfg, &image, &sparse, &d0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_through_network_match_finite_differences() {
        use crate::gradcheck::{grad_check, GradCheckConfig};
        use crate::plane::PropagationMask;

        let cfg = tiny_cfg();
        let (params, image, sparse, d0) = seeded_setup(11, 11, 9, &cfg);
        let mask0 = PropagationMask::from_sparse(&sparse);
        let target: Tensor<f64> = crate::params::uniform_tensor(
            &mut ChaCha8Rng::seed_from_u64(99),
            &[cfg.out_channels, 11, 9],
            1.0,
        );

        let run = |p: &ParamSet<f64>| -> Result<f64> {
            let mut tape = Tape::new();
            let i_id = tape.constant(image.clone())?;
            let s_id = tape.constant(sparse.as_tensor().clone())?;
            let m_id = tape.constant(mask0.as_tensor().clone())?;
            let d_id = tape.constant(d0.as_tensor().clone())?;
            let out = forward_tape(&mut tape, p, "guide", &cfg, i_id, s_id, m_id, d_id, false)?;
            let t_id = tape.constant(target.clone())?;
            let valid = tape.constant(Tensor::full(target.shape(), 1.0))?;
            let loss = tape.loss_l1l2(out.features, t_id, valid)?;
            Ok(tape.scalar(loss))
        };

        let mut tape = Tape::new();
        let i_id = tape.constant(image.clone()).unwrap();
        let s_id = tape.constant(sparse.as_tensor().clone()).unwrap();
        let m_id = tape.constant(mask0.as_tensor().clone()).unwrap();
        let d_id = tape.constant(d0.as_tensor().clone()).unwrap();
        let out =
            forward_tape(&mut tape, &params, "guide", &cfg, i_id, s_id, m_id, d_id, false)
                .unwrap();
        let t_id = tape.constant(target.clone()).unwrap();
        let valid = tape.constant(Tensor::full(target.shape(), 1.0)).unwrap();
        let loss = tape.loss_l1l2(out.features, t_id, valid).unwrap();
        let grads = tape.backward(loss).unwrap();
        let analytic = tape.param_grads(&grads);

        let report = grad_check(
            &params,
            &analytic,
            run,
            &GradCheckConfig {
                eps: 1e-6,
                max_coords: 6,
                seed: 31,
            },
        )
        .unwrap();
        assert!(
            report.passes(1e-3),
            "max rel err {} at {:?}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_coord
        );
    }

    #[test]
    fn depth_head_output_is_positive_and_shares_trunk() {
        let cfg = GuidanceConfig {
            with_depth_head: true,
            ..tiny_cfg()
        };
        let (params, image, sparse, _) = seeded_setup(13, 16, 16, &cfg);
        let (g, depth) = predict_initial_depth(&params, "guide", &cfg, &image, &sparse).unwrap();
        assert_eq!(g.shape(), &[cfg.out_channels, 16, 16]);
        assert_eq!(depth.as_tensor().shape(), &[16, 16]);
        assert!(depth.as_tensor().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn zero_trunk_head_bias_gives_constant_softplus_depth() {
        let cfg = GuidanceConfig {
            with_depth_head: true,
            ..tiny_cfg()
        };
        let (mut params, image, sparse, _) = seeded_setup(14, 16, 16, &cfg);
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let beta = 0.6;
        params
            .get_mut("guide.depth_head.bias")
            .unwrap()
            .data_mut()[0] = beta;
        let (_, depth) = predict_initial_depth(&params, "guide", &cfg, &image, &sparse).unwrap();
        let expect = (1.0 + beta.exp()).ln();
        for &v in depth.as_tensor().data() {
            assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
        }
    }

    #[test]
    fn missing_head_params_error_when_depth_requested() {
        let cfg = tiny_cfg();
        let (params, image, sparse, _) = seeded_setup(15, 16, 16, &cfg);
        let head_cfg = GuidanceConfig {
            with_depth_head: true,
            ..cfg
        };
        let err =
            predict_initial_depth(&params, "guide", &head_cfg, &image, &sparse).unwrap_err();
        assert!(matches!(err, SdrError::Config(_)), "{err:?}");
    }

    #[test]
    fn forward_matches_stepwise_replay() {
        // Replays the trunk with direct kernel calls and compares against
        // the tape builder, both in 64-bit.
        use crate::kernels as k;

        let cfg = tiny_cfg();
        let (params, image, sparse, d0) = seeded_setup(21, 16, 16, &cfg);
        let g_fast = guidance_forward(&params, "guide", &cfg, &image, &sparse, &d0).unwrap();

        let p = |s: &str| params.get(&format!("guide.{s}")).unwrap();
        let mask0 = PropagationMask::from_sparse(&sparse);
        let hf = k::ew_sub(
            &k::conv2d(
                &k::reflect_pad2d(&image, 1, 1, 1, 1).unwrap(),
                p("hf.conv3"),
                None,
                1,
                0,
            )
            .unwrap(),
            &k::conv2d(&image, p("hf.conv1"), None, 1, 0).unwrap(),
        )
        .unwrap();
        let cat = k::concat_chan(&[
            &hf,
            sparse.as_tensor(),
            mask0.as_tensor(),
            d0.as_tensor(),
        ])
        .unwrap();
        let cr = |x: &Tensor<f64>, name: &str, s: usize| {
            k::relu(
                &k::conv2d(
                    x,
                    p(&format!("{name}.weight")),
                    Some(p(&format!("{name}.bias"))),
                    s,
                    1,
                )
                .unwrap(),
            )
        };
        let e0 = cr(&cat, "enc0", 1);
        let e1 = cr(&cr(&e0, "enc1.down", 2), "enc1.conv", 1);
        let e2 = cr(&cr(&e1, "enc2.down", 2), "enc2.conv", 1);
        let e3 = cr(&cr(&e2, "enc3.down", 2), "enc3.conv", 1);
        let upf = |x: &Tensor<f64>, name: &str| {
            k::conv_transpose2d(
                x,
                p(&format!("{name}.weight")),
                Some(p(&format!("{name}.bias"))),
                2,
                1,
                1,
            )
            .unwrap()
        };
        let d2 = cr(
            &k::concat_chan(&[&upf(&e3, "dec2.up"), &e2]).unwrap(),
            "dec2.conv",
            1,
        );
        let d1 = cr(
            &k::concat_chan(&[&upf(&d2, "dec1.up"), &e1]).unwrap(),
            "dec1.conv",
            1,
        );
        let feat = cr(
            &k::concat_chan(&[&upf(&d1, "dec0.up"), &e0]).unwrap(),
            "dec0.conv",
            1,
        );
        let g_replay =
            k::conv2d(&feat, p("out.weight"), Some(p("out.bias")), 1, 1).unwrap();
        assert_eq!(g_fast, g_replay);
    }
}
