//! Training losses and evaluation metrics for refined depth maps.
//!
//! Validity convention: a ground-truth value of exactly zero marks a pixel
//! as invalid, and every loss and metric here skips such pixels. All
//! metrics of one report are computed over the identical valid set.

use crate::{kernels, DepthMap, Result, Scalar, SdrError, Tensor};

/// Multiplier applied to the root of the log-depth error variance.
pub const SILOG_ALPHA: f64 = 10.0;
/// Weight of the squared-mean term in the log-depth error variance.
pub const SILOG_LAMBDA: f64 = 0.85;

/// Indicator tensor marking pixels where the ground truth is valid.
pub fn validity_mask<T: Scalar>(gt: &DepthMap<T>) -> Tensor<T> {
    gt.as_tensor()
        .map(|v| if v > T::ZERO { T::ONE } else { T::ZERO })
}

/// Combined absolute and squared error averaged over valid pixels.
pub fn loss_l1l2<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<T> {
    kernels::loss_l1l2(pred.as_tensor(), gt.as_tensor(), &validity_mask(gt))
}

/// Scale-invariant logarithmic loss over valid pixels.
pub fn loss_silog<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    alpha: T,
    lambda: T,
) -> Result<T> {
    kernels::loss_silog(
        pred.as_tensor(),
        gt.as_tensor(),
        &validity_mask(gt),
        alpha,
        lambda,
    )
}

/// Unit in which linear depth errors are reported. Inverse-depth errors are
/// always reported in 1/km regardless of this choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthUnits {
    Meters,
    Millimeters,
}

/// How the root-mean-square error is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RmseNormalization {
    /// `sqrt(sum(e^2) / n)`, the conventional definition. Default.
    SqrtOfMean,
    /// `sqrt(sum(e^2)) / n`, an alternative normalization some benchmark
    /// tables print; kept selectable for comparisons against such tables.
    RootSumOverCount,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricOptions {
    pub units: DepthUnits,
    pub rmse_norm: RmseNormalization,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            units: DepthUnits::Meters,
            rmse_norm: RmseNormalization::SqrtOfMean,
        }
    }
}

/// Standard depth-completion metrics over one prediction. Linear errors are
/// in the configured unit, inverse errors in 1/km, ratio accuracies in
/// percent of valid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub mae: f64,
    pub irmse: f64,
    pub imae: f64,
    pub valid_count: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "rmse,rel,delta1,delta2,delta3,mae,irmse,imae,valid_count";

    /// Single-line `key=value` record, suitable for logs.
    pub fn to_line(&self) -> String {
        format!(
            "rmse={:.6} rel={:.6} delta1={:.3} delta2={:.3} delta3={:.3} \
             mae={:.6} irmse={:.6} imae={:.6} valid_count={}",
            self.rmse,
            self.rel,
            self.delta1,
            self.delta2,
            self.delta3,
            self.mae,
            self.irmse,
            self.imae,
            self.valid_count
        )
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.9},{:.9},{:.6},{:.6},{:.6},{:.9},{:.9},{:.9},{}",
            self.rmse,
            self.rel,
            self.delta1,
            self.delta2,
            self.delta3,
            self.mae,
            self.irmse,
            self.imae,
            self.valid_count
        )
    }

    /// Field-wise average over several reports; valid counts are summed.
    /// Returns `None` for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> Option<MetricReport> {
        if reports.is_empty() {
            return None;
        }
        let inv = 1.0 / reports.len() as f64;
        let mut acc = MetricReport {
            rmse: 0.0,
            rel: 0.0,
            delta1: 0.0,
            delta2: 0.0,
            delta3: 0.0,
            mae: 0.0,
            irmse: 0.0,
            imae: 0.0,
            valid_count: 0,
        };
        for r in reports {
            acc.rmse += r.rmse * inv;
            acc.rel += r.rel * inv;
            acc.delta1 += r.delta1 * inv;
            acc.delta2 += r.delta2 * inv;
            acc.delta3 += r.delta3 * inv;
            acc.mae += r.mae * inv;
            acc.irmse += r.irmse * inv;
            acc.imae += r.imae * inv;
            acc.valid_count += r.valid_count;
        }
        Some(acc)
    }
}

/// Metrics over all pixels with valid ground truth.
pub fn compute_metrics<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    opts: MetricOptions,
) -> Result<MetricReport> {
    metrics_impl(pred, gt, None, opts)
}

/// Metrics restricted to pixels where both the ground truth and `region`
/// (same height and width, positive entries select) are valid. Used to
/// evaluate hole filling on the hole interior only.
pub fn compute_metrics_masked<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    region: &Tensor<T>,
    opts: MetricOptions,
) -> Result<MetricReport> {
    if region.shape() != gt.as_tensor().shape() {
        return Err(SdrError::ShapeMismatch {
            context: "compute_metrics_masked region",
            expected: gt.as_tensor().shape().to_vec(),
            found: region.shape().to_vec(),
        });
    }
    metrics_impl(pred, gt, Some(region), opts)
}

fn metrics_impl<T: Scalar>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    region: Option<&Tensor<T>>,
    opts: MetricOptions,
) -> Result<MetricReport> {
    if pred.as_tensor().shape() != gt.as_tensor().shape() {
        return Err(SdrError::ShapeMismatch {
            context: "compute_metrics",
            expected: gt.as_tensor().shape().to_vec(),
            found: pred.as_tensor().shape().to_vec(),
        });
    }
    let thresholds = [1.25, 1.25f64.powi(2), 1.25f64.powi(3)];
    let floor = kernels::SILOG_DEPTH_FLOOR;

    let mut n = 0usize;
    let mut sum_sq = 0.0f64;
    let mut sum_abs = 0.0f64;
    let mut sum_rel = 0.0f64;
    let mut sum_inv_sq = 0.0f64;
    let mut sum_inv_abs = 0.0f64;
    let mut hits = [0usize; 3];
    for i in 0..gt.as_tensor().len() {
        if gt.as_tensor().data()[i] <= T::ZERO {
            continue;
        }
        if let Some(r) = region {
            if r.data()[i] <= T::ZERO {
                continue;
            }
        }
        let g = gt.as_tensor().data()[i].to_f64();
        let p = pred.as_tensor().data()[i].to_f64();
        let e = p - g;
        sum_sq += e * e;
        sum_abs += e.abs();
        sum_rel += e.abs() / g;
        let ie = 1.0 / p.max(floor) - 1.0 / g;
        sum_inv_sq += ie * ie;
        sum_inv_abs += ie.abs();
        // A non-positive prediction can never be ratio-accurate.
        let ratio = if p > 0.0 {
            (p / g).max(g / p)
        } else {
            f64::INFINITY
        };
        for (k, &t) in thresholds.iter().enumerate() {
            if ratio < t {
                hits[k] += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(SdrError::NoValidPixels);
    }
    let nf = n as f64;
    let linear_scale = match opts.units {
        DepthUnits::Meters => 1.0,
        DepthUnits::Millimeters => 1000.0,
    };
    // Inverse depth is accumulated in 1/m; 1 per meter is 1000 per kilometer.
    let inverse_scale = 1000.0;
    let rmse = match opts.rmse_norm {
        RmseNormalization::SqrtOfMean => (sum_sq / nf).sqrt(),
        RmseNormalization::RootSumOverCount => sum_sq.sqrt() / nf,
    };
    Ok(MetricReport {
        rmse: rmse * linear_scale,
        rel: sum_rel / nf,
        delta1: 100.0 * hits[0] as f64 / nf,
        delta2: 100.0 * hits[1] as f64 / nf,
        delta3: 100.0 * hits[2] as f64 / nf,
        mae: sum_abs / nf * linear_scale,
        irmse: (sum_inv_sq / nf).sqrt() * inverse_scale,
        imae: sum_inv_abs / nf * inverse_scale,
        valid_count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, data: Vec<f64>) -> DepthMap<f64> {
        DepthMap::new(Tensor::from_vec(&[h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn l1l2_hand_case() {
        let pred = map(1, 2, vec![1.0, 3.0]);
        let gt = map(1, 2, vec![1.0, 1.0]);
        assert_eq!(loss_l1l2(&pred, &gt).unwrap(), 3.0);
        assert_eq!(loss_l1l2(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn l1l2_needs_a_valid_pixel() {
        let pred = map(1, 2, vec![1.0, 3.0]);
        let gt = map(1, 2, vec![0.0, 0.0]);
        assert!(matches!(
            loss_l1l2(&pred, &gt),
            Err(SdrError::NoValidPixels)
        ));
    }

    #[test]
    fn silog_closed_form_for_uniform_log_offset() {
        let gt = map(2, 2, vec![0.7, 1.3, 2.9, 4.2]);
        let pred = DepthMap::new(gt.as_tensor().map(|v| v * std::f64::consts::E)).unwrap();
        let loss = loss_silog(&pred, &gt, SILOG_ALPHA, SILOG_LAMBDA).unwrap();
        assert_abs_diff_eq!(loss, 10.0 * 0.15f64.sqrt(), epsilon = 1e-3);
    }

    #[test]
    fn metrics_hand_case() {
        let pred = map(1, 2, vec![2.0, 4.0]);
        let gt = map(1, 2, vec![1.0, 4.0]);
        let r = compute_metrics(&pred, &gt, MetricOptions::default()).unwrap();
        assert_abs_diff_eq!(r.rel, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.delta1, 50.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.rmse, 0.5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(r.valid_count, 2);
    }

    #[test]
    fn perfect_prediction_zeroes_every_error() {
        let gt = map(2, 3, vec![1.0, 2.0, 0.0, 4.0, 5.0, 6.0]);
        let r = compute_metrics(&gt, &gt, MetricOptions::default()).unwrap();
        assert_eq!(r.rel, 0.0);
        assert_eq!(r.rmse, 0.0);
        assert_eq!(r.irmse, 0.0);
        assert_eq!(r.delta1, 100.0);
        assert_eq!(r.delta3, 100.0);
        assert_eq!(r.valid_count, 5);
    }

    #[test]
    fn inverse_errors_convert_to_per_kilometer() {
        let pred = map(1, 1, vec![1.0]);
        let gt = map(1, 1, vec![2.0]);
        let r = compute_metrics(&pred, &gt, MetricOptions::default()).unwrap();
        // |1/1 - 1/2| = 0.5 per meter, i.e. 500 per kilometer.
        assert_abs_diff_eq!(r.imae, 500.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.irmse, 500.0, epsilon = 1e-9);
    }

    #[test]
    fn millimeter_units_scale_linear_errors_only() {
        let pred = map(1, 2, vec![2.0, 4.0]);
        let gt = map(1, 2, vec![1.0, 4.0]);
        let meters = compute_metrics(&pred, &gt, MetricOptions::default()).unwrap();
        let mm = compute_metrics(
            &pred,
            &gt,
            MetricOptions {
                units: DepthUnits::Millimeters,
                ..MetricOptions::default()
            },
        )
        .unwrap();
        assert_abs_diff_eq!(mm.rmse, meters.rmse * 1000.0, epsilon = 1e-9);
        assert_abs_diff_eq!(mm.mae, meters.mae * 1000.0, epsilon = 1e-9);
        assert_eq!(mm.rel, meters.rel);
        assert_eq!(mm.irmse, meters.irmse);
    }

    #[test]
    fn alternative_rmse_normalization_divides_by_count() {
        let pred = map(2, 2, vec![2.0, 4.0, 1.0, 0.5]);
        let gt = map(2, 2, vec![1.0, 4.0, 2.0, 1.5]);
        let conventional = compute_metrics(&pred, &gt, MetricOptions::default()).unwrap();
        let alt = compute_metrics(
            &pred,
            &gt,
            MetricOptions {
                rmse_norm: RmseNormalization::RootSumOverCount,
                ..MetricOptions::default()
            },
        )
        .unwrap();
        let n = conventional.valid_count as f64;
        assert_abs_diff_eq!(alt.rmse, conventional.rmse / n.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn masked_metrics_match_metrics_of_the_selected_region() {
        let pred = map(2, 2, vec![2.0, 4.0, 1.0, 0.5]);
        let gt = map(2, 2, vec![1.0, 4.0, 2.0, 1.5]);
        let region = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let masked =
            compute_metrics_masked(&pred, &gt, &region, MetricOptions::default()).unwrap();
        let sub_pred = map(1, 2, vec![2.0, 0.5]);
        let sub_gt = map(1, 2, vec![1.0, 1.5]);
        let direct = compute_metrics(&sub_pred, &sub_gt, MetricOptions::default()).unwrap();
        assert_eq!(masked, direct);
    }

    #[test]
    fn mean_averages_fields_and_sums_counts() {
        let pred = map(1, 2, vec![2.0, 4.0]);
        let gt = map(1, 2, vec![1.0, 4.0]);
        let r = compute_metrics(&pred, &gt, MetricOptions::default()).unwrap();
        let zero = compute_metrics(&gt, &gt, MetricOptions::default()).unwrap();
        let m = MetricReport::mean(&[r, zero]).unwrap();
        assert_abs_diff_eq!(m.rmse, r.rmse / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.delta1, (r.delta1 + 100.0) / 2.0, epsilon = 1e-12);
        assert_eq!(m.valid_count, 4);
        assert!(MetricReport::mean(&[]).is_none());
    }

    #[test]
    fn csv_row_matches_header_arity() {
        let gt = map(1, 1, vec![1.0]);
        let r = compute_metrics(&gt, &gt, MetricOptions::default()).unwrap();
        let fields = r.to_csv_row().split(',').count();
        assert_eq!(fields, MetricReport::CSV_HEADER.split(',').count());
    }

    /// Second implementation with a different accumulation strategy
    /// (collect per-pixel records first, then reduce) used as an oracle.
    fn metrics_reference(pred: &DepthMap<f64>, gt: &DepthMap<f64>) -> MetricReport {
        let mut errs = Vec::new();
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                let g = gt.at(y, x);
                if g > 0.0 {
                    errs.push((pred.at(y, x), g));
                }
            }
        }
        let n = errs.len() as f64;
        let mean = |f: &dyn Fn(f64, f64) -> f64| errs.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
        let pct = |k: f64| {
            100.0
                * errs
                    .iter()
                    .filter(|&&(p, g)| p > 0.0 && (p / g).max(g / p) < k)
                    .count() as f64
                / n
        };
        MetricReport {
            rmse: mean(&|p, g| (p - g) * (p - g)).sqrt(),
            rel: mean(&|p, g| (p - g).abs() / g),
            delta1: pct(1.25),
            delta2: pct(1.5625),
            delta3: pct(1.953125),
            mae: mean(&|p, g| (p - g).abs()),
            irmse: mean(&|p, g| {
                let ie = 1.0 / p.max(kernels::SILOG_DEPTH_FLOOR) - 1.0 / g;
                ie * ie
            })
            .sqrt()
                * 1000.0,
            imae: mean(&|p, g| (1.0 / p.max(kernels::SILOG_DEPTH_FLOOR) - 1.0 / g).abs()) * 1000.0,
            valid_count: errs.len(),
        }
    }

    proptest! {
        #[test]
        fn metrics_agree_with_reference(seed in 0u64..400) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let h = rng.gen_range(1..6);
            let w = rng.gen_range(1..6);
            let gt_data: Vec<f64> = (0..h * w)
                .map(|_| {
                    if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.5..10.0) }
                })
                .collect();
            prop_assume!(gt_data.iter().any(|&g| g > 0.0));
            let pred_data: Vec<f64> =
                (0..h * w).map(|_| rng.gen_range(0.1..12.0)).collect();
            let gt = map(h, w, gt_data);
            let pred = map(h, w, pred_data);
            let got = compute_metrics(&pred, &gt, MetricOptions::default()).unwrap();
            let want = metrics_reference(&pred, &gt);
            prop_assert!((got.rmse - want.rmse).abs() < 1e-9);
            prop_assert!((got.rel - want.rel).abs() < 1e-9);
            prop_assert!((got.delta1 - want.delta1).abs() < 1e-9);
            prop_assert!((got.delta2 - want.delta2).abs() < 1e-9);
            prop_assert!((got.delta3 - want.delta3).abs() < 1e-9);
            prop_assert!((got.mae - want.mae).abs() < 1e-9);
            prop_assert!((got.irmse - want.irmse).abs() < 1e-6);
            prop_assert!((got.imae - want.imae).abs() < 1e-9);
            prop_assert!(got.delta1 >= 0.0 && got.delta1 <= 100.0);
            prop_assert!(got.delta3 >= got.delta1 - 1e-12);
        }
    }
}
