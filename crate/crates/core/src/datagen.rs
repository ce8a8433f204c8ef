//! Synthetic data: piecewise-planar scenes with matching images, a
//! monocular-estimator error simulator, and the sparse sampling protocols
//! (scattered points, scan lines, hole masking).
//!
//! Everything here is a pure function of its seed. Scenes are drawn in
//! `f64` and cast to the requested scalar type at the end, so an `f32`
//! scene matches its `f64` twin to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{DepthMap, Result, Scalar, SdrError, SparseDepth, Tensor};

/// Closest representable scene depth in meters.
pub const DEPTH_MIN: f64 = 0.5;
/// Farthest representable scene depth in meters.
pub const DEPTH_MAX: f64 = 10.0;

/// Pixel count of the reference evaluation resolution that the sparsity
/// protocols are quoted at; counts are rescaled by area when generating at
/// other sizes.
pub const REFERENCE_AREA: usize = 228 * 304;

/// A generated scene: color image in `[0, 1]` and its ground-truth depth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T: Scalar> {
    /// `[3, h, w]`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub gt_depth: DepthMap<T>,
    pub seed: u64,
}

/// Generates a scene: a slanted background plane with up to six box-shaped
/// foreground objects composited by depth, and an image of per-segment
/// albedo shaded by the depth gradient so that image edges line up with
/// depth edges. `complexity` in `[0, 1]` scales the object count; zero
/// produces the bare background plane.
pub fn gen_scene<T: Scalar>(seed: u64, h: usize, w: usize, complexity: f64) -> Result<Scene<T>> {
    if h < 16 || w < 16 {
        return Err(SdrError::Config(format!(
            "scene size must be at least 16x16, got {h}x{w}"
        )));
    }
    let complexity = complexity.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Background: slanted plane with bounded slope so the clamp below only
    // triggers for foreground geometry.
    let base = rng.gen_range(2.0..6.0);
    let slope_x = rng.gen_range(-1.5..1.5);
    let slope_y = rng.gen_range(-1.5..1.5);
    let mut depth = vec![0.0f64; h * w];
    let mut segment = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            depth[y * w + x] = base
                + slope_x * (x as f64 / (w - 1) as f64 - 0.5)
                + slope_y * (y as f64 / (h - 1) as f64 - 0.5);
        }
    }

    let n_boxes = if complexity == 0.0 {
        0
    } else {
        2 + (complexity * 4.0).round() as usize
    };
    for b in 0..n_boxes {
        let bh = rng.gen_range(h / 6..=h / 2);
        let bw = rng.gen_range(w / 6..=w / 2);
        let top = rng.gen_range(0..=h - bh);
        let left = rng.gen_range(0..=w - bw);
        let z = rng.gen_range(0.8..7.0);
        let tilt_x = rng.gen_range(-0.8..0.8);
        let tilt_y = rng.gen_range(-0.8..0.8);
        for y in top..top + bh {
            for x in left..left + bw {
                let zb = z
                    + tilt_x * ((x - left) as f64 / bw as f64 - 0.5)
                    + tilt_y * ((y - top) as f64 / bh as f64 - 0.5);
                // Nearer surface wins, like a z-buffer.
                if zb < depth[y * w + x] {
                    depth[y * w + x] = zb;
                    segment[y * w + x] = b + 1;
                }
            }
        }
    }
    for d in depth.iter_mut() {
        *d = d.clamp(DEPTH_MIN, DEPTH_MAX);
    }

    let image = render_image(&mut rng, &depth, &segment, n_boxes + 1, h, w);
    let gt = Tensor::from_vec(&[h, w], depth)?.cast::<T>();
    Ok(Scene {
        image: image.cast(),
        gt_depth: DepthMap::new(gt)?,
        seed,
    })
}

/// Flat albedo per segment, Lambert-style shading from the local surface
/// slope, a dark seam where the depth jumps, and a little pixel noise.
fn render_image(
    rng: &mut ChaCha8Rng,
    depth: &[f64],
    segment: &[usize],
    n_segments: usize,
    h: usize,
    w: usize,
) -> Tensor<f64> {
    let albedo: Vec<[f64; 3]> = (0..n_segments)
        .map(|_| {
            [
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
                rng.gen_range(0.15..0.95),
            ]
        })
        .collect();
    let lx = rng.gen_range(-0.4..0.4);
    let ly = rng.gen_range(-0.4..0.4);
    let l_norm = (lx * lx + ly * ly + 1.0).sqrt();

    let at = |y: usize, x: usize| depth[y * w + x];
    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let dzdx = (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1)))
                / if x == 0 || x == w - 1 { 1.0 } else { 2.0 };
            let dzdy = (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x))
                / if y == 0 || y == h - 1 { 1.0 } else { 2.0 };
            let n_norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            let lambert = ((-dzdx * lx - dzdy * ly + 1.0) / (n_norm * l_norm)).max(0.0);
            let shade = 0.35 + 0.65 * lambert.min(1.0);
            // Depth discontinuities darken the pixel, which is what makes
            // image edges informative about depth edges.
            let gmag = dzdx.abs() + dzdy.abs();
            let seam = 1.0 / (1.0 + 2.0 * gmag);
            let a = albedo[segment[y * w + x]];
            for c in 0..3 {
                let noise = rng.gen_range(-0.02..0.02);
                let idx = image.idx3(c, y, x);
                image.data_mut()[idx] = (a[c] * shade * seam + noise).clamp(0.0, 1.0);
            }
        }
    }
    image
}

/// Multiplies depth by `exp(bias)` per pixel. Exposed so the simulator's
/// closed form can be checked directly: a constant field `b` scales the
/// whole map by `e^b`.
pub fn apply_bias_field<T: Scalar>(gt: &DepthMap<T>, bias: &Tensor<T>) -> Result<DepthMap<T>> {
    if bias.shape() != gt.as_tensor().shape() {
        return Err(SdrError::ShapeMismatch {
            context: "apply_bias_field",
            expected: gt.as_tensor().shape().to_vec(),
            found: bias.shape().to_vec(),
        });
    }
    let mut out = gt.as_tensor().clone();
    for (d, b) in out.data_mut().iter_mut().zip(bias.data()) {
        *d = *d * b.exp();
    }
    DepthMap::new(out)
}

/// Simulates a monocular depth estimate of `gt`: a smooth multiplicative
/// low-frequency bias field with `|bias| <= severity * 0.3`, then a light
/// blur that mostly shows at depth edges. Severity zero returns the input
/// unchanged; the output is always strictly positive.
pub fn simulate_mde<T: Scalar>(gt: &DepthMap<T>, seed: u64, severity: f64) -> Result<DepthMap<T>> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SdrError::Config(format!(
            "severity must be in [0, 1], got {severity}"
        )));
    }
    if severity == 0.0 {
        return Ok(gt.clone());
    }
    let (h, w) = (gt.height(), gt.width());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Three low-frequency cosine modes, rescaled to the exact amplitude cap.
    let modes: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.5..2.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let mut bias = vec![0.0f64; h * w];
    let mut peak = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            let mut b = 0.0;
            for &[amp, fy, fx, phase] in &modes {
                b += amp
                    * (std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64)
                        + phase)
                        .cos();
            }
            bias[y * w + x] = b;
            peak = peak.max(b.abs());
        }
    }
    if peak > 0.0 {
        let scale = severity * 0.3 / peak;
        for b in bias.iter_mut() {
            *b *= scale;
        }
    }
    let bias = Tensor::from_vec(&[h, w], bias)?.cast::<T>();
    let biased = apply_bias_field(gt, &bias)?;
    Ok(DepthMap::new(blend_blur(
        biased.as_tensor(),
        T::from_f64(0.3 * severity),
    ))?)
}

/// `(1 - amount) * d + amount * blur3(d)` with a clamped-edge 3x3 binomial
/// blur. A convex mix of positive depths stays positive.
fn blend_blur<T: Scalar>(d: &Tensor<T>, amount: T) -> Tensor<T> {
    let (h, w) = (d.shape()[0], d.shape()[1]);
    let weights = [T::from_f64(0.25), T::from_f64(0.5), T::from_f64(0.25)];
    let mut rows = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::ZERO;
            for (k, &wk) in weights.iter().enumerate() {
                let xx = (x + k).saturating_sub(1).min(w - 1);
                acc += wk * d.at2(y, xx);
            }
            let i = rows.idx2(y, x);
            rows.data_mut()[i] = acc;
        }
    }
    let mut out = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::ZERO;
            for (k, &wk) in weights.iter().enumerate() {
                let yy = (y + k).saturating_sub(1).min(h - 1);
                acc += wk * rows.at2(yy, x);
            }
            let i = out.idx2(y, x);
            out.data_mut()[i] = (T::ONE - amount) * d.at2(y, x) + amount * acc;
        }
    }
    out
}

/// Draws exactly `s` measurement positions uniformly without replacement
/// from the valid (positive) pixels of `gt`.
pub fn sample_points<T: Scalar>(gt: &DepthMap<T>, s: usize, seed: u64) -> Result<SparseDepth<T>> {
    let valid: Vec<usize> = gt
        .as_tensor()
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > T::ZERO)
        .map(|(i, _)| i)
        .collect();
    if s == 0 || s > valid.len() {
        return Err(SdrError::Config(format!(
            "cannot sample {s} points from {} valid pixels",
            valid.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dense = Tensor::zeros(&[gt.height(), gt.width()]);
    for chosen in rand::seq::index::sample(&mut rng, valid.len(), s) {
        let i = valid[chosen];
        dense.data_mut()[i] = gt.as_tensor().data()[i];
    }
    SparseDepth::from_dense(dense)
}

/// Keeps `n_lines` evenly spaced rows of `gt` (seeded fractional offset)
/// and zeros everything else, imitating horizontal scan lines.
pub fn sample_lines<T: Scalar>(
    gt: &DepthMap<T>,
    n_lines: usize,
    seed: u64,
) -> Result<SparseDepth<T>> {
    let h = gt.height();
    if n_lines == 0 || n_lines > h {
        return Err(SdrError::Config(format!(
            "cannot sample {n_lines} lines from {h} rows"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spacing = h as f64 / n_lines as f64;
    let offset = rng.gen_range(0.0..spacing);
    let mut dense = Tensor::zeros(&[h, gt.width()]);
    for k in 0..n_lines {
        let row = (offset + k as f64 * spacing).floor() as usize;
        for x in 0..gt.width() {
            let i = dense.idx2(row, x);
            dense.data_mut()[i] = gt.at(row, x);
        }
    }
    SparseDepth::from_dense(dense)
}

/// Axis-aligned region used for hole-masking experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HoleRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl HoleRect {
    /// The centered rectangle covering half the extent in each dimension.
    pub fn centered_half(h: usize, w: usize) -> HoleRect {
        HoleRect {
            top: h / 4,
            left: w / 4,
            height: h / 2,
            width: w / 2,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// Indicator plane of the rectangle on an `h` x `w` grid: one inside,
    /// zero outside.
    pub fn indicator<T: Scalar>(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        if self.top + self.height > h || self.left + self.width > w {
            return Err(SdrError::Config(format!(
                "hole rectangle {self:?} exceeds the {h}x{w} grid"
            )));
        }
        let mut out = Tensor::zeros(&[h, w]);
        for y in self.top..self.top + self.height {
            for x in self.left..self.left + self.width {
                let i = out.idx2(y, x);
                out.data_mut()[i] = T::ONE;
            }
        }
        Ok(out)
    }
}

/// Removes every measurement inside `rect`. Also returns the hole
/// indicator plane (one inside the rectangle) so metrics can be restricted
/// to the region that had to be filled without measurements.
pub fn mask_hole<T: Scalar>(
    sparse: &SparseDepth<T>,
    rect: HoleRect,
) -> Result<(SparseDepth<T>, Tensor<T>)> {
    let (h, w) = (sparse.height(), sparse.width());
    if rect.top + rect.height > h || rect.left + rect.width > w {
        return Err(SdrError::Config(format!(
            "hole rectangle {rect:?} exceeds the {h}x{w} grid"
        )));
    }
    let mut dense = sparse.as_tensor().clone();
    let mut hole = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            if rect.contains(y, x) {
                let i = dense.idx2(y, x);
                dense.data_mut()[i] = T::ZERO;
                hole.data_mut()[i] = T::ONE;
            }
        }
    }
    Ok((SparseDepth::from_dense(dense)?, hole))
}

/// Rescales a measurement count quoted at the reference resolution to an
/// `h x w` grid by area, with a floor of one.
pub fn scale_sparsity(s: usize, h: usize, w: usize) -> usize {
    ((s * h * w) as f64 / REFERENCE_AREA as f64).round().max(1.0) as usize
}

/// Training-time sparsity draw for the scattered-point protocol: uniform
/// in `[10, 1000]` at the reference resolution, rescaled by area.
pub fn draw_train_sparsity(rng: &mut impl Rng, h: usize, w: usize) -> usize {
    scale_sparsity(rng.gen_range(10..=1000), h, w)
}

/// Training-time line-count draw: one of {4, 8, 16, 32, 64}, capped at the
/// number of rows.
pub fn draw_train_lines(rng: &mut impl Rng, h: usize) -> usize {
    let choices = [4usize, 8, 16, 32, 64];
    let allowed: Vec<usize> = choices.iter().copied().filter(|&n| n <= h).collect();
    if allowed.is_empty() {
        return 1;
    }
    allowed[rng.gen_range(0..allowed.len())]
}
