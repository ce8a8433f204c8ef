//! Domain newtypes for the refinement pipeline: dense depth maps, sparse
//! depth measurements, and the propagation mask that tracks how far
//! measurement information has spread.

use crate::error::SdrError;
use crate::tensor::{Scalar, Tensor};
use crate::Result;

/// Dense per-pixel depth in meters. Rank 2, finite everywhere. A value of
/// zero marks a pixel without ground truth; predictions are positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T: Scalar>(Tensor<T>);

impl<T: Scalar> DepthMap<T> {
    pub fn new(map: Tensor<T>) -> Result<Self> {
        if map.rank() != 2 {
            return Err(SdrError::ShapeMismatch {
                context: "DepthMap",
                expected: vec![0, 0],
                found: map.shape().to_vec(),
            });
        }
        if !map.all_finite() {
            return Err(SdrError::NonFinite {
                node: "DepthMap".into(),
            });
        }
        Ok(DepthMap(map))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn at(&self, y: usize, x: usize) -> T {
        self.0.at2(y, x)
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap(self.0.cast())
    }
}

/// Sparse depth measurements on the image grid, stored densely: positive
/// entries are measurements, zeros are unmeasured pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseDepth<T: Scalar> {
    dense: Tensor<T>,
    count: usize,
}

impl<T: Scalar> SparseDepth<T> {
    /// Builds from `(row, col, depth)` triples. Measurements must be strictly
    /// positive, in bounds, and at distinct pixels.
    pub fn from_points(
        height: usize,
        width: usize,
        points: &[(usize, usize, T)],
    ) -> Result<Self> {
        let mut dense = Tensor::zeros(&[height, width]);
        let mut count = 0;
        for &(row, col, depth) in points {
            if row >= height || col >= width {
                return Err(SdrError::Config(format!(
                    "measurement at ({row}, {col}) outside {height}x{width} image"
                )));
            }
            if !(depth > T::ZERO) || !depth.is_finite() {
                return Err(SdrError::Config(format!(
                    "measurement at ({row}, {col}) must be a positive finite depth, got {depth}"
                )));
            }
            let idx = dense.idx2(row, col);
            if dense.data()[idx] > T::ZERO {
                return Err(SdrError::Config(format!(
                    "duplicate measurement at ({row}, {col})"
                )));
            }
            dense.data_mut()[idx] = depth;
            count += 1;
        }
        Ok(SparseDepth { dense, count })
    }

    /// Builds from a dense map whose positive entries are the measurements.
    pub fn from_dense(dense: Tensor<T>) -> Result<Self> {
        if dense.rank() != 2 {
            return Err(SdrError::ShapeMismatch {
                context: "SparseDepth",
                expected: vec![0, 0],
                found: dense.shape().to_vec(),
            });
        }
        if !dense.all_finite() {
            return Err(SdrError::NonFinite {
                node: "SparseDepth".into(),
            });
        }
        if dense.data().iter().any(|&v| v < T::ZERO) {
            return Err(SdrError::Config(
                "sparse depth entries must be zero or positive".into(),
            ));
        }
        let count = dense.data().iter().filter(|&&v| v > T::ZERO).count();
        Ok(SparseDepth { dense, count })
    }

    pub fn height(&self) -> usize {
        self.dense.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.dense.shape()[1]
    }

    /// Number of measurements.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.dense
    }

    /// Measurement triples in row-major order.
    pub fn points(&self) -> Vec<(usize, usize, T)> {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(self.count);
        for y in 0..h {
            for x in 0..w {
                let v = self.dense.at2(y, x);
                if v > T::ZERO {
                    out.push((y, x, v));
                }
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> SparseDepth<U> {
        SparseDepth {
            dense: self.dense.cast(),
            count: self.count,
        }
    }
}

/// Per-pixel confidence that measurement information has reached the pixel.
/// Values live in `[0, 1]`; the initial mask is exactly one at measured
/// pixels and exactly zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMask<T: Scalar>(Tensor<T>);

impl<T: Scalar> PropagationMask<T> {
    /// Initial mask of a measurement set.
    pub fn from_sparse(sparse: &SparseDepth<T>) -> Self {
        PropagationMask(
            sparse
                .as_tensor()
                .map(|v| if v > T::ZERO { T::ONE } else { T::ZERO }),
        )
    }

    /// Wraps an evolved mask. Entries must stay within `[0, 1]`.
    pub fn new(map: Tensor<T>) -> Result<Self> {
        if map.rank() != 2 {
            return Err(SdrError::ShapeMismatch {
                context: "PropagationMask",
                expected: vec![0, 0],
                found: map.shape().to_vec(),
            });
        }
        if map.data().iter().any(|&v| !(v >= T::ZERO && v <= T::ONE)) {
            return Err(SdrError::Config(
                "propagation mask entries must lie in [0, 1]".into(),
            ));
        }
        Ok(PropagationMask(map))
    }

    pub fn as_tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    /// Fraction of pixels with strictly positive mask value, and the mean
    /// mask value. Both grow as propagation spreads.
    pub fn support(&self) -> (f64, f64) {
        let n = self.0.len() as f64;
        let positive = self.0.data().iter().filter(|&&v| v > T::ZERO).count() as f64;
        let mean: f64 = self.0.data().iter().map(|v| v.to_f64()).sum::<f64>() / n;
        (positive / n, mean)
    }
}
