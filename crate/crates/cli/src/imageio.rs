//! PNG image handling and atomic file writes.
//!
//! Color images travel as `[3, h, w]` tensors with values in `[0, 1]`,
//! matching the refinement pipeline's input convention. All writers
//! encode to memory first and publish with a rename, so readers never
//! observe a half-written file.

use std::io::ErrorKind;
use std::path::Path;

use image::{ImageEncoder, ImageReader};

use sdr_core::{DepthMap, Result, Scalar, SdrError, Tensor};

/// Wraps a decode/encode failure as an input-data error with the path.
fn data_err(path: &Path, msg: impl std::fmt::Display) -> SdrError {
    SdrError::Io(std::io::Error::new(
        ErrorKind::InvalidData,
        format!("{}: {msg}", path.display()),
    ))
}

/// Writes `bytes` to `path` atomically via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .map_err(|e| SdrError::Io(e.error))
        .map(|_| ())
}

/// Reads an RGB PNG into a `[3, h, w]` tensor with values in `[0, 1]`.
/// Grayscale and alpha inputs are converted to RGB.
pub fn read_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let reader = ImageReader::open(path).map_err(|e| data_err(path, e))?;
    let img = reader
        .decode()
        .map_err(|e| data_err(path, format!("not a decodable image: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::ZERO; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] =
                T::from_f64(px.0[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a `[3, h, w]` tensor with values in `[0, 1]` as an RGB PNG.
pub fn write_image<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != 3 {
        return Err(SdrError::ShapeMismatch {
            context: "png image",
            expected: vec![3, 0, 0],
            found: image.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let data = image.data();
    let mut raw = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * h * w + y * w + x].to_f64().clamp(0.0, 1.0);
                raw[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(&raw, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| data_err(path, e))?;
    write_atomic(path, &bytes)
}

/// Writes `|prediction - ground truth|` as a grayscale PNG, normalized so
/// the largest error maps to white. A perfectly matching prediction is all
/// black.
pub fn write_error_map<T: Scalar>(
    path: &Path,
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(SdrError::ShapeMismatch {
            context: "error map",
            expected: vec![gt.height(), gt.width()],
            found: vec![pred.height(), pred.width()],
        });
    }
    let (h, w) = (gt.height(), gt.width());
    let p = pred.as_tensor().data();
    let g = gt.as_tensor().data();
    let errs: Vec<f64> = p
        .iter()
        .zip(g)
        .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
        .collect();
    let peak = errs.iter().cloned().fold(0.0f64, f64::max);
    let raw: Vec<u8> = errs
        .iter()
        .map(|e| {
            if peak > 0.0 {
                (e / peak * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(&raw, w as u32, h as u32, image::ExtendedColorType::L8)
        .map_err(|e| data_err(path, e))?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let t = Tensor::<f32>::from_vec(
            &[3, 2, 2],
            (0..12).map(|i| i as f32 / 11.0).collect(),
        )
        .unwrap();
        write_image(&path, &t).unwrap();
        let back = read_image::<f32>(&path).unwrap();
        assert_eq!(back.shape(), &[3, 2, 2]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn corrupt_png_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        let err = read_image::<f32>(&path).unwrap_err();
        assert_eq!(err.kind(), sdr_core::error::ErrorKind::Data);
    }

    #[test]
    fn error_map_is_black_on_exact_match_and_scales_to_white() {
        let dir = tempfile::tempdir().unwrap();
        let gt = DepthMap::new(Tensor::<f32>::from_vec(&[2, 2], vec![1.0; 4]).unwrap()).unwrap();
        let mut v = vec![1.0f32; 4];
        v[3] = 3.0;
        let pred = DepthMap::new(Tensor::from_vec(&[2, 2], v).unwrap()).unwrap();
        let path = dir.path().join("err.png");
        write_error_map(&path, &pred, &gt).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.get_pixel(0, 0).0[0], 0);
        assert_eq!(img.get_pixel(1, 1).0[0], 255);

        let same = dir.path().join("same.png");
        write_error_map(&same, &gt, &gt).unwrap();
        let img = image::open(&same).unwrap().to_luma8();
        assert!(img.pixels().all(|p| p.0[0] == 0));
    }
}
