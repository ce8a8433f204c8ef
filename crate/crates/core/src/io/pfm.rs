//! Dense depth maps on disk as grayscale PFM: a three-line text header
//! (`Pf`, then `width height`, then a scale whose sign encodes byte order)
//! followed by 32-bit float rows stored bottom-to-top. Lossless for f32
//! data, so write→read round trips are bit-exact.

use std::path::Path;

use crate::{DepthMap, Result, Scalar, SdrError, Tensor};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> SdrError {
    SdrError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Encodes a depth map as little-endian grayscale PFM bytes.
pub fn to_pfm_bytes<T: Scalar>(map: &DepthMap<T>) -> Vec<u8> {
    let (h, w) = (map.height(), map.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            let v = map.at(y, x).to_f64() as f32;
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes `map` to `path` as grayscale little-endian PFM.
pub fn write_pfm<T: Scalar>(path: &Path, map: &DepthMap<T>) -> Result<()> {
    std::fs::write(path, to_pfm_bytes(map))?;
    Ok(())
}

/// Decodes grayscale PFM bytes. Both byte orders are accepted; the scale's
/// magnitude is ignored. Values must be finite.
pub fn from_pfm_bytes<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<DepthMap<T>> {
    let mut offset = 0usize;
    let mut next_line = |line_no: usize| -> Result<&str> {
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(path, line_no, "unterminated header line"))?;
        let text = std::str::from_utf8(&rest[..end])
            .map_err(|_| parse_err(path, line_no, "header is not UTF-8"))?;
        offset += end + 1;
        Ok(text.trim_end_matches('\r'))
    };

    let magic = next_line(1)?;
    match magic {
        "Pf" => {}
        "PF" => return Err(parse_err(path, 1, "color PFM is not supported")),
        other => {
            return Err(parse_err(
                path,
                1,
                format!("expected grayscale PFM magic \"Pf\", found {other:?}"),
            ))
        }
    }
    let dims = next_line(2)?.to_string();
    let mut it = dims.split_whitespace();
    let (w, h) = match (it.next(), it.next(), it.next()) {
        (Some(w), Some(h), None) => {
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| parse_err(path, 2, format!("bad dimension {s:?}")))
            };
            (parse(w)?, parse(h)?)
        }
        _ => {
            return Err(parse_err(
                path,
                2,
                format!("expected \"width height\", found {dims:?}"),
            ))
        }
    };
    if w == 0 || h == 0 {
        return Err(parse_err(path, 2, "dimensions must be positive"));
    }
    let scale_text = next_line(3)?.to_string();
    let scale: f64 = scale_text
        .trim()
        .parse()
        .map_err(|_| parse_err(path, 3, format!("bad scale {scale_text:?}")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(parse_err(path, 3, "scale must be finite and nonzero"));
    }
    let little_endian = scale < 0.0;

    let payload = &bytes[offset..];
    let expected = h * w * 4;
    if payload.len() != expected {
        return Err(parse_err(
            path,
            4,
            format!(
                "payload holds {} bytes, expected {expected} for {w}x{h} floats",
                payload.len()
            ),
        ));
    }
    let mut data = vec![T::ZERO; h * w];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().expect("chunks_exact(4)");
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() {
            return Err(parse_err(path, 4, format!("non-finite value at sample {i}")));
        }
        // File rows run bottom-to-top.
        let y = h - 1 - i / w;
        let x = i % w;
        data[y * w + x] = T::from_f64(v as f64);
    }
    DepthMap::new(Tensor::from_vec(&[h, w], data)?)
}

/// Reads a grayscale PFM file into a depth map.
pub fn read_pfm<T: Scalar>(path: &Path) -> Result<DepthMap<T>> {
    let bytes = std::fs::read(path)?;
    from_pfm_bytes(path, &bytes)
}
