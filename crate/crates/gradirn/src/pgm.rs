//! Import of 8-bit grayscale PGM images (binary `P5` and plain `P2`).

use std::path::Path;

use gradirn_core::{Real, Tensor};

use crate::error::{Error, Result};

/// Parses a PGM buffer into a `[1, H, W]` tensor scaled by `1 / maxval`.
pub fn decode<T: Real>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let err = |reason: &str| Error::Pgm {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0;
    let mut token = || -> Option<&[u8]> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| &bytes[start..pos])
    };
    let magic = token().ok_or_else(|| err("empty file"))?.to_vec();
    let mut number = |what: &str| -> Result<usize> {
        let t = token().ok_or_else(|| err(&format!("missing {what}")))?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(&format!("invalid {what}")))
    };
    let (w, h, maxval) = (number("width")?, number("height")?, number("maxval")?);
    if w == 0 || h == 0 {
        return Err(err("empty image"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(err("only 8-bit images are supported"));
    }
    let scale = 1.0 / maxval as f64;
    let values: Vec<u8> = match magic.as_slice() {
        b"P5" => {
            // exactly one whitespace byte separates the header from the raster
            let start = pos + 1;
            let raster = bytes.get(start..start + w * h).ok_or_else(|| err("truncated raster"))?;
            raster.to_vec()
        }
        b"P2" => (0..w * h)
            .map(|_| number("pixel").and_then(|v| u8::try_from(v).map_err(|_| err("pixel out of range"))))
            .collect::<Result<_>>()?,
        _ => return Err(err("not a P2/P5 graymap")),
    };
    if values.iter().any(|&v| v as usize > maxval) {
        return Err(err("pixel exceeds maxval"));
    }
    Ok(Tensor::new(
        vec![1, h, w],
        values.iter().map(|&v| T::from_f64(v as f64 * scale)).collect(),
    )?)
}

pub fn read<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_and_plain() {
        let mut b = b"P5\n# comment\n3 2\n255\n".to_vec();
        b.extend_from_slice(&[0, 51, 255, 102, 0, 0]);
        let t: Tensor<f64> = decode(&b, Path::new("a.pgm")).unwrap();
        assert_eq!(t.shape(), &[1, 2, 3]);
        assert_eq!(t.data()[2], 1.0);
        assert_eq!(t.data()[1], 0.2);
        let p = b"P2 2 1 4\n0 4\n";
        let t: Tensor<f32> = decode(p, Path::new("b.pgm")).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode::<f64>(b"P6 1 1 255\n\0\0\0", Path::new("x")).is_err());
        assert!(decode::<f64>(b"P5 2 2 255\n\0", Path::new("x")).is_err());
        assert!(decode::<f64>(b"P2 1 1 3\n9", Path::new("x")).is_err());
    }
}
