//! GTF, a minimal binary tensor format.
//!
//! Layout: the ASCII magic `GTF1`, a dtype code byte (0 = f32, 1 = f64,
//! 2 = u8), the number of dimensions as one byte, two zero bytes, one
//! little-endian `u32` per dimension, then the row-major little-endian
//! payload.

use std::fs;
use std::path::Path;

use gradirn_core::{DType, LabelMask, Real, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"GTF1";
pub const HEADER_LEN: usize = 8;

/// Decoded contents of a GTF file.
#[derive(Debug, Clone, PartialEq)]
pub enum GtfData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl GtfData {
    pub fn code(&self) -> u8 {
        match self {
            GtfData::F32(_) => 0,
            GtfData::F64(_) => 1,
            GtfData::U8 { .. } => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        dtype_name(self.code())
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            GtfData::F32(t) => t.shape(),
            GtfData::F64(t) => t.shape(),
            GtfData::U8 { shape, .. } => shape,
        }
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => GtfData::F32(t.cast()),
            DType::F64 => GtfData::F64(t.cast()),
        }
    }

    pub fn from_mask(m: &LabelMask) -> Self {
        GtfData::U8 {
            shape: vec![m.height(), m.width()],
            data: m.grid().to_vec(),
        }
    }
}

fn dtype_name(code: u8) -> &'static str {
    match code {
        0 => "f32",
        1 => "f64",
        2 => "u8",
        _ => "unknown",
    }
}

pub fn encode(data: &GtfData) -> Vec<u8> {
    let shape = data.shape();
    let elem = [4, 8, 1][data.code() as usize];
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * shape.len() + elem * numel);
    out.extend_from_slice(&MAGIC);
    out.push(data.code());
    out.push(u8::try_from(shape.len()).expect("at most 255 dimensions"));
    out.extend_from_slice(&[0, 0]);
    for &d in shape {
        out.extend_from_slice(&u32::try_from(d).expect("dimension fits in u32").to_le_bytes());
    }
    match data {
        GtfData::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        GtfData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        GtfData::U8 { data, .. } => out.extend_from_slice(data),
    }
    out
}

/// Parses a GTF byte buffer; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<GtfData> {
    let short = |expected| Error::LengthMismatch {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < HEADER_LEN {
        return Err(short(HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let code = bytes[4];
    let elem = match code {
        0 => 4,
        1 => 8,
        2 => 1,
        _ => {
            return Err(Error::UnknownDtype {
                path: path.to_path_buf(),
                code,
            })
        }
    };
    let ndim = bytes[5] as usize;
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::ReservedBytes {
            path: path.to_path_buf(),
        });
    }
    let dims_end = HEADER_LEN + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(short(dims_end));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let expected = dims_end + elem * numel;
    if bytes.len() != expected {
        return Err(short(expected));
    }
    let payload = &bytes[dims_end..];
    Ok(match code {
        0 => GtfData::F32(Tensor::new(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )?),
        1 => GtfData::F64(Tensor::new(
            shape,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )?),
        _ => GtfData::U8 {
            shape,
            data: payload.to_vec(),
        },
    })
}

pub fn write(path: &Path, data: &GtfData) -> Result<()> {
    fs::write(path, encode(data)).map_err(Error::io(path))
}

pub fn read(path: &Path) -> Result<GtfData> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    write(path, &GtfData::from_tensor(t))
}

/// Reads a floating-point tensor, converting between f32 and f64 if needed.
pub fn read_tensor<T: Real>(path: &Path) -> Result<Tensor<T>> {
    match read(path)? {
        GtfData::F32(t) => Ok(t.cast()),
        GtfData::F64(t) => Ok(t.cast()),
        GtfData::U8 { .. } => Err(Error::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "floating-point",
            found: "u8",
        }),
    }
}

/// Reads a floating-point tensor stored with exactly the dtype of `T`.
pub fn read_tensor_exact<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let data = read(path)?;
    let want = match T::DTYPE {
        DType::F32 => 0,
        DType::F64 => 1,
    };
    if data.code() != want {
        return Err(Error::DtypeMismatch {
            path: path.to_path_buf(),
            expected: dtype_name(want),
            found: data.kind(),
        });
    }
    match data {
        GtfData::F32(t) => Ok(t.cast()),
        GtfData::F64(t) => Ok(t.cast()),
        GtfData::U8 { .. } => unreachable!(),
    }
}

pub fn write_mask(path: &Path, m: &LabelMask) -> Result<()> {
    write(path, &GtfData::from_mask(m))
}

/// Reads a `[H, W]` u8 label map; the label set is its nonzero values.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    match read(path)? {
        GtfData::U8 { shape, data } => {
            let [h, w] = shape[..] else {
                return Err(Error::Dataset(format!(
                    "{}: label maps must be 2-dimensional, got {shape:?}",
                    path.display()
                )));
            };
            Ok(LabelMask::new(h, w, data)?)
        }
        other => Err(Error::DtypeMismatch {
            path: path.to_path_buf(),
            expected: "u8",
            found: other.kind(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_f32_is_32_bytes() {
        let t = Tensor::new(vec![2, 2], vec![1.0f32, -2.0, 0.5, 3.25]).unwrap();
        let bytes = encode(&GtfData::F32(t.clone()));
        assert_eq!(bytes.len(), 4 + 1 + 1 + 2 + 8 + 16);
        assert_eq!(&bytes[..8], b"GTF1\x00\x02\x00\x00");
        assert_eq!(decode(&bytes, Path::new("x")).unwrap(), GtfData::F32(t));
    }

    #[test]
    fn round_trips_all_dtypes() {
        let f = Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin() * 1e-300);
        let b = encode(&GtfData::F64(f.clone()));
        assert_eq!(decode(&b, Path::new("x")).unwrap(), GtfData::F64(f));
        let m = LabelMask::new(2, 3, vec![0, 1, 2, 2, 0, 7]).unwrap();
        let b = encode(&GtfData::from_mask(&m));
        match decode(&b, Path::new("x")).unwrap() {
            GtfData::U8 { shape, data } => {
                assert_eq!(shape, vec![2, 3]);
                assert_eq!(data, m.grid());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let good = encode(&GtfData::F32(t));
        let p = Path::new("x");
        assert!(matches!(
            decode(&good[..good.len() - 1], p),
            Err(Error::LengthMismatch { .. })
        ));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p), Err(Error::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad, p), Err(Error::UnknownDtype { code: 9, .. })));
        let mut bad = good.clone();
        bad[7] = 1;
        assert!(matches!(decode(&bad, p), Err(Error::ReservedBytes { .. })));
        assert!(matches!(decode(&good[..5], p), Err(Error::LengthMismatch { .. })));
    }
}
