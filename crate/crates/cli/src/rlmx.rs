//! RLMX, a minimal little-endian matrix container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "RLMX"
//!      4     1  version (1)
//!      5     1  dtype (0 = f64, 1 = f32)
//!      6     4  rows, u32 LE
//!     10     4  cols, u32 LE
//!     14     .  rows * cols scalars, row-major, LE
//! ```
//!
//! `f32` payloads are widened to `f64` on load; writing the widened matrix
//! back as `f32` reproduces the original bytes.

use std::fs;
use std::path::Path;

use rrqr_lora::Matrix;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"RLMX";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F64 => 0,
            Dtype::F32 => 1,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::F32),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("byte offset {offset}: {message}")]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError {
        offset,
        message: message.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub dtype: Dtype,
    pub rows: usize,
    pub cols: usize,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        self.rows * self.cols * self.dtype.width()
    }
}

pub fn decode_header(bytes: &[u8]) -> Result<Header, FormatError> {
    if bytes.len() < HEADER_LEN {
        return fail(
            bytes.len(),
            format!("truncated header: need {HEADER_LEN} bytes, file has {}", bytes.len()),
        );
    }
    if bytes[..4] != MAGIC {
        return fail(
            0,
            format!(
                "bad magic {:?}, expected \"RLMX\"",
                String::from_utf8_lossy(&bytes[..4])
            ),
        );
    }
    if bytes[4] != VERSION {
        return fail(4, format!("unsupported version {}", bytes[4]));
    }
    let Some(dtype) = Dtype::from_code(bytes[5]) else {
        return fail(5, format!("unknown dtype code {}", bytes[5]));
    };
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (u32_at(6), u32_at(10));
    if rows == 0 {
        return fail(6, "zero rows");
    }
    if cols == 0 {
        return fail(10, "zero cols");
    }
    Ok(Header { dtype, rows, cols })
}

pub fn decode(bytes: &[u8]) -> Result<(Matrix, Dtype), FormatError> {
    let header = decode_header(bytes)?;
    let expected = header.payload_len();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return fail(
            bytes.len(),
            format!("truncated payload: expected {expected} bytes, found {}", payload.len()),
        );
    }
    if payload.len() > expected {
        return fail(
            HEADER_LEN + expected,
            format!("{} trailing bytes", payload.len() - expected),
        );
    }
    let width = header.dtype.width();
    let mut data = Vec::with_capacity(header.rows * header.cols);
    for (i, chunk) in payload.chunks_exact(width).enumerate() {
        let v = match header.dtype {
            Dtype::F64 => f64::from_le_bytes(chunk.try_into().expect("8 bytes")),
            Dtype::F32 => f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64,
        };
        if !v.is_finite() {
            return fail(
                HEADER_LEN + i * width,
                format!("non-finite value {v} at ({}, {})", i / header.cols, i % header.cols),
            );
        }
        data.push(v);
    }
    let m = Matrix::new(header.rows, header.cols, data).expect("dimensions and values validated");
    Ok((m, header.dtype))
}

/// Fails when a value does not fit the target dtype (f32 overflow).
pub fn encode(m: &Matrix, dtype: Dtype) -> Result<Vec<u8>, FormatError> {
    let (rows, cols) = m.shape();
    let (Ok(r32), Ok(c32)) = (u32::try_from(rows), u32::try_from(cols)) else {
        return fail(6, format!("{rows}x{cols} exceeds the u32 dimension limit"));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * dtype.width());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for (i, &v) in m.as_slice().iter().enumerate() {
        match dtype {
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F32 => {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return fail(HEADER_LEN + i * 4, format!("{v} overflows f32"));
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: String, source: FormatError },
}

pub fn read_file(path: &Path) -> Result<(Matrix, Dtype), ReadError> {
    let bytes = fs::read(path).map_err(|source| ReadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes).map_err(|source| ReadError::Format {
        path: path.display().to_string(),
        source,
    })
}

/// Reads only the 14-byte header.
pub fn read_header(path: &Path) -> Result<Header, ReadError> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(HEADER_LEN as u64).read_to_end(&mut buf))
        .map_err(|source| ReadError::Io {
            path: path.display().to_string(),
            source,
        })?;
    decode_header(&buf).map_err(|source| ReadError::Format {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_rows(&[[1.5, -0.0, 3.0], [f64::MIN_POSITIVE / 4.0, 1e300, -2.25]]).unwrap()
    }

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let m = sample();
        let bytes = encode(&m, Dtype::F64).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 6 * 8);
        let (back, dtype) = decode(&bytes).unwrap();
        assert_eq!(dtype, Dtype::F64);
        let bits = |m: &Matrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(encode(&back, Dtype::F64).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&Matrix::zeros(2, 3), Dtype::F32).unwrap();
        assert_eq!(&bytes[..6], b"RLMX\x01\x01");
        assert_eq!(&bytes[6..14], &[2, 0, 0, 0, 3, 0, 0, 0]);
    }

    #[test]
    fn errors_name_offsets() {
        let good = encode(&sample(), Dtype::F64).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad).unwrap_err().offset, 0);
        let mut bad = good.clone();
        bad[5] = 9;
        assert_eq!(decode(&bad).unwrap_err().offset, 5);
        assert_eq!(decode(&good[..10]).unwrap_err().offset, 10);
        assert_eq!(decode(&good[..good.len() - 1]).unwrap_err().offset, good.len() - 1);
        let mut long = good.clone();
        long.push(0);
        assert_eq!(decode(&long).unwrap_err().offset, good.len());
        let mut nan = good.clone();
        nan[HEADER_LEN + 8..HEADER_LEN + 16].copy_from_slice(&f64::NAN.to_le_bytes());
        assert_eq!(decode(&nan).unwrap_err().offset, HEADER_LEN + 8);
    }

    #[test]
    fn f32_overflow_rejected() {
        assert!(encode(&sample(), Dtype::F32).is_err());
    }
}
