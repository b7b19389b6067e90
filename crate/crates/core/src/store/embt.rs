//! EMBT tensor files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   4 bytes  "EMBT"
//! version u32      1
//! dtype   u32      0 = f32, 1 = u8
//! rank    u32
//! dims    rank * u64
//! payload row-major values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::StoreError;

pub const MAGIC: [u8; 4] = *b"EMBT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

fn header(dtype: DType, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + dims.len() * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

fn write_bytes(path: &Path, mut bytes: Vec<u8>, payload: &[u8]) -> Result<(), StoreError> {
    bytes.extend_from_slice(payload);
    let mut file = fs::File::create(path).map_err(|e| StoreError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| StoreError::io(path, e))
}

/// Encodes an f32 tensor into an in-memory EMBT buffer.
pub fn encode_f32(dims: &[usize], values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(dims.iter().product::<usize>(), values.len());
    let mut out = header(DType::F32, dims);
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_f32(path: &Path, dims: &[usize], values: &[f32]) -> Result<(), StoreError> {
    write_bytes(path, encode_f32(dims, values), &[])
}

pub fn write_u8(path: &Path, dims: &[usize], values: &[u8]) -> Result<(), StoreError> {
    debug_assert_eq!(dims.iter().product::<usize>(), values.len());
    write_bytes(path, header(DType::U8, dims), values)
}

struct Parsed<'a> {
    dtype: DType,
    dims: Vec<usize>,
    payload: &'a [u8],
    payload_offset: usize,
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<Parsed<'a>, StoreError> {
    let file = path.display().to_string();
    let truncated = || StoreError::Truncated { file: file.clone() };
    if bytes.len() < 16 {
        return Err(truncated());
    }
    if bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic { file: file.clone() });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = read_u32(4);
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion { file: file.clone(), version });
    }
    let code = read_u32(8);
    let dtype = DType::from_code(code).ok_or(StoreError::UnsupportedDType { file: file.clone(), code })?;
    let rank = read_u32(12) as usize;
    let dims_end = 16 + rank * 8;
    if bytes.len() < dims_end {
        return Err(truncated());
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let at = 16 + i * 8;
            u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
        })
        .collect();
    let numel: usize = dims.iter().product();
    let expected = numel * dtype.width();
    let payload = &bytes[dims_end..];
    if payload.len() != expected {
        return Err(StoreError::PayloadSize { file, expected, actual: payload.len() });
    }
    Ok(Parsed { dtype, dims, payload, payload_offset: dims_end })
}

/// Decodes an f32 EMBT buffer, rejecting non-finite values with their
/// location.
pub fn decode_f32(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<f32>), StoreError> {
    let parsed = parse(path, bytes)?;
    if parsed.dtype != DType::F32 {
        return Err(StoreError::WrongDType { file: path.display().to_string(), expected: "f32" });
    }
    let row_len: usize = parsed.dims.iter().skip(1).product::<usize>().max(1);
    let mut values = Vec::with_capacity(parsed.payload.len() / 4);
    for (i, chunk) in parsed.payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(StoreError::NonFinite {
                file: path.display().to_string(),
                row: i / row_len,
                offset: (parsed.payload_offset + i * 4) as u64,
            });
        }
        values.push(v);
    }
    Ok((parsed.dims, values))
}

pub fn read_f32(path: &Path) -> Result<(Vec<usize>, Vec<f32>), StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    decode_f32(path, &bytes)
}

pub fn read_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>), StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    let parsed = parse(path, &bytes)?;
    if parsed.dtype != DType::U8 {
        return Err(StoreError::WrongDType { file: path.display().to_string(), expected: "u8" });
    }
    Ok((parsed.dims, parsed.payload.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_fixed() {
        let bytes = encode_f32(&[2, 3], &[0.0; 6]);
        assert_eq!(&bytes[..4], b"EMBT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 0);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 32 + 24);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let p = Path::new("x.embt");
        let mut bytes = encode_f32(&[1], &[1.0]);
        bytes[0] = b'X';
        assert!(matches!(decode_f32(p, &bytes), Err(StoreError::BadMagic { .. })));

        let mut bytes = encode_f32(&[1], &[1.0]);
        bytes[4] = 7;
        assert!(matches!(decode_f32(p, &bytes), Err(StoreError::UnsupportedVersion { version: 7, .. })));
    }

    #[test]
    fn nan_reports_row_and_offset() {
        let mut values = vec![1.0f32; 12];
        values[2 * 4 + 1] = f32::NAN;
        let bytes = encode_f32(&[3, 4], &values);
        match decode_f32(Path::new("m.embt"), &bytes) {
            Err(StoreError::NonFinite { row, offset, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(offset, 32 + 9 * 4);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_f32(&[2, 2], &[1.0; 4]);
        bytes.pop();
        assert!(matches!(decode_f32(Path::new("t"), &bytes), Err(StoreError::PayloadSize { .. })));
    }
}
