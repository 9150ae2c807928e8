//! FMAP: `"FMAP" | version u8 = 1 | dtype u8 = 1 (f32 LE) | ndim u8 |
//! ndim x u32 LE dims | row-major f32 LE payload`. Trailing bytes are an
//! error.

use std::path::Path;

use super::{read_bytes, write_bytes, FormatError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;

pub fn encode_fmap(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_fmap(bytes: &[u8]) -> Result<Tensor, FormatError> {
    let short = |field, offset, expected: usize| FormatError::LengthMismatch {
        field,
        offset,
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(short("magic", 0, 4));
    }
    if &bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic {
            offset: 0,
            found: bytes[..4].to_vec(),
        });
    }
    if bytes.len() < 7 {
        return Err(short("header", bytes.len(), 7));
    }
    if bytes[4] != VERSION {
        return Err(FormatError::UnsupportedVersion {
            offset: 4,
            found: bytes[4],
        });
    }
    if bytes[5] != DTYPE_F32 {
        return Err(FormatError::UnsupportedDtype {
            offset: 5,
            found: bytes[5],
        });
    }
    let ndim = bytes[6];
    if !(1..=4).contains(&ndim) {
        return Err(FormatError::UnsupportedRank {
            offset: 6,
            found: ndim,
        });
    }
    let header = 7 + 4 * ndim as usize;
    if bytes.len() < header {
        return Err(short("dims", 7, header));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut count: u64 = 1;
    for i in 0..ndim as usize {
        let offset = 7 + 4 * i;
        let d = u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"));
        if d == 0 {
            return Err(FormatError::ZeroDim { offset });
        }
        count = count.saturating_mul(d as u64);
        dims.push(d as usize);
    }
    let payload = (bytes.len() - header) as u64;
    let expected = count.saturating_mul(4);
    if payload != expected {
        return Err(FormatError::LengthMismatch {
            field: "payload",
            offset: header,
            expected,
            found: payload,
        });
    }
    let mut data = Vec::with_capacity(count as usize);
    for (i, chunk) in bytes[header..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(FormatError::NonFinite { offset: header + 4 * i });
        }
        data.push(v);
    }
    Ok(Tensor::new(dims, data).expect("validated above"))
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<Tensor, FormatError> {
    let path = path.as_ref();
    decode_fmap(&read_bytes(path)?).map_err(|e| FormatError::InFile {
        name: path.display().to_string(),
        source: Box::new(e),
    })
}

pub fn write_fmap(path: impl AsRef<Path>, t: &Tensor) -> Result<(), FormatError> {
    write_bytes(path.as_ref(), &encode_fmap(t))
}
