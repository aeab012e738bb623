//! Dense `f32` matrix container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "MOLF"
//!      4     4  format version, u32 LE (1)
//!      8     8  rows, u64 LE
//!     16     8  cols, u64 LE
//!     24  4*r*c values, f32 LE, row-major
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{MolfError, Result};

use super::write_atomic;

pub const MAGIC: &[u8; 4] = b"MOLF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

pub fn encode_matrix(rows: usize, cols: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(MolfError::Contract(format!(
            "{} values for a {rows}x{cols} matrix",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let corrupt = |reason: String| MolfError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(corrupt(format!("payload is {} bytes, header implies {expected}", payload.len())));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::matrix(rows as usize, cols as usize, data)
}

pub fn write_matrix(path: impl AsRef<Path>, rows: usize, cols: usize, values: &[f32]) -> Result<()> {
    write_atomic(path.as_ref(), &encode_matrix(rows, cols, values)?)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    write_matrix(path, t.rows(), t.cols(), t.data())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MolfError::io(path, e))?;
    decode_matrix(&bytes, path)
}

/// Rows and columns from the header alone.
pub fn read_matrix_shape(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| MolfError::io(path, e))?;
    let mut header = [0u8; HEADER_LEN];
    f.read_exact(&mut header).map_err(|_| MolfError::Corrupt {
        path: path.to_path_buf(),
        reason: "truncated header".into(),
    })?;
    if &header[..4] != MAGIC {
        return Err(MolfError::Corrupt {
            path: path.to_path_buf(),
            reason: "bad magic".into(),
        });
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(header[16..24].try_into().unwrap());
    Ok((rows as usize, cols as usize))
}
