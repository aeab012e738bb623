//! On-disk formats: matrices, dataset manifests and checkpoints.

mod checkpoint;
mod manifest;
mod matrix;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage, CKPT_MAGIC, CKPT_VERSION};
pub use manifest::{
    load_dataset, read_manifest, write_manifest, Dataset, DatasetManifest, SlideEntry, ValueKind, MANIFEST_VERSION,
};
pub use matrix::{
    decode_matrix, encode_matrix, read_matrix, read_matrix_shape, write_matrix, write_tensor, HEADER_LEN, MAGIC,
    VERSION,
};

use crate::autodiff::Tensor;
use crate::error::{MolfError, Result};

/// Per-spot total counts are scaled to this before `ln(1 + v)`.
pub const LIBRARY_SIZE: f64 = 10_000.0;

/// Write to a temporary sibling, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        builder.permissions(std::fs::Permissions::from_mode(0o644));
    }
    let mut tmp = builder.tempfile_in(dir).map_err(|e| MolfError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| MolfError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| MolfError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| MolfError::io(path, e.error))?;
    Ok(())
}

/// Scale each row to `target` total counts, then `ln(1 + v)`. All-zero rows stay zero.
pub fn log1p_normalize(raw: &Tensor<f32>, target: f64) -> Result<Tensor<f32>> {
    if let Some(v) = raw.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(MolfError::Validation(format!("counts must be non-negative, found {v}")));
    }
    let mut out = Vec::with_capacity(raw.numel());
    for r in 0..raw.rows() {
        let row = raw.row_slice(r);
        let total: f64 = row.iter().map(|&v| v as f64).sum();
        for &v in row {
            let scaled = if total > 0.0 { v as f64 * target / total } else { 0.0 };
            out.push(scaled.ln_1p() as f32);
        }
    }
    Tensor::matrix(raw.rows(), raw.cols(), out)
}
