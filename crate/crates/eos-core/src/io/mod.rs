//! Persistence formats: replay buffers, checkpoints, the metrics CSV and a
//! minimal SVG line chart. All binary formats are little-endian and
//! versioned; loaders reject newer versions.

mod buffer_file;
mod checkpoint;
mod metrics;
mod svg;

pub use buffer_file::{load_buffer, save_buffer};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{read_metrics, MetricsWriter, METRICS_HEADER};
pub use svg::render_svg;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {found} (newest supported: {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("file truncated: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("grid dims {found:?} do not match this build's {expected:?}")]
    DimsMismatch { found: (u16, u16, u16), expected: (u16, u16, u16) },
    #[error("malformed metrics row {line}: {detail}")]
    BadRow { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn read_exact_or_truncated(
    r: &mut impl std::io::Read,
    buf: &mut [u8],
) -> Result<(), IoError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => return Err(IoError::Truncated { needed: buf.len() - filled }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub(crate) fn read_u16(r: &mut impl std::io::Read) -> Result<u16, IoError> {
    let mut b = [0u8; 2];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl std::io::Read) -> Result<u64, IoError> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f32(r: &mut impl std::io::Read) -> Result<f32, IoError> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}
