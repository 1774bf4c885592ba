//! File formats: run configurations, field snapshots and trajectories.
//!
//! Floats are written as `{:.16e}` (17 significant digits) so every value
//! reads back bit-for-bit.

use std::path::Path;

use crate::error::{Error, Result};

pub mod config;
pub mod manifest;
pub mod snapshot;
pub mod traj;

pub use config::{parse_config, sample_expr, InitSpec, LayersSpec, ModelSpec, OutputSpec, RunConfig, TimeSpec};
pub use snapshot::{read_field_snapshot, read_snapshot, snapshot_path, write_field_snapshot, write_snapshot, Snapshot};
pub use traj::{read_trajectory, write_trajectories, write_trajectory};

pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
