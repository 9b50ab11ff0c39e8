//! On-disk artifacts: a shared header-plus-arrays container, task bundles
//! (`.macd`), numeric CSV tables, and atomic file replacement.

mod container;
mod macd;
mod table;

pub use container::{read_container, write_container, Container};
pub use macd::{bundle_bytes, read_bundle, write_bundle, MACD_MAGIC, MACD_VERSION};
pub use table::{export_table, import_table, parse_numeric_csv, read_numeric_csv, NumericTable, TableImport};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to a temporary sibling, syncs it, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

#[cfg(test)]
mod tests;
