use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Result, WithPath};

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes through a sibling temporary file and renames it into place, so a failed write never
/// leaves a truncated file under the final name.
pub fn write_atomic_with(path: &Path, f: impl FnOnce(File) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).at(parent)?;
    }
    let tmp = temp_path(path);
    let file = File::create(&tmp).at(&tmp)?;
    match f(file) {
        Ok(()) => std::fs::rename(&tmp, path).at(path),
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic_with(path, |mut file| std::io::Write::write_all(&mut file, bytes).at(path))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).at(path)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).at(path)?;
    serde_json::from_str(&text).at(path)
}
