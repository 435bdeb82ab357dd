//! Staged output files. Every artifact is written to a temporary file next to
//! its destination and only renamed into place once the whole command has
//! succeeded, so a failed run leaves nothing behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use ptqkit::{PtqError, Result};
use tempfile::NamedTempFile;

#[derive(Default)]
pub struct Outputs {
    staged: Vec<(NamedTempFile, PathBuf)>,
}

fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

/// Fails early when `path` cannot be created: its directory must exist.
pub fn check_writable(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    if !dir.is_dir() {
        return Err(PtqError::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist"),
        });
    }
    Ok(())
}

impl Outputs {
    pub fn stage(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let io = |source| PtqError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut tmp = NamedTempFile::new_in(parent_dir(path)).map_err(io)?;
        tmp.write_all(bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        self.staged.push((tmp, path.to_path_buf()));
        Ok(())
    }

    pub fn paths(&self) -> Vec<String> {
        self.staged.iter().map(|(_, p)| p.display().to_string()).collect()
    }

    /// Moves every staged file into place.
    pub fn commit(self) -> Result<()> {
        for (tmp, path) in self.staged {
            tmp.persist(&path).map_err(|e| PtqError::Io {
                path: path.clone(),
                source: e.error,
            })?;
        }
        Ok(())
    }
}
