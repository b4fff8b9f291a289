use std::fs;
use std::path::{Path, PathBuf};

/// Files and directories created by a command. Unless committed they are
/// removed on drop, so a failed run leaves nothing half-written behind.
#[derive(Debug, Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    /// Register `path` before writing to it. Paths that already exist are
    /// left alone on failure.
    pub fn track(&mut self, path: &Path) {
        if !path.exists() {
            self.created.push(path.to_path_buf());
        }
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.created.iter().rev() {
            let res = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
            if let Err(e) = res {
                if p.exists() {
                    log::warn!("could not remove partial output {}: {e}", p.display());
                }
            }
        }
    }
}
