//! Run directories that appear under the output root only once complete.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::Utc;

use crate::error::CliError;

pub fn run_name(subcommand: &str, seed: u64, stamp: &str) -> String {
    format!("{subcommand}-{stamp}-{seed}")
}

/// Artifacts are written to a hidden staging directory and renamed into
/// place by [`RunDir::commit`]; dropping an uncommitted run removes it.
#[derive(Debug)]
pub struct RunDir {
    staging: PathBuf,
    target: PathBuf,
    committed: bool,
}

impl RunDir {
    pub fn create(root: &Path, subcommand: &str, seed: u64) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| hotspot_core::Error::Io {
            path: root.to_path_buf(),
            source: e,
        })?;
        let base = run_name(subcommand, seed, &Utc::now().format("%Y%m%dT%H%M%SZ").to_string());
        let mut n = 1;
        loop {
            let name = if n == 1 { base.clone() } else { format!("{base}.{n}") };
            let target = root.join(&name);
            let staging = root.join(format!(".{name}.partial"));
            if !target.exists() && fs::create_dir(&staging).is_ok() {
                return Ok(Self {
                    staging,
                    target,
                    committed: false,
                });
            }
            n += 1;
            if n > 1000 {
                return Err(CliError::runtime(format!("cannot allocate a run directory under {}", root.display())));
            }
        }
    }

    /// Where artifacts are written before commit.
    pub fn path(&self) -> &Path {
        &self.staging
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.staging.join(name)
    }

    pub fn target(&self) -> &Path {
        &self.target
    }

    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        fs::rename(&self.staging, &self.target).map_err(|e| hotspot_core::Error::Io {
            path: self.target.clone(),
            source: e,
        })?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_and_drop_discards() {
        let root = tempfile::tempdir().unwrap();
        let a = RunDir::create(root.path(), "evaluate", 3).unwrap();
        fs::write(a.file("x.txt"), "1").unwrap();
        let b = RunDir::create(root.path(), "evaluate", 3).unwrap();
        assert_ne!(a.target(), b.target());
        let done = a.commit().unwrap();
        assert!(done.join("x.txt").is_file());
        assert!(done.file_name().unwrap().to_str().unwrap().starts_with("evaluate-"));
        assert!(done.file_name().unwrap().to_str().unwrap().ends_with("-3"));
        let staged = b.path().to_path_buf();
        drop(b);
        assert!(!staged.exists());
        let names: Vec<_> = fs::read_dir(root.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
