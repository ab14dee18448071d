use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use pathdiff::{Error, Result};

/// Removes the lock file when the owning process is done with the directory.
#[derive(Debug)]
struct LockGuard(PathBuf);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// A run directory `<config-hash>-<timestamp>` held under an exclusive lock.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
    _lock: LockGuard,
}

pub const LOCK_FILE: &str = ".lock";

impl RunDir {
    /// Creates a fresh directory below `out`. Existing directories are never
    /// reused; a numeric suffix disambiguates runs started in the same second.
    pub fn create(out: &Path, config_hash: &str) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{config_hash}-{stamp}");
        let mut path = out.join(&base);
        let mut n = 1;
        loop {
            match fs::create_dir(&path) {
                Ok(()) => break,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    path = out.join(format!("{base}-{n}"));
                    n += 1;
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        let lock = Self::lock(&path)?;
        Ok(Self { path, _lock: lock })
    }

    fn lock(dir: &Path) -> Result<LockGuard> {
        let lock = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(LockGuard(lock)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "{} is locked by another process",
                dir.display()
            ))),
            Err(e) => Err(Error::io(&lock, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("checkpoint-{iteration:08}.pdck")
}
