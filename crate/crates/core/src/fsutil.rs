//! Atomic output helpers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Write `bytes` to a sibling temp file, then rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = res {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|s| s.to_os_string())
        .unwrap_or_default();
    name.push(format!(".tmp-{}", std::process::id()));
    path.with_file_name(name)
}

/// A staging directory for a batch of artifacts.
///
/// Files are written under `<out>/.staging-<pid>/` and moved into `<out>`
/// only on [`Staging::commit`]. Dropping an uncommitted staging area
/// deletes it, so a failed run leaves no partial artifacts behind.
pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
    files: Vec<String>,
    committed: bool,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let dir = out.join(format!(".staging-{}", std::process::id()));
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            dir,
            files: Vec::new(),
            committed: false,
        })
    }

    /// Path inside the staging area for an artifact named `rel`.
    /// The artifact is registered and will be moved on commit.
    pub fn path(&mut self, rel: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        self.dir.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    /// Registered artifact names, sorted.
    pub fn artifacts(&self) -> Vec<String> {
        let mut v = self.files.clone();
        v.sort();
        v
    }

    pub fn commit(mut self) -> Result<Vec<String>> {
        let files = self.artifacts();
        for f in &files {
            let from = self.dir.join(f);
            let to = self.out.join(f);
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        let _ = fs::remove_dir_all(&self.dir);
        self.committed = true;
        Ok(files)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}
