//! Atomic artifact writes and the append-only run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Write via a temp file in the same directory, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Append-only record of artifacts produced by a run directory. Each line
/// carries the stage, status, artifact path and its content hash.
pub struct RunManifest {
    path: PathBuf,
}

impl RunManifest {
    pub fn open(out_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        Ok(RunManifest {
            path: out_dir.join("manifest.txt"),
        })
    }

    pub fn record(&self, stage: &str, status: &str, artifact: Option<&Path>) -> Result<()> {
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let line = match artifact {
            Some(p) => {
                let bytes = std::fs::read(p)?;
                format!(
                    "ts={ts} stage={stage} status={status} path={} sha256={}\n",
                    p.display(),
                    sha256_hex(&bytes)
                )
            }
            None => format!("ts={ts} stage={stage} status={status}\n"),
        };
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        f.write_all(line.as_bytes())?;
        Ok(())
    }
}

/// Refuse to clobber an existing artifact unless the caller opted in.
pub fn guard_overwrite(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() && !overwrite {
        return Err(Error::Config(format!(
            "refusing to overwrite {} (pass --overwrite)",
            path.display()
        )));
    }
    Ok(())
}
