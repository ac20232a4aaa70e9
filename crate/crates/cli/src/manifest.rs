use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, without the program name.
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_text: Option<String>,
    pub dataset_root: Option<PathBuf>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: Option<u64>,
    pub timestamp: u64,
    pub version: String,
    pub artifacts: Vec<Artifact>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, output_dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            config_path: None,
            config_text: None,
            dataset_root: None,
            checkpoint_paths: Vec::new(),
            output_dir: output_dir.to_path_buf(),
            seed: None,
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: Vec::new(),
        }
    }

    /// Hashes `files` (absolute or relative to the output directory).
    pub fn record(&mut self, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let rel = f.strip_prefix(&self.output_dir).unwrap_or(f);
            self.artifacts.push(Artifact { path: rel.to_string_lossy().into_owned(), sha256: sha256_file(f)? });
        }
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.artifacts.dedup();
        Ok(())
    }

    /// Writes `manifest.json` through a temporary file and rename.
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.output_dir.join(MANIFEST_NAME);
        let tmp = self.output_dir.join(".manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Every regular file below `dir`, sorted, excluding the manifest itself.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().and_then(|n| n.to_str()) != Some(MANIFEST_NAME) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}
