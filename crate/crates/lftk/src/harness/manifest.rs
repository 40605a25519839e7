//! Run manifests: every artifact-writing command leaves a sidecar recording
//! the command, a content hash per input file, and a verbatim copy of the
//! effective configuration.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::Result;

/// Git-style blob hash (`"blob {len}\0" + bytes`) over SHA-256, hex-encoded.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(blob_hash(&fs::read(path)?))
}

pub struct RunManifest {
    pub command: String,
    /// (display path, blob hash), in the order inputs were consumed.
    pub inputs: Vec<(String, String)>,
    /// Serialized `ExperimentConfig` (or a shorter key dump for commands
    /// without a full config).
    pub config_text: String,
}

impl RunManifest {
    pub fn new(command: &str) -> RunManifest {
        RunManifest { command: command.to_string(), inputs: Vec::new(), config_text: String::new() }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push((path.display().to_string(), hash_file(path)?));
        Ok(())
    }

    /// Hash every file in a directory (sorted by name) as one logical input.
    pub fn add_input_dir(&mut self, dir: &Path) -> Result<()> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            self.add_input(&f)?;
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# lftk run manifest\n");
        s.push_str(&format!("command = {}\n", self.command));
        s.push_str("\n[inputs]\n");
        for (path, hash) in &self.inputs {
            s.push_str(&format!("{path} = blob-sha256:{hash}\n"));
        }
        // last because the config body carries its own section headers
        s.push_str("\n[config]\n");
        s.push_str(&self.config_text);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

/// Manifest sidecar for an output artifact: `<out>.manifest.txt` next to a
/// file, `run-manifest.txt` inside a directory.
pub fn sidecar_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("run-manifest.txt")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.txt");
        out.with_file_name(name)
    }
}
