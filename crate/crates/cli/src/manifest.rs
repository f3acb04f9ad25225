//! Run manifests: the command, its options and seed, and SHA-256 digests of
//! every input and output. A copy is written next to each output as
//! `<output>.manifest.json`. Nothing time- or host-dependent goes in, so
//! reruns reproduce the manifest byte for byte.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use vitprobe::{Error, Result};

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    options: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    #[serde(skip)]
    output_paths: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &'static str, options: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            options: serde_json::to_value(options).expect("options serialize"),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            output_paths: Vec::new(),
        }
    }

    pub fn input(&mut self, path: impl AsRef<Path>) -> Result<&mut Self> {
        self.inputs.push(digest(path.as_ref())?);
        Ok(self)
    }

    pub fn output(&mut self, path: impl AsRef<Path>) -> Result<&mut Self> {
        self.outputs.push(digest(path.as_ref())?);
        self.output_paths.push(path.as_ref().to_path_buf());
        Ok(self)
    }

    pub fn finish(&mut self) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        for out in &self.output_paths {
            vitprobe::io::write_atomic(&manifest_path(out), text.as_bytes())?;
        }
        Ok(())
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn storage(path: &Path, source: std::io::Error) -> Error {
    Error::Storage {
        path: path.display().to_string(),
        source,
    }
}

/// Digest of a file, or of a directory as the sorted sequence of
/// (relative path, length, contents) of every file beneath it. Run manifests
/// of nested outputs are left out so reruns into the same place agree.
fn digest(path: &Path) -> Result<FileDigest> {
    let mut h = Sha256::new();
    let meta = std::fs::metadata(path).map_err(|e| storage(path, e))?;
    if meta.is_dir() {
        let mut files = Vec::new();
        walk(path, path, &mut files)?;
        files.sort();
        for rel in files {
            let bytes = std::fs::read(path.join(&rel)).map_err(|e| storage(path, e))?;
            h.update(rel.as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(std::fs::read(path).map_err(|e| storage(path, e))?);
    }
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: format!("{:x}", h.finalize()),
    })
}

fn walk(root: &Path, dir: &Path, files: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| storage(dir, e))? {
        let p = entry.map_err(|e| storage(dir, e))?.path();
        if p.is_dir() {
            walk(root, &p, files)?;
        } else if !p.to_string_lossy().ends_with(".manifest.json") {
            let rel = p.strip_prefix(root).expect("under root");
            files.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}
