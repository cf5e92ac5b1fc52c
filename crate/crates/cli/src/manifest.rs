use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Output files relative to the output directory.
    pub outputs: Vec<FileDigest>,
    #[serde(default)]
    pub notices: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest(path: &Path, label: String) -> Result<FileDigest, CliError> {
    Ok(FileDigest { path: label, sha256: sha256_file(path)? })
}

impl RunManifest {
    pub fn new(command: &str, parameters: serde_json::Value, seed: Option<u64>) -> RunManifest {
        RunManifest {
            command: command.to_owned(),
            parameters,
            inputs: Vec::new(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            outputs: Vec::new(),
            notices: Vec::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(digest(path, path.display().to_string())?);
        Ok(())
    }

    pub fn add_outputs(&mut self, out_dir: &Path, files: &[PathBuf]) -> Result<(), CliError> {
        for f in files {
            let label = f.strip_prefix(out_dir).unwrap_or(f).display().to_string();
            self.outputs.push(digest(f, label)?);
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<RunManifest, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Invalid(format!("manifest: {e}")))
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
