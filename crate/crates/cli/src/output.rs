//! Report envelopes and artifact files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{io_error, CliError};
use crate::settings::Settings;

pub const SCHEMA_VERSION: u32 = 1;
pub const GIT_DESCRIBE: &str = env!("IPWEVAL_GIT_DESCRIBE");

#[derive(Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub schema_version: u32,
    pub command: &'a str,
    pub tool_version: &'a str,
    pub git_describe: &'a str,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub config: &'a BTreeMap<String, String>,
    #[serde(flatten)]
    pub body: T,
}

impl<'a, T: Serialize> Envelope<'a, T> {
    pub fn new(command: &'a str, settings: &'a Settings, seed: Option<u64>, body: T) -> Self {
        Envelope {
            schema_version: SCHEMA_VERSION,
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            git_describe: GIT_DESCRIBE,
            seed,
            config_hash: settings.hash(),
            config: settings.resolved(),
            body,
        }
    }
}

pub fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| CliError::Internal(format!("cannot encode report: {e}")))?;
    v.push(b'\n');
    Ok(v)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Artifacts rendered in memory, written only once all of them exist.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    /// Renders with a core writer.
    pub fn render(
        &mut self,
        name: impl Into<String>,
        write: impl FnOnce(&mut Vec<u8>) -> ipweval::Result<()>,
    ) -> Result<(), CliError> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.files.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect()
    }

    pub fn write_to(self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let mut paths = Vec::new();
        for (name, bytes) in self.files {
            let path = dir.join(&name);
            let tmp = dir.join(format!(".{name}.partial"));
            fs::write(&tmp, &bytes).map_err(|e| io_error(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| io_error(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Keeps model names usable as file name parts.
pub fn file_stem(model: &str) -> String {
    model
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
