//! Run manifests: the resolved configuration, seeds and SHA-256 of every
//! artifact a command wrote.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cmt_core::config::Config;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Every regular file under `dir` except the manifest, sorted by relative
/// path.
fn artifacts(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                out.push(path.strip_prefix(dir)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `dir/manifest.txt`; `args` are the command's resolved arguments,
/// including the dataset or checkpoint it read.
pub fn write(dir: &Path, command: &str, args: &[(&str, String)], config: &Config) -> Result<()> {
    let mut text = String::new();
    let _ = writeln!(text, "# cmt run manifest");
    let _ = writeln!(text, "command = {command}");
    for (k, v) in args {
        let _ = writeln!(text, "arg.{k} = {v}");
    }
    let _ = writeln!(text, "seed.data = {}", config.data.data_seed);
    let _ = writeln!(text, "seed.train = {}", config.train.seed);
    let _ = writeln!(text, "seed.init = {}", config.model.init_seed);
    text.push_str("\n[config]\n");
    text.push_str(&config.to_text());
    text.push_str("\n[artifacts]\n");
    for rel in artifacts(dir)? {
        let bytes = fs::read(dir.join(&rel))?;
        let _ = writeln!(text, "{}  {}", sha256_hex(&bytes), rel.display());
    }
    fs::write(dir.join(MANIFEST_FILE), text).with_context(|| format!("writing manifest in {}", dir.display()))?;
    Ok(())
}
