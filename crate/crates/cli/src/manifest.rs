//! `manifest.json`: what produced a run directory, and how to replay it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsl_core::error::{Error, Result};
use tsl_core::train::SEED_ENV;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    /// Fully resolved configuration.
    pub config: serde_json::Value,
    /// Seed after applying the environment override.
    pub seed: u64,
    pub threads: u32,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
}

impl RunManifest {
    pub fn new<C: Serialize>(
        command: &str,
        args: &[String],
        config: &C,
        seed: u64,
        threads: u32,
        artifacts: &[PathBuf],
    ) -> Result<Self> {
        Ok(RunManifest {
            command: command.to_owned(),
            args: args.to_vec(),
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
            seed,
            threads,
            artifacts: artifacts.to_vec(),
            version: env!("CARGO_PKG_VERSION").to_owned(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { line: e.line(), msg: format!("{}: {e}", path.display()) })
    }

    /// The recorded arguments with `--seed` pinned to the resolved seed and
    /// `--out` optionally redirected.
    pub fn replay_args(&self, out: Option<&Path>) -> Vec<String> {
        let mut args = Vec::with_capacity(self.args.len() + 4);
        let mut it = self.args.iter().peekable();
        while let Some(a) = it.next() {
            let (flag, inline) = match a.split_once('=') {
                Some((f, v)) if f.starts_with("--") => (f, Some(v)),
                _ => (a.as_str(), None),
            };
            if flag == "--seed" || flag == "--out" {
                if inline.is_none() {
                    it.next();
                }
                continue;
            }
            args.push(a.clone());
        }
        if self.uses_seed() {
            args.push("--seed".into());
            args.push(self.seed.to_string());
        }
        let out = out.map(Path::to_path_buf).or_else(|| self.recorded_out());
        if let Some(o) = out {
            args.push("--out".into());
            args.push(o.display().to_string());
        }
        args
    }

    fn uses_seed(&self) -> bool {
        matches!(self.command.as_str(), "train" | "ablate" | "occlude-eval")
    }

    fn recorded_out(&self) -> Option<PathBuf> {
        let mut it = self.args.iter();
        while let Some(a) = it.next() {
            if a == "--out" {
                return it.next().map(PathBuf::from);
            }
            if let Some(v) = a.strip_prefix("--out=") {
                return Some(PathBuf::from(v));
            }
        }
        None
    }
}

/// Reminder printed by `rerun` when the environment would override the
/// recorded seed.
pub fn seed_env_note() -> Option<String> {
    std::env::var(SEED_ENV).ok().map(|v| format!("note: {SEED_ENV}={v} overrides the recorded seed"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(args: &[&str]) -> RunManifest {
        RunManifest {
            command: "train".into(),
            args: args.iter().map(|s| s.to_string()).collect(),
            config: serde_json::Value::Null,
            seed: 7,
            threads: 1,
            artifacts: vec![],
            version: "0".into(),
        }
    }

    #[test]
    fn replay_pins_seed_and_redirects_out() {
        let m = manifest(&["train", "--toy", "--seed", "3", "--out", "a"]);
        assert_eq!(m.replay_args(Some(Path::new("b"))), ["train", "--toy", "--seed", "7", "--out", "b"]);
        let m = manifest(&["train", "--toy", "--seed=3", "--out=a"]);
        assert_eq!(m.replay_args(None), ["train", "--toy", "--seed", "7", "--out", "a"]);
    }
}
