//! Run configuration: a `key=value` file overlaid by command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Result;
use maskctl_core::diffusion_core::Sampler;
use sha2::{Digest, Sha256};

use crate::failure::Failure;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

pub fn parse_config(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Failure::Usage(format!("{}:{}: expected key=value, got `{line}`", origin.display(), n + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl Settings {
    /// File values first, then `overrides` (flags) on top.
    pub fn resolve(config: Option<&Path>, overrides: Vec<(String, String)>) -> Result<Self> {
        let mut values = match config {
            Some(path) => {
                if !path.exists() {
                    return Err(Failure::Missing(path.to_path_buf()).into());
                }
                parse_config(&std::fs::read_to_string(path)?, path)?
            }
            None => BTreeMap::new(),
        };
        values.extend(overrides);
        Ok(Self { values })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Failure::Usage(format!("setting `{key}`: cannot parse `{v}`")).into()),
        }
    }

    pub fn flag(&self, key: &str) -> Result<bool> {
        self.parse_or(key, false)
    }

    /// A path setting that must be given; it must exist when `must_exist`.
    pub fn path(&self, key: &str, must_exist: bool) -> Result<PathBuf> {
        let p = PathBuf::from(
            self.get(key)
                .ok_or_else(|| Failure::Usage(format!("missing required `--{}`", key.replace('_', "-"))))?,
        );
        if must_exist && !p.exists() {
            return Err(Failure::Missing(p).into());
        }
        Ok(p)
    }

    pub fn optional_path(&self, key: &str) -> Result<Option<PathBuf>> {
        match self.get(key) {
            None => Ok(None),
            Some(_) => self.path(key, true).map(Some),
        }
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let out = self.path("out", false)?;
        std::fs::create_dir_all(&out)
            .map_err(|e| Failure::Usage(format!("cannot create output dir {}: {e}", out.display())))?;
        Ok(out)
    }

    pub fn sampler(&self) -> Result<Sampler> {
        match self.get("sampler").unwrap_or("ddim") {
            "ddpm" => Ok(Sampler::Ddpm),
            "ddim" => Ok(Sampler::Ddim {
                steps: self.parse_or("sampler_steps", 50)?,
                eta: self.parse_or("eta", 0.0)?,
            }),
            other => Err(Failure::Usage(format!("unknown sampler `{other}` (ddpm or ddim)")).into()),
        }
    }

    /// Every resolved setting, one `key=value` per line, sorted.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.text().as_bytes()))
    }

    /// Settings under `prefix.`, keys kept whole.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, String> {
        self.values
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
