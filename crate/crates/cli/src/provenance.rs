//! Provenance record written by every command: enough to rerun it exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;

use crate::settings::Settings;

pub const PROVENANCE_FILE: &str = "provenance.txt";

#[derive(Debug, Default)]
pub struct Provenance {
    entries: Vec<(String, String)>,
}

impl Provenance {
    pub fn new(command: &str, settings: &Settings) -> Self {
        let mut p = Self::default();
        p.add("command", command);
        p.add("argv", std::env::args().collect::<Vec<_>>().join(" "));
        p.add("version", env!("CARGO_PKG_VERSION"));
        p.add("config_digest", settings.digest());
        p
    }

    pub fn add(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn output(&mut self, path: &Path) {
        self.add("output", path.display());
    }

    pub fn to_text(&self, settings: &Settings) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}={v}");
        }
        for line in settings.text().lines() {
            let _ = writeln!(out, "setting.{line}");
        }
        out
    }

    pub fn write(&self, dir: &Path, settings: &Settings) -> Result<PathBuf> {
        let path = dir.join(PROVENANCE_FILE);
        std::fs::write(&path, self.to_text(settings))?;
        Ok(path)
    }
}
