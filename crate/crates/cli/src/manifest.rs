//! Run manifests: a `key=value` record of what a command read and wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

pub const RUN_MANIFEST: &str = "run_manifest.txt";

pub struct RunManifest {
    command: String,
    entries: Vec<(String, String)>,
    artifacts: Vec<PathBuf>,
    deterministic: bool,
    started: u64,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn new(command: &str, deterministic: bool) -> Self {
        Self {
            command: command.to_string(),
            entries: Vec::new(),
            artifacts: Vec::new(),
            deterministic,
            started: if deterministic { 0 } else { now() },
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Records every line of a rendered config under a `config.` prefix.
    pub fn set_config(&mut self, rendered: &str) {
        for line in rendered.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.set(&format!("config.{}", k.trim()), v.trim());
            }
        }
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "command={}\nversion={}\ndeterministic={}\nstarted_unix={}\nfinished_unix={}\nargv={}\n",
            self.command,
            env!("CARGO_PKG_VERSION"),
            self.deterministic,
            self.started,
            if self.deterministic { 0 } else { now() },
            std::env::args().skip(1).collect::<Vec<_>>().join(" ")
        );
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        for a in &self.artifacts {
            out.push_str(&format!("artifact={}\n", a.display()));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        std::fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
