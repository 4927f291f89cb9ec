use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use super_core::kv::KeyValues;

pub const MANIFEST_FILE: &str = "manifest.log";

/// One invocation's record, appended to `manifest.log` in its artifact directory.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub config: KeyValues,
    pub seed: u64,
    pub version: String,
    pub started: u64,
    pub finished: u64,
    pub outputs: Vec<PathBuf>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, config: KeyValues, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            config,
            seed,
            version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
            started: unix_now(),
            finished: 0,
            outputs: Vec::new(),
        }
    }

    pub fn render(&self) -> String {
        let mut out = String::from("[run]\n");
        out.push_str(&format!("command={}\n", self.command));
        out.push_str(&format!("version={}\n", self.version));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("started={}\n", self.started));
        out.push_str(&format!("finished={}\n", self.finished));
        for p in &self.outputs {
            out.push_str(&format!("output={}\n", p.display()));
        }
        for line in self.config.to_text().lines() {
            out.push_str(&format!("config.{line}\n"));
        }
        out.push('\n');
        out
    }

    /// Never rewrites earlier entries.
    pub fn append(mut self, dir: &Path) -> std::io::Result<()> {
        self.finished = unix_now();
        fs::create_dir_all(dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(MANIFEST_FILE))?;
        f.write_all(self.render().as_bytes())
    }
}
