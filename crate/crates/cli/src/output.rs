//! Output directories that appear only once a command has succeeded.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use stagger_core::field::Field;
use stagger_core::snapshot::{save_field, save_sequence};
use stagger_core::field::FieldSequence;

use crate::config::ExperimentConfig;
use crate::CliError;

fn io(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Files are written into a hidden staging directory and moved to
/// `<root>/<name>` by [`Output::commit`]. A failed command leaves nothing
/// under `<root>/<name>`.
pub struct Output {
    staging: PathBuf,
    target: PathBuf,
}

impl Output {
    pub fn begin(root: &Path, name: &str) -> Result<Self, CliError> {
        let staging = root.join(format!(".{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| io(&staging, e))?;
        Ok(Self {
            staging,
            target: root.join(name),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.staging.join(rel)
    }

    pub fn dir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        Ok(p)
    }

    pub fn write(&self, rel: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(rel);
        fs::write(&p, text).map_err(|e| io(&p, e))
    }

    pub fn csv(&self, rel: &str, table: &Csv) -> Result<(), CliError> {
        self.write(rel, &table.text)
    }

    pub fn field(&self, rel: &str, f: &Field) -> Result<(), CliError> {
        Ok(save_field(f, &self.path(rel))?)
    }

    pub fn sequence(&self, dir: &str, stem: &str, seq: &FieldSequence) -> Result<(), CliError> {
        let d = self.dir(dir)?;
        save_sequence(seq, &d, stem)?;
        Ok(())
    }

    /// Records the resolved config and run digest, then publishes the directory.
    pub fn commit(self, cfg: &ExperimentConfig, command: &str, workers: usize) -> Result<PathBuf, CliError> {
        self.write("config.toml", &cfg.to_toml()?)?;
        let digest = format!(
            "command {command}\nseed {}\nworkers {workers}\nstagger-cli {}\nstagger-core {}\n",
            cfg.seed,
            env!("CARGO_PKG_VERSION"),
            stagger_core::VERSION
        );
        self.write("digest.txt", &digest)?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| io(&self.target, e))?;
        }
        fs::rename(&self.staging, &self.target).map_err(|e| io(&self.target, e))?;
        Ok(self.target.clone())
    }
}

impl Drop for Output {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.staging);
    }
}

/// Comma-separated table with a header row. Floats use round-trip `{:e}` formatting.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            text: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        let _ = writeln!(self.text, "{}", cells.join(","));
    }
}

pub fn num(v: f64) -> String {
    format!("{v:e}")
}
