//! Run directories: created fresh, replaced only with `--force`, and always
//! holding a snapshot of the effective configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use fer_core::config::RunConfig;

use crate::{CliError, CliResult};

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, force: bool) -> CliResult<Self> {
        if path.exists() {
            let occupied = !path.is_dir() || fs::read_dir(path)?.next().is_some();
            if occupied {
                if !force {
                    return Err(CliError::Usage(format!(
                        "run directory {} already exists; pass --force to replace it",
                        path.display()
                    )));
                }
                if path.is_dir() {
                    fs::remove_dir_all(path)?;
                } else {
                    fs::remove_file(path)?;
                }
            }
        }
        fs::create_dir_all(path)?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    /// Creates the directory and writes `config.toml` and `command.json`.
    pub fn with_snapshot(
        path: &Path,
        force: bool,
        cfg: &RunConfig,
        command: &str,
    ) -> CliResult<Self> {
        let dir = Self::create(path, force)?;
        dir.write_text("config.toml", &cfg.to_toml())?;
        let args: Vec<String> = std::env::args().skip(1).collect();
        dir.write_json(
            "command.json",
            &serde_json::json!({ "command": command, "args": args }),
        )?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        fs::write(self.file(name), text)?;
        Ok(())
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    /// One JSON object per line.
    pub fn write_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> CliResult<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(self.file(name))?);
        for r in rows {
            let line = serde_json::to_string(r).map_err(|e| CliError::Usage(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn append_jsonl<T: Serialize>(&self, name: &str, row: &T) -> CliResult<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.file(name))?;
        let line = serde_json::to_string(row).map_err(|e| CliError::Usage(e.to_string()))?;
        writeln!(f, "{line}")?;
        Ok(())
    }
}
