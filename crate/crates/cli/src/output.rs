use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where a command writes. `--out` naming a file (it has an extension) puts the
/// primary output there and its companions beside it under the same stem;
/// otherwise `--out` is a directory and the stem is the command name.
pub struct Output {
    dir: PathBuf,
    stem: String,
    file: Option<PathBuf>,
}

impl Output {
    pub fn new(out: &Path, default_stem: &str, allow_file: bool) -> Result<Self> {
        let (dir, stem, file) = match (allow_file, out.extension(), out.file_stem()) {
            (true, Some(_), Some(stem)) => {
                let dir = out
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                (
                    dir.to_path_buf(),
                    stem.to_string_lossy().into_owned(),
                    Some(out.to_path_buf()),
                )
            }
            _ => (out.to_path_buf(), default_stem.to_string(), None),
        };
        fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self { dir, stem, file })
    }

    /// The primary output, `<stem>.<ext>` unless `--out` named it.
    pub fn primary(&self, ext: &str) -> PathBuf {
        self.file.clone().unwrap_or_else(|| self.companion(ext))
    }

    /// `<dir>/<stem>.<suffix>`.
    pub fn companion(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}.{suffix}", self.stem))
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, path: &Path, contents: &str) -> Result<()> {
        fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
    }

    /// Records the resolved configuration and tool version.
    pub fn finish(&self, cfg: &RunConfig) -> Result<()> {
        self.write(&self.companion("config.json"), &cfg.to_json())?;
        self.write(&self.join("VERSION"), &format!("drex {VERSION}\n"))
    }
}
