use std::path::{Path, PathBuf};

use paia_core::adapters::{load_delta, LoraDelta};
use paia_core::dataset::Corpus;
use paia_core::diffusion::Checkpoint;
use paia_core::Error;

use crate::config::ConfigFile;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_INTEGRITY: u8 = 4;
pub const EXIT_PROPERTY: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }

    pub fn property(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_PROPERTY,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Argument(_) | Error::Config(_) => EXIT_USAGE,
            Error::MissingArtifact { .. } => EXIT_MISSING,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
            Error::Integrity(_) | Error::Format(_) => EXIT_INTEGRITY,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub struct Ctx {
    pub root: PathBuf,
    pub file: ConfigFile,
}

impl Ctx {
    pub fn path(&self, given: Option<&Path>, default: &str) -> PathBuf {
        given.map_or_else(|| self.root.join(default), Path::to_path_buf)
    }
}

/// `"0,3,5-7"` → `[0, 3, 5, 6, 7]`.
pub fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (
                    a.trim().parse().map_err(|e| format!("`{part}`: {e}"))?,
                    b.trim().parse().map_err(|e| format!("`{part}`: {e}"))?,
                );
                if a > b {
                    return Err(format!("empty range `{part}`"));
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|e| format!("`{part}`: {e}"))?),
        }
    }
    if out.is_empty() {
        return Err("empty list".into());
    }
    Ok(out)
}

/// Outputs are write-once unless `force`.
pub fn ensure_fresh(path: &Path, force: bool) -> Result<(), Failure> {
    if force || !path.exists() {
        return Ok(());
    }
    let occupied = if path.is_dir() {
        std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(true)
    } else {
        true
    };
    if occupied {
        Err(Failure::usage(format!(
            "{} already exists; refusing to overwrite without --force",
            path.display()
        )))
    } else {
        Ok(())
    }
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
    }
    std::fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, Failure> {
    Ok(Corpus::read(dir)?)
}

pub fn load_base(path: &Path) -> Result<Checkpoint, Failure> {
    Ok(Checkpoint::load(path)?)
}

pub fn load_model(path: &Path) -> Result<LoraDelta, Failure> {
    Ok(load_delta(path)?)
}

/// Sidecar next to an artifact: `base.ckpt` → `base.report.json`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}.{suffix}"))
}
