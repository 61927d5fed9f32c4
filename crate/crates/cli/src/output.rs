use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::failure::{Failure, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// An output directory. Every file lands through a temporary file and a
/// rename.
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Failure::usage(format!("{}: {e}", root.display())))?;
        Ok(OutDir {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.root.join(name), bytes)
    }

    pub fn write_csv<R: Serialize>(&self, name: &str, rows: impl IntoIterator<Item = R>) -> Result<()> {
        self.write(name, &csv_bytes(rows)?)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(Failure::usage)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Records the tool version, subcommand, resolved configuration and seed.
    pub fn write_manifest<C: Serialize>(&self, subcommand: &str, seed: u64, config: &C) -> Result<()> {
        let manifest = RunManifest {
            tool: "geofaith",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed,
            config,
        };
        self.write_json(RUN_MANIFEST, &manifest)
    }
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    config: &'a C,
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let fail = |e: &dyn std::fmt::Display| Failure::usage(format!("{}: {e}", path.display()));
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| fail(&e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(&e))?;
    tmp.write_all(bytes).map_err(|e| fail(&e))?;
    tmp.persist(path).map_err(|e| fail(&e.error))?;
    Ok(())
}

pub fn csv_bytes<R: Serialize>(rows: impl IntoIterator<Item = R>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(Failure::usage)?;
    }
    w.into_inner().map_err(|e| Failure::usage(e.to_string()))
}

pub fn read_csv<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<R>, _>>()
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}
