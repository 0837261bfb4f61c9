pub mod bench;
pub mod generate;
pub mod infer;
pub mod stats;
pub mod train;
pub mod verify;

use std::path::{Path, PathBuf};

use grain_core::io;
use grain_core::Trajectory;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Pretty JSON next to an output, always carrying the config snapshot.
pub fn write_sidecar(path: &Path, command: &str, cfg: &RunConfig, extra: impl Serialize) -> Result<(), CliError> {
    let mut v = serde_json::json!({ "command": command, "config": cfg.to_json() });
    if let serde_json::Value::Object(more) = serde_json::to_value(extra).map_err(CliError::data)? {
        v.as_object_mut().expect("object").extend(more);
    }
    let text = serde_json::to_string_pretty(&v).map_err(CliError::data)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

/// Field containers listed in a dataset manifest, in trajectory order.
pub fn dataset_fields(data_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let manifest = data_dir.join(MANIFEST);
    let text = std::fs::read_to_string(&manifest)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest.display())))?;
    let m: generate::Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", manifest.display())))?;
    Ok(m.trajectories.iter().map(|t| data_dir.join(&t.field)).collect())
}

/// A single container, or every `.ggt` file of a directory in name order.
pub fn container_paths(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_dir() {
        let mut out: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ggt"))
            .collect();
        out.sort();
        Ok(out)
    } else if path.exists() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(CliError::Data(format!("{}: no such file or directory", path.display())))
    }
}

pub fn load_all(paths: &[PathBuf]) -> Result<Vec<Trajectory>, CliError> {
    paths.iter().map(|p| io::load_fields(p).map_err(CliError::from)).collect()
}
