use grain_core::coarsen::{postprocess, CoarsenConfig};
use grain_core::io;
use grain_core::lattice_mc::{run_trajectory, McConfig};
use serde::{Deserialize, Serialize};

use super::{create_dir, write_sidecar, MANIFEST};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub raw: String,
    pub field: String,
}

/// The parts of `manifest.json` that other commands read back.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub mc: McConfig,
    pub coarsen: CoarsenConfig,
    pub field_dims: Vec<usize>,
    pub trajectories: Vec<ManifestEntry>,
}

/// Trajectory `i` is seeded with `seed + i`; raw lattices and fields go
/// to `raw/` and `fields/` under `data_dir`.
pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let mc = cfg.mc();
    mc.validate()?;
    let coarsen = cfg.coarsen();
    coarsen.validate()?;
    if cfg.num_trajectories == 0 {
        return Err(CliError::Config("num_trajectories must be at least 1".into()));
    }
    if let Some(&d) = mc.dims.iter().find(|&&d| d % coarsen.downsample != 0) {
        return Err(CliError::Config(format!(
            "lattice extent {d} is not divisible by downsample {}",
            coarsen.downsample
        )));
    }
    let dir = &cfg.data_dir;
    create_dir(&dir.join("raw"))?;
    create_dir(&dir.join("fields"))?;

    let entries = cfg.execution().map_range(cfg.num_trajectories, |i| {
        let traj_cfg = McConfig {
            seed: mc.seed.wrapping_add(i as u64),
            ..mc.clone()
        };
        let raw = run_trajectory(&traj_cfg)?;
        let field = postprocess(&raw, &coarsen)?;
        let entry = ManifestEntry {
            seed: traj_cfg.seed,
            raw: format!("raw/traj_{i:04}.ggt"),
            field: format!("fields/traj_{i:04}.ggt"),
        };
        io::save_lattices(&dir.join(&entry.raw), &raw)?;
        io::save_fields(&dir.join(&entry.field), field.frames())?;
        Ok::<_, grain_core::Error>(entry)
    });
    let trajectories = entries.into_iter().collect::<Result<Vec<_>, _>>()?;

    let manifest = Manifest {
        field_dims: mc.dims.iter().map(|d| d / coarsen.downsample).collect(),
        mc,
        coarsen,
        trajectories,
    };
    write_sidecar(&dir.join(MANIFEST), "generate", cfg, &manifest)?;
    eprintln!(
        "wrote {} trajectories of {} frames to {}",
        manifest.trajectories.len(),
        cfg.num_frames,
        dir.display()
    );
    Ok(())
}

/// Rebuilds `fields/` from `raw/` with the current postprocessing keys and
/// rewrites the manifest.
pub fn repostprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let coarsen = cfg.coarsen();
    coarsen.validate()?;
    let dir = &cfg.data_dir;
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let neighborhood = manifest.mc.neighborhood;
    let done = cfg.execution().map(&manifest.trajectories, |entry| {
        let raw = io::load_lattices(&dir.join(&entry.raw), neighborhood)?;
        let field = postprocess(&raw, &coarsen)?;
        io::save_fields(&dir.join(&entry.field), field.frames())
    });
    done.into_iter().collect::<Result<Vec<_>, _>>()?;
    manifest.field_dims = manifest.mc.dims.iter().map(|d| d / coarsen.downsample).collect();
    manifest.coarsen = coarsen;
    write_sidecar(&path, "postprocess", cfg, &manifest)?;
    eprintln!("rebuilt {} field containers in {}", manifest.trajectories.len(), dir.display());
    Ok(())
}
