use std::path::PathBuf;

use grain_core::io;
use grain_core::trainer::{history_csv, split_trajectories, TrainState, Trainer};
use grain_core::{ModelConfig, SurrogateParams, Trajectory};
use serde::Serialize;

use super::{create_dir, dataset_fields, load_all, sidecar_path, write_sidecar};
use crate::config::RunConfig;
use crate::error::CliError;

pub const STATE_FILE: &str = "train_state.ggrs";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Serialize)]
struct CheckpointInfo<'a> {
    model: &'a ModelConfig,
    epochs_done: usize,
    train_trajectories: &'a [usize],
    val_trajectories: &'a [usize],
    history: &'a [grain_core::trainer::EpochRecord],
}

/// Keys that must match between an interrupted run and its continuation.
/// `epochs` may grow; `stop_after`, `resume`, `parallel` and paths may differ.
fn resume_key(cfg: &RunConfig) -> RunConfig {
    RunConfig {
        epochs: 0,
        stop_after: 0,
        resume: false,
        parallel: true,
        out_dir: PathBuf::new(),
        checkpoint: String::new(),
        ..cfg.clone()
    }
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let tc = cfg.train();
    tc.validate()?;
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(CliError::Config(format!("val_fraction must lie in [0, 1), got {}", cfg.val_fraction)));
    }
    let data = load_all(&dataset_fields(&cfg.data_dir)?)?;
    if data.is_empty() {
        return Err(CliError::Data(format!("{} lists no trajectories", cfg.data_dir.display())));
    }
    tc.check_dataset(&data)?;
    let first = data[0].frame(0);
    let model_cfg = cfg.model(first.ndim(), first.channels());
    model_cfg.validate()?;

    let (train_idx, val_idx) = split_trajectories(data.len(), cfg.val_fraction, cfg.seed)?;
    let pick = |idx: &[usize]| -> Vec<Trajectory> { idx.iter().map(|&i| data[i].clone()).collect() };
    let (train_set, val_set) = (pick(&train_idx), pick(&val_idx));

    create_dir(&cfg.out_dir)?;
    let state_path = cfg.out_dir.join(STATE_FILE);
    let template = SurrogateParams::new(&model_cfg, cfg.seed)?;
    let mut trainer = if cfg.resume {
        let snapshot = std::fs::read_to_string(sidecar_path(&state_path))
            .map_err(|e| CliError::Data(format!("no training state to resume in {}: {e}", cfg.out_dir.display())))?;
        let snapshot: serde_json::Value = serde_json::from_str(&snapshot).map_err(CliError::data)?;
        let before: RunConfig = serde_json::from_value(snapshot["config"].clone()).map_err(CliError::data)?;
        if resume_key(&before) != resume_key(cfg) {
            return Err(CliError::Config(
                "configuration differs from the interrupted run (only epochs, stop_after, parallel and paths may change)".into(),
            ));
        }
        let state: TrainState = io::load_train_state(&state_path)?;
        eprintln!("resuming after epoch {}", state.epochs_done);
        Trainer::resume(template, tc, state)?
    } else {
        Trainer::new(template, tc)?
    };

    let target = match cfg.stop_after {
        0 => cfg.epochs,
        n => n.min(cfg.epochs),
    };
    let exec = cfg.execution();
    let loss_path = cfg.out_dir.join(LOSS_FILE);
    let log = |r: &grain_core::trainer::EpochRecord| {
        let val = r.val_loss.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into());
        eprintln!("epoch {:>3}  train {:.6e}  val {val}  lr {:.2e}", r.epoch, r.train_loss, r.lr);
    };
    // one epoch at a time so an interrupted run always leaves a usable state
    loop {
        let next = (trainer.state().epochs_done + 1).min(target);
        trainer.run(&train_set, &val_set, next, exec, log)?;
        io::save_train_state(&state_path, trainer.state())?;
        write_sidecar(&sidecar_path(&state_path), "train", cfg, serde_json::json!({}))?;
        std::fs::write(&loss_path, history_csv(trainer.history()))?;
        if trainer.state().epochs_done >= target {
            break;
        }
    }

    let ckpt = cfg.checkpoint_path();
    let info = CheckpointInfo {
        model: &model_cfg,
        epochs_done: trainer.state().epochs_done,
        train_trajectories: &train_idx,
        val_trajectories: &val_idx,
        history: trainer.history(),
    };
    io::save_checkpoint(
        &ckpt,
        trainer.model(),
        serde_json::json!({ "epochs_done": info.epochs_done, "seed": cfg.seed }),
    )?;
    write_sidecar(&sidecar_path(&ckpt), "train", cfg, &info)?;
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}
