use grain_core::grainstats::rmse;
use grain_core::io;
use grain_core::rollout::{max_discrepancy, rollout, Algorithm, RolloutConfig};
use serde::Serialize;

use super::{create_dir, sidecar_path, write_sidecar};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Serialize)]
struct InferInfo {
    checkpoint: String,
    algorithm: Algorithm,
    steps: usize,
    recorded: usize,
    encode_calls: usize,
    decode_calls: usize,
    graph_nodes: usize,
    graph_edges: usize,
    peak_elements: usize,
    mean_step_seconds: f64,
    diverged_at: Option<usize>,
    parity_max_discrepancy: Option<f64>,
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let rc = cfg.rollout();
    rc.validate()?;
    if cfg.input.is_empty() {
        return Err(CliError::Config("infer needs --input, a field container with the initial frame".into()));
    }
    let ckpt = cfg.checkpoint_path();
    let (params, _) = io::load_checkpoint(&ckpt)?;
    let input = io::load_fields(cfg.input.as_ref())?;
    if cfg.input_frame >= input.len() {
        return Err(CliError::Config(format!(
            "input_frame {} is out of range; {} has {} frames",
            cfg.input_frame,
            cfg.input,
            input.len()
        )));
    }
    let phi0 = input.frame(cfg.input_frame);
    let report = rollout(phi0, &params, &rc)?;

    let parity = if cfg.verify_parity {
        let other = match rc.algorithm {
            Algorithm::AeOriginal => Algorithm::AeLatent,
            Algorithm::AeLatent => Algorithm::AeOriginal,
            Algorithm::GnnOnly => {
                return Err(CliError::Config("--verify-parity compares the two autoencoder schemes".into()));
            }
        };
        let twin = rollout(phi0, &params, &RolloutConfig { algorithm: other, ..rc.clone() })?;
        let d = max_discrepancy(&report, &twin)?;
        println!("parity max discrepancy: {d:e}");
        Some(d)
    } else {
        None
    };

    // RMSE against the reference frames that exist for the recorded steps
    let errors = if cfg.reference.is_empty() {
        None
    } else {
        let reference = io::load_fields(cfg.reference.as_ref())?;
        let mut out = Vec::with_capacity(report.steps.len());
        for (frame, &step) in report.trajectory.frames().iter().zip(&report.steps) {
            let t = cfg.input_frame + step;
            out.push(if t < reference.len() {
                rmse(std::slice::from_ref(frame), std::slice::from_ref(reference.frame(t)))?[0]
            } else {
                f64::NAN
            });
        }
        Some(out)
    };

    let out = cfg.output_path();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    io::save_fields(&out, report.trajectory.frames())?;
    std::fs::write(out.with_extension("metrics.csv"), report.metrics_csv(errors.as_deref()))?;
    let info = InferInfo {
        checkpoint: ckpt.display().to_string(),
        algorithm: report.algorithm,
        steps: rc.steps,
        recorded: report.steps.len(),
        encode_calls: report.encode_calls,
        decode_calls: report.decode_calls,
        graph_nodes: report.graph_nodes,
        graph_edges: report.graph_edges,
        peak_elements: report.peak_elements,
        mean_step_seconds: report.mean_step_seconds(),
        diverged_at: report.diverged_at,
        parity_max_discrepancy: parity,
    };
    write_sidecar(&sidecar_path(&out), "infer", cfg, &info)?;
    eprintln!(
        "{} steps with {} in {:.3e} s/step, {} frames written to {}",
        rc.steps,
        report.algorithm,
        info.mean_step_seconds,
        info.recorded,
        out.display()
    );
    if let Some(step) = report.diverged_at {
        let msg = format!("rollout diverged at step {step} (|phi| > {})", rc.divergence_threshold);
        if cfg.strict {
            return Err(CliError::Numerical(msg));
        }
        eprintln!("warning: {msg}");
    }
    Ok(())
}
