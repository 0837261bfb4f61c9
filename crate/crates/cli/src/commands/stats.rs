use std::fmt::Write as _;
use std::path::Path;

use grain_core::grainstats::{
    grain_metrics, ks_statistic, label_field, pooled_normalized_diameters, trajectory_statistics, GrainMetrics,
    Threshold, TrajectoryStatistics,
};
use grain_core::{Execution, Trajectory};
use serde::Serialize;

use super::{container_paths, create_dir, load_all, write_sidecar};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot;

pub struct SetStatistics {
    pub source: &'static str,
    pub metrics: Vec<Vec<GrainMetrics>>,
    pub summary: TrajectoryStatistics,
    /// Resolved threshold per trajectory and frame.
    pub thresholds: Vec<Vec<f64>>,
}

/// Labels every frame with a threshold resolved from that frame's own
/// channel-0 values. Normalization is shared across a trajectory, so late,
/// coarse frames sit higher on the scale than early ones; one cut for the
/// whole trajectory merges late grains through their faint boundaries.
pub fn analyze(
    source: &'static str,
    set: &[Trajectory],
    threshold: Threshold,
    min_size: usize,
    exec: Execution,
) -> Result<SetStatistics, CliError> {
    if set.is_empty() {
        return Err(CliError::Data(format!("{source} trajectory set is empty")));
    }
    let per = exec.map(set, |traj| {
        traj.frames()
            .iter()
            .map(|f| {
                let values: Vec<f64> = f.data().iter().step_by(f.channels()).copied().collect();
                let t = threshold.resolve(&values);
                label_field(f, t, min_size).map(|l| (t, grain_metrics(&l)))
            })
            .collect::<grain_core::Result<(Vec<f64>, Vec<GrainMetrics>)>>()
    });
    let (thresholds, metrics): (Vec<Vec<f64>>, Vec<Vec<GrainMetrics>>) =
        per.into_iter().collect::<grain_core::Result<Vec<_>>>()?.into_iter().unzip();
    let summary = trajectory_statistics(&metrics)?;
    Ok(SetStatistics {
        source,
        metrics,
        summary,
        thresholds,
    })
}

fn frames_csv(sets: &[&SetStatistics]) -> String {
    let mut s = String::from("source,frame,count_mean,count_min,count_max,mean_size_mean,mean_size_min,mean_size_max\n");
    for set in sets {
        for f in &set.summary.frames {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                set.source, f.frame, f.count.mean, f.count.min, f.count.max, f.mean_size.mean, f.mean_size.min, f.mean_size.max
            );
        }
    }
    s
}

fn histogram_csv(sets: &[&SetStatistics]) -> String {
    let mut s = String::from("bin_left,bin_right,density,source\n");
    for set in sets {
        let h = &set.summary.histogram;
        for (i, d) in h.density.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", h.edges[i], h.edges[i + 1], d, set.source);
        }
    }
    s
}

#[derive(Serialize)]
struct KsRow {
    frame: usize,
    truth_frame: usize,
    ks: f64,
}

/// KS distance between predicted frame `k` and the ground-truth frame it
/// stands for, `input_frame + k * emit_every`.
fn ks_rows(pred: &SetStatistics, truth: &SetStatistics, cfg: &RunConfig) -> Vec<KsRow> {
    let n_pred = pred.summary.frames.len();
    let n_truth = truth.summary.frames.len();
    (0..n_pred)
        .map(|k| (k, cfg.input_frame + k * cfg.emit_every.max(1)))
        .take_while(|&(_, t)| t < n_truth)
        .map(|(k, t)| KsRow {
            frame: k,
            truth_frame: t,
            ks: ks_statistic(
                &pooled_normalized_diameters(&pred.metrics, k),
                &pooled_normalized_diameters(&truth.metrics, t),
            ),
        })
        .collect()
}

fn load_set(path: &Path) -> Result<Vec<Trajectory>, CliError> {
    let paths = container_paths(path)?;
    if paths.is_empty() {
        return Err(CliError::Data(format!("{} holds no .ggt containers", path.display())));
    }
    load_all(&paths)
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let threshold = cfg.threshold()?;
    let exec = cfg.execution();
    let truth = analyze("truth", &load_set(&cfg.truth_path())?, threshold, cfg.min_size, exec)?;
    let pred = if cfg.predicted.is_empty() {
        None
    } else {
        Some(analyze("predicted", &load_set(cfg.predicted.as_ref())?, threshold, cfg.min_size, exec)?)
    };
    let mut sets = vec![&truth];
    sets.extend(pred.as_ref());

    create_dir(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("stats_frames.csv"), frames_csv(&sets))?;
    std::fs::write(cfg.out_dir.join("stats_histogram.csv"), histogram_csv(&sets))?;
    let ks = pred.as_ref().map(|p| ks_rows(p, &truth, cfg)).unwrap_or_default();
    if pred.is_some() {
        let mut s = String::from("frame,truth_frame,ks\n");
        for r in &ks {
            let _ = writeln!(s, "{},{},{}", r.frame, r.truth_frame, r.ks);
        }
        std::fs::write(cfg.out_dir.join("stats_ks.csv"), s)?;
    }
    if cfg.plots {
        std::fs::write(cfg.out_dir.join("stats.svg"), plot::summary_svg(&sets))?;
    }

    let overview: Vec<serde_json::Value> = sets
        .iter()
        .map(|s| {
            serde_json::json!({
                "source": s.source,
                "trajectories": s.metrics.len(),
                "thresholds": s.thresholds,
                "histogram_overflow": s.summary.histogram.overflow,
                "histogram_total": s.summary.histogram.total,
            })
        })
        .collect();
    write_sidecar(
        &cfg.out_dir.join("stats.json"),
        "stats",
        cfg,
        serde_json::json!({ "sets": overview, "ks": ks }),
    )?;
    for s in &sets {
        let last = s.summary.frames.last().expect("non-empty");
        eprintln!(
            "{}: {} trajectories, final mean grain count {:.1}",
            s.source,
            s.metrics.len(),
            last.count.mean
        );
    }
    Ok(())
}
