use std::f64::consts::TAU;
use std::fmt::Write as _;

use grain_core::field::unravel;
use grain_core::rollout::{rollout, Algorithm, RolloutConfig, RolloutReport};
use grain_core::{Field, SurrogateParams};
use serde::Serialize;

use super::{create_dir, write_sidecar};
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub mesh: usize,
    pub ratio: usize,
    pub algorithm: Algorithm,
    pub nodes: usize,
    pub edges: usize,
    pub peak_elements: usize,
    pub step_seconds: f64,
    /// Measured heap peak above the pre-rollout baseline, with `alloc-stats`.
    pub alloc_peak_bytes: Option<usize>,
}

/// Smooth deterministic initial field; timing does not depend on content.
fn probe_field(dims: &[usize]) -> Field {
    let n: usize = dims.iter().product();
    let mut c = vec![0; dims.len()];
    let data = (0..n)
        .map(|i| {
            unravel(i, dims, &mut c);
            let phase: f64 = c.iter().zip(dims).enumerate().map(|(a, (&x, &d))| (a + 1) as f64 * x as f64 / d as f64).sum();
            0.5 + 0.5 * (TAU * phase).sin()
        })
        .collect();
    Field::from_vec(dims, 1, data).expect("consistent shape")
}

fn measured(f: impl FnOnce() -> grain_core::Result<RolloutReport>) -> grain_core::Result<(RolloutReport, Option<usize>)> {
    #[cfg(feature = "alloc-stats")]
    {
        let base = crate::alloc::reset_peak();
        let r = f()?;
        Ok((r, Some(crate::alloc::peak_since(base))))
    }
    #[cfg(not(feature = "alloc-stats"))]
    {
        Ok((f()?, None))
    }
}

pub fn measure(cfg: &RunConfig) -> Result<Vec<BenchRow>, CliError> {
    let d = cfg.bench_ndim;
    if !(2..=3).contains(&d) {
        return Err(CliError::Config(format!("bench_ndim must be 2 or 3, got {d}")));
    }
    if cfg.bench_steps == 0 {
        return Err(CliError::Config("bench_steps must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &mesh in &cfg.bench_meshes {
        let dims = vec![mesh; d];
        let phi0 = probe_field(&dims);
        for &ratio in &cfg.bench_ratios {
            if mesh % ratio != 0 || mesh / ratio < 2 {
                eprintln!("skipping mesh {mesh} at ratio {ratio}: latent grid too small or not integral");
                continue;
            }
            let model_cfg = grain_core::ModelConfig { ratio, ..cfg.model(d, 1) };
            let params = SurrogateParams::new(&model_cfg, cfg.seed)?;
            let algorithms: &[Algorithm] = if ratio == 1 {
                &[Algorithm::GnnOnly]
            } else {
                &[Algorithm::AeOriginal, Algorithm::AeLatent]
            };
            for &algorithm in algorithms {
                let rc = RolloutConfig {
                    emit_every: cfg.bench_steps,
                    ..RolloutConfig::new(algorithm, cfg.bench_steps)
                };
                let (report, alloc_peak_bytes) = measured(|| rollout(&phi0, &params, &rc))?;
                rows.push(BenchRow {
                    mesh,
                    ratio,
                    algorithm,
                    nodes: report.graph_nodes,
                    edges: report.graph_edges,
                    peak_elements: report.peak_elements,
                    step_seconds: report.mean_step_seconds(),
                    alloc_peak_bytes,
                });
            }
        }
    }
    Ok(rows)
}

pub fn long_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("mesh,ratio,algorithm,nodes,edges,peak_elements,step_seconds,alloc_peak_bytes\n");
    for r in rows {
        let alloc = r.alloc_peak_bytes.map(|b| b.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:e},{alloc}",
            r.mesh, r.ratio, r.algorithm, r.nodes, r.edges, r.peak_elements, r.step_seconds
        );
    }
    s
}

fn column(r: &BenchRow) -> String {
    match r.algorithm {
        Algorithm::GnnOnly => "gnn_only".into(),
        a => format!("{a}_n{}", r.ratio),
    }
}

/// One row per mesh; an element-count and a seconds-per-step column for
/// every algorithm and ratio.
pub fn table_csv(rows: &[BenchRow]) -> String {
    let mut cols: Vec<String> = Vec::new();
    for r in rows {
        let c = column(r);
        if !cols.contains(&c) {
            cols.push(c);
        }
    }
    let mut meshes: Vec<usize> = rows.iter().map(|r| r.mesh).collect();
    meshes.dedup();
    let mut s = String::from("mesh");
    for c in &cols {
        let _ = write!(s, ",{c}_elements,{c}_seconds");
    }
    s.push('\n');
    for m in meshes {
        let _ = write!(s, "{m}");
        for c in &cols {
            match rows.iter().find(|r| r.mesh == m && column(r) == *c) {
                Some(r) => {
                    let _ = write!(s, ",{},{:e}", r.peak_elements, r.step_seconds);
                }
                None => s.push_str(",,"),
            }
        }
        s.push('\n');
    }
    s
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let rows = measure(cfg)?;
    create_dir(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("bench_rows.csv"), long_csv(&rows))?;
    std::fs::write(cfg.out_dir.join("bench_table.csv"), table_csv(&rows))?;
    write_sidecar(&cfg.out_dir.join("bench.json"), "bench", cfg, serde_json::json!({ "rows": rows }))?;
    for r in &rows {
        let base = rows.iter().find(|b| b.mesh == r.mesh && b.algorithm == Algorithm::GnnOnly);
        let node_ratio = base.map(|b| format!("{}:1", b.nodes / r.nodes.max(1))).unwrap_or_default();
        println!(
            "mesh {:>4}  n={}  {:<11}  nodes {:>8}  edges {:>9}  elements {:>10}  {:.3e} s/step  {node_ratio}",
            r.mesh,
            r.ratio,
            r.algorithm.name(),
            r.nodes,
            r.edges,
            r.peak_elements,
            r.step_seconds
        );
    }
    Ok(())
}
