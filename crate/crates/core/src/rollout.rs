//! Autoregressive inference.
//!
//! * [`Algorithm::GnnOnly`]: the GNN stepped directly on the full grid.
//! * [`Algorithm::AeOriginal`]: `φ ← decode(G(encode(φ)))` every step.
//! * [`Algorithm::AeLatent`]: encode once, step `G` in latent space, decode
//!   only the frames that are recorded.
//!
//! Divergence is reported, never clamped.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bijective_ae::{decode, encode};
use crate::error::{Error, Result};
use crate::field::{Field, Trajectory};
use crate::grid_gnn::{build_grid_graph, gnn_forward, Connectivity, GnnParams, GridGraph};
use crate::model::SurrogateParams;

pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    GnnOnly,
    AeOriginal,
    AeLatent,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::GnnOnly, Algorithm::AeOriginal, Algorithm::AeLatent];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::GnnOnly => "gnn_only",
            Algorithm::AeOriginal => "ae_original",
            Algorithm::AeLatent => "ae_latent",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm {s:?}; expected gnn_only, ae_original or ae_latent")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    /// Recording cadence; only the latent scheme skips decoding in between.
    pub emit_every: usize,
    pub divergence_threshold: f64,
}

impl RolloutConfig {
    pub fn new(algorithm: Algorithm, steps: usize) -> Self {
        RolloutConfig {
            algorithm,
            steps,
            emit_every: 1,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("rollout needs at least one step"));
        }
        if self.emit_every < 1 {
            return Err(Error::config("emit_every must be at least 1"));
        }
        Ok(())
    }

    fn records(&self, step: usize) -> bool {
        step % self.emit_every == 0 || step == self.steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutReport {
    pub algorithm: Algorithm,
    /// Recorded frames, starting with the initial field at step 0.
    pub trajectory: Trajectory,
    pub steps: Vec<usize>,
    /// `max |φ|` of each recorded frame.
    pub max_abs: Vec<f64>,
    /// Wall-clock seconds of each step, including any decode it performed.
    pub step_seconds: Vec<f64>,
    pub encode_calls: usize,
    pub decode_calls: usize,
    pub graph_nodes: usize,
    pub graph_edges: usize,
    /// Analytic peak count of live `f64` values during one step.
    pub peak_elements: usize,
    /// First recorded step whose frame is non-finite or beyond the threshold.
    pub diverged_at: Option<usize>,
}

impl RolloutReport {
    pub fn mean_step_seconds(&self) -> f64 {
        self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64
    }

    /// `step,max_abs[,rmse]` per recorded frame, plus the step wall-clock.
    pub fn metrics_csv(&self, rmse: Option<&[f64]>) -> String {
        let mut s = String::from("step,max_abs,step_seconds");
        if rmse.is_some() {
            s += ",rmse";
        }
        s += ",peak_elements\n";
        for (i, (&step, &m)) in self.steps.iter().zip(&self.max_abs).enumerate() {
            let secs = if step == 0 { 0.0 } else { self.step_seconds[step - 1] };
            s += &format!("{step},{m:e},{secs:e}");
            if let Some(r) = rmse {
                s += &format!(",{:e}", r[i]);
            }
            s += &format!(",{}\n", self.peak_elements);
        }
        s
    }
}

/// Live values during one GNN step on a graph of `nodes` and `edges`:
/// input and output fields, node latents with their aggregate and the
/// stacked node-update input, edge latents with the stacked edge-update
/// input and one hidden activation per edge.
pub fn gnn_step_elements(nodes: usize, edges: usize, channels: usize, hidden: usize) -> usize {
    2 * channels * nodes + 4 * hidden * nodes + 5 * hidden * edges
}

/// Peak live values for one step of `algorithm` on a field of `cells`
/// full-resolution cells.
pub fn peak_elements(algorithm: Algorithm, cells: usize, channels: usize, graph: &GridGraph, hidden: usize, latent_channels: usize) -> usize {
    let gnn = gnn_step_elements(graph.node_count(), graph.edge_count(), latent_channels, hidden);
    match algorithm {
        Algorithm::GnnOnly => gnn,
        // full field kept alongside the step; encode and decode each hold two copies
        Algorithm::AeOriginal => (cells * channels + gnn).max(2 * cells * channels),
        Algorithm::AeLatent => gnn,
    }
}

struct Recorder {
    frames: Vec<Field>,
    steps: Vec<usize>,
    max_abs: Vec<f64>,
    diverged_at: Option<usize>,
    threshold: f64,
}

impl Recorder {
    fn new(threshold: f64) -> Self {
        Recorder {
            frames: Vec::new(),
            steps: Vec::new(),
            max_abs: Vec::new(),
            diverged_at: None,
            threshold,
        }
    }

    fn push(&mut self, step: usize, frame: Field) {
        let m = frame.data().iter().fold(0.0f64, |a, v| if v.is_nan() { f64::NAN } else { a.max(v.abs()) });
        if self.diverged_at.is_none() && !(m <= self.threshold) {
            self.diverged_at = Some(step);
        }
        self.frames.push(frame);
        self.steps.push(step);
        self.max_abs.push(m);
    }
}

fn check_initial(phi0: &Field, params: &SurrogateParams) -> Result<GridGraph> {
    if phi0.channels() != params.ae.in_channels() {
        return Err(Error::shape(format!(
            "initial field has {} channels, model expects {}",
            phi0.channels(),
            params.ae.in_channels()
        )));
    }
    params.graph_for(phi0.dims())
}

/// `φ_{t+1} = decode(G(encode(φ_t)))`: every step pays one encode and one decode.
pub fn rollout_original(phi0: &Field, params: &SurrogateParams, config: &RolloutConfig) -> Result<RolloutReport> {
    config.validate()?;
    let graph = check_initial(phi0, params)?;
    let mut rec = Recorder::new(config.divergence_threshold);
    rec.push(0, phi0.clone());
    let mut phi = phi0.clone();
    let mut step_seconds = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let t = Instant::now();
        let z = encode(&phi, &params.ae)?;
        let z = gnn_forward(&z, &params.gnn, &graph)?;
        phi = decode(&z, &params.ae)?;
        step_seconds.push(t.elapsed().as_secs_f64());
        if config.records(step) {
            rec.push(step, phi.clone());
        }
    }
    finish(Algorithm::AeOriginal, rec, step_seconds, config.steps, config.steps, phi0, params, &graph)
}

/// Encode once, step in latent space, decode only recorded frames.
pub fn rollout_latent(phi0: &Field, params: &SurrogateParams, config: &RolloutConfig) -> Result<RolloutReport> {
    config.validate()?;
    let graph = check_initial(phi0, params)?;
    let mut rec = Recorder::new(config.divergence_threshold);
    rec.push(0, phi0.clone());
    let mut step_seconds = Vec::with_capacity(config.steps);
    let t = Instant::now();
    let mut z = encode(phi0, &params.ae)?;
    let encode_secs = t.elapsed().as_secs_f64();
    let mut decodes = 0;
    for step in 1..=config.steps {
        let t = Instant::now();
        z = gnn_forward(&z, &params.gnn, &graph)?;
        let frame = if config.records(step) {
            decodes += 1;
            Some(decode(&z, &params.ae)?)
        } else {
            None
        };
        let mut secs = t.elapsed().as_secs_f64();
        if step == 1 {
            secs += encode_secs;
        }
        step_seconds.push(secs);
        if let Some(f) = frame {
            rec.push(step, f);
        }
    }
    finish(Algorithm::AeLatent, rec, step_seconds, 1, decodes, phi0, params, &graph)
}

/// The GNN stepped directly on the full-resolution field.
pub fn rollout_gnn_only(phi0: &Field, gnn: &GnnParams, config: &RolloutConfig) -> Result<RolloutReport> {
    config.validate()?;
    let cfg = gnn.config();
    if phi0.channels() != cfg.latent_channels || phi0.ndim() != cfg.ndim {
        return Err(Error::shape(format!(
            "GNN-only rollout needs {}D fields with {} channels, got {}D with {}",
            cfg.ndim,
            cfg.latent_channels,
            phi0.ndim(),
            phi0.channels()
        )));
    }
    let graph = build_grid_graph(phi0.dims(), cfg.connectivity)?;
    let mut rec = Recorder::new(config.divergence_threshold);
    rec.push(0, phi0.clone());
    let mut phi = phi0.clone();
    let mut step_seconds = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        let t = Instant::now();
        phi = gnn_forward(&phi, gnn, &graph)?;
        step_seconds.push(t.elapsed().as_secs_f64());
        if config.records(step) {
            rec.push(step, phi.clone());
        }
    }
    let peak = gnn_step_elements(graph.node_count(), graph.edge_count(), cfg.latent_channels, cfg.hidden);
    Ok(RolloutReport {
        algorithm: Algorithm::GnnOnly,
        trajectory: Trajectory::new(rec.frames)?,
        steps: rec.steps,
        max_abs: rec.max_abs,
        step_seconds,
        encode_calls: 0,
        decode_calls: 0,
        graph_nodes: graph.node_count(),
        graph_edges: graph.edge_count(),
        peak_elements: peak,
        diverged_at: rec.diverged_at,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    algorithm: Algorithm,
    rec: Recorder,
    step_seconds: Vec<f64>,
    encode_calls: usize,
    decode_calls: usize,
    phi0: &Field,
    params: &SurrogateParams,
    graph: &GridGraph,
) -> Result<RolloutReport> {
    let g = params.gnn.config();
    Ok(RolloutReport {
        algorithm,
        trajectory: Trajectory::new(rec.frames)?,
        steps: rec.steps,
        max_abs: rec.max_abs,
        step_seconds,
        encode_calls,
        decode_calls,
        graph_nodes: graph.node_count(),
        graph_edges: graph.edge_count(),
        peak_elements: peak_elements(algorithm, phi0.cell_count(), phi0.channels(), graph, g.hidden, g.latent_channels),
        diverged_at: rec.diverged_at,
    })
}

/// Dispatches on `config.algorithm`. The GNN-only scheme needs a model
/// without compression stages.
pub fn rollout(phi0: &Field, params: &SurrogateParams, config: &RolloutConfig) -> Result<RolloutReport> {
    match config.algorithm {
        Algorithm::AeOriginal => rollout_original(phi0, params, config),
        Algorithm::AeLatent => rollout_latent(phi0, params, config),
        Algorithm::GnnOnly => {
            if params.ratio() != 1 {
                return Err(Error::config(format!(
                    "gnn_only rollout needs a model with compression ratio 1, this one has {}",
                    params.ratio()
                )));
            }
            rollout_gnn_only(phi0, &params.gnn, config)
        }
    }
}

/// Latent rollout on a grid and horizon other than the training ones. The
/// graph is rebuilt for the new latent grid; every MLP is node- or
/// edge-local, so the parameters carry over unchanged.
pub fn extrapolate(phi0: &Field, params: &SurrogateParams, steps: usize, emit_every: usize) -> Result<RolloutReport> {
    let config = RolloutConfig {
        emit_every,
        ..RolloutConfig::new(Algorithm::AeLatent, steps)
    };
    rollout_latent(phi0, params, &config)
}

/// Largest framewise max-abs difference between two recorded rollouts.
pub fn max_discrepancy(a: &RolloutReport, b: &RolloutReport) -> Result<f64> {
    if a.steps != b.steps {
        return Err(Error::shape("rollouts recorded different steps"));
    }
    Ok(a
        .trajectory
        .frames()
        .iter()
        .zip(b.trajectory.frames())
        .map(|(x, y)| x.max_abs_diff(y))
        .fold(0.0, f64::max))
}

/// Graph sizes for a field of `dims` at compression `ratio`.
pub fn graph_size(dims: &[usize], ratio: usize, connectivity: Connectivity) -> Result<(usize, usize)> {
    if let Some(&bad) = dims.iter().find(|&&d| d % ratio != 0) {
        return Err(Error::shape(format!("dim {bad} not divisible by compression ratio {ratio}")));
    }
    let latent: Vec<usize> = dims.iter().map(|d| d / ratio).collect();
    let g = build_grid_graph(&latent, connectivity)?;
    Ok((g.node_count(), g.edge_count()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn field(dims: &[usize]) -> Field {
        let n: usize = dims.iter().product();
        Field::from_vec(dims, 1, (0..n).map(|i| 0.5 + 0.3 * (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    fn trained_like(ratio: usize, seed: u64) -> SurrogateParams {
        let mut p = SurrogateParams::new(&ModelConfig::new(2, ratio, 8, 2), seed).unwrap();
        let mut flat = p.flatten();
        let mut r = rng::substream(seed, &[99]);
        for v in &mut flat {
            *v += 0.02 * r.sample::<f64, _>(StandardNormal);
        }
        p.load_flat(&flat).unwrap();
        p
    }

    #[test]
    fn untrained_model_is_constant() {
        let p = SurrogateParams::new(&ModelConfig::new(2, 2, 8, 2), 1).unwrap();
        let phi = field(&[8, 8]);
        let r = rollout_original(&phi, &p, &RolloutConfig::new(Algorithm::AeOriginal, 4)).unwrap();
        for f in r.trajectory.frames() {
            assert!(f.max_abs_diff(&phi) < 1e-12);
        }
        let q = SurrogateParams::new(&ModelConfig::new(2, 1, 8, 2), 1).unwrap();
        let r = rollout(&phi, &q, &RolloutConfig::new(Algorithm::GnnOnly, 3)).unwrap();
        assert!(r.trajectory.frames().iter().all(|f| *f == phi));
    }

    #[test]
    fn one_step_is_one_application() {
        let p = trained_like(2, 2);
        let phi = field(&[8, 8]);
        let g = p.graph_for(&[8, 8]).unwrap();
        let expect = decode(&gnn_forward(&encode(&phi, &p.ae).unwrap(), &p.gnn, &g).unwrap(), &p.ae).unwrap();
        let r = rollout_original(&phi, &p, &RolloutConfig::new(Algorithm::AeOriginal, 1)).unwrap();
        assert_eq!(r.trajectory.frame(1), &expect);
    }

    #[test]
    fn latent_matches_original() {
        let p = trained_like(2, 3);
        let phi = field(&[16, 16]);
        let a = rollout_original(&phi, &p, &RolloutConfig::new(Algorithm::AeOriginal, 25)).unwrap();
        let b = rollout_latent(&phi, &p, &RolloutConfig::new(Algorithm::AeLatent, 25)).unwrap();
        assert_eq!(a.steps, (0..=25).collect::<Vec<_>>());
        assert!(max_discrepancy(&a, &b).unwrap() < 1e-4);
        assert_eq!((a.encode_calls, a.decode_calls), (25, 25));
        assert_eq!((b.encode_calls, b.decode_calls), (1, 25));
    }

    #[test]
    fn sparse_emission_counts() {
        let p = trained_like(2, 4);
        let phi = field(&[8, 8]);
        let cfg = RolloutConfig {
            emit_every: 7,
            ..RolloutConfig::new(Algorithm::AeLatent, 7)
        };
        let r = rollout_latent(&phi, &p, &cfg).unwrap();
        assert_eq!((r.encode_calls, r.decode_calls), (1, 1));
        assert_eq!(r.steps, vec![0, 7]);
        let cfg = RolloutConfig {
            emit_every: 3,
            ..RolloutConfig::new(Algorithm::AeLatent, 7)
        };
        assert_eq!(rollout_latent(&phi, &p, &cfg).unwrap().steps, vec![0, 3, 6, 7]);
        assert!(rollout_latent(&phi, &p, &RolloutConfig::new(Algorithm::AeLatent, 0)).is_err());
    }

    #[test]
    fn node_counts_scale_with_ratio() {
        let phi = field(&[16, 16]);
        let full = rollout(&phi, &trained_like(1, 5), &RolloutConfig::new(Algorithm::GnnOnly, 1)).unwrap();
        let ae = rollout(&phi, &trained_like(4, 5), &RolloutConfig::new(Algorithm::AeLatent, 1)).unwrap();
        assert_eq!(full.graph_nodes, 256);
        assert_eq!(full.graph_nodes, 16 * ae.graph_nodes);
        assert_eq!(full.graph_edges, 16 * ae.graph_edges);
        assert!(rollout(&phi, &trained_like(2, 5), &RolloutConfig::new(Algorithm::GnnOnly, 1)).is_err());
    }

    #[test]
    fn extrapolation_to_larger_grid() {
        let p = trained_like(2, 6);
        let small = field(&[8, 8]);
        let a = extrapolate(&small, &p, 5, 1).unwrap();
        let b = rollout_latent(&small, &p, &RolloutConfig::new(Algorithm::AeLatent, 5)).unwrap();
        assert_eq!(a, RolloutReport { step_seconds: a.step_seconds.clone(), ..b });
        let big = extrapolate(&field(&[24, 24]), &p, 40, 10).unwrap();
        assert_eq!(big.steps, vec![0, 10, 20, 30, 40]);
        assert_eq!(big.trajectory.frame(4).dims(), &[24, 24]);
        assert!(extrapolate(&field(&[9, 8]), &p, 2, 1).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut p = trained_like(1, 7);
        for l in &mut p.gnn.node_decoder.layers.last_mut().unwrap().bias.iter_mut() {
            *l = 3.0;
        }
        let r = rollout(&field(&[8, 8]), &p, &RolloutConfig::new(Algorithm::GnnOnly, 10)).unwrap();
        assert_eq!(r.diverged_at, Some(4));
        assert!(r.max_abs[4] > 10.0);
    }

    #[test]
    fn metrics_csv_layout() {
        let p = trained_like(2, 8);
        let r = rollout_latent(&field(&[8, 8]), &p, &RolloutConfig::new(Algorithm::AeLatent, 2)).unwrap();
        let csv = r.metrics_csv(Some(&[0.0, 0.1, 0.2]));
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,max_abs,step_seconds,rmse,peak_elements");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("1,"));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("latent".parse::<Algorithm>().is_err());
    }
}
