//! Grain identification and the statistics used to compare trajectories.
//!
//! Grains are face-connected components with periodic wrap: same-label
//! regions on a spin lattice, or cells at or above a threshold on an order
//! field. Components below `min_size` cells are discarded into the
//! background and counted.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{unravel, wrapped_neighbor, Field};
use crate::lattice_mc::{Neighborhood, SpinLattice};

pub const BACKGROUND: u32 = u32::MAX;
pub const DEFAULT_MIN_SIZE: usize = 2;
pub const HISTOGRAM_BIN_WIDTH: f64 = 0.15;
pub const HISTOGRAM_MAX: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrainLabeling {
    dims: Vec<usize>,
    /// Grain id per cell, or [`BACKGROUND`].
    ids: Vec<u32>,
    sizes: Vec<usize>,
    background: usize,
    discarded: usize,
}

impl GrainLabeling {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn background_cells(&self) -> usize {
        self.background
    }

    /// Components dropped for being smaller than the minimum size.
    pub fn discarded_components(&self) -> usize {
        self.discarded
    }
}

fn label_components(
    dims: &[usize],
    member: impl Fn(usize) -> bool,
    connected: impl Fn(usize, usize) -> bool,
    min_size: usize,
) -> GrainLabeling {
    let n: usize = dims.iter().product();
    let offsets = Neighborhood::VonNeumann.offsets(dims.len());
    let mut ids = vec![BACKGROUND; n];
    let mut visited = vec![false; n];
    let mut sizes = Vec::new();
    let mut discarded = 0;
    let mut queue = VecDeque::new();
    let mut members = Vec::new();
    let mut coords = vec![0; dims.len()];
    for start in 0..n {
        if visited[start] || !member(start) {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        members.clear();
        while let Some(cell) = queue.pop_front() {
            members.push(cell);
            unravel(cell, dims, &mut coords);
            for off in &offsets {
                let nb = wrapped_neighbor(&coords, off, dims);
                if !visited[nb] && member(nb) && connected(cell, nb) {
                    visited[nb] = true;
                    queue.push_back(nb);
                }
            }
        }
        if members.len() >= min_size {
            let id = sizes.len() as u32;
            for &m in &members {
                ids[m] = id;
            }
            sizes.push(members.len());
        } else {
            discarded += 1;
        }
    }
    let background = n - sizes.iter().sum::<usize>();
    GrainLabeling {
        dims: dims.to_vec(),
        ids,
        sizes,
        background,
        discarded,
    }
}

/// Components of cells with `phi >= threshold` (channel 0).
pub fn label_field(field: &Field, threshold: f64, min_size: usize) -> Result<GrainLabeling> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!("threshold must lie in (0, 1), got {threshold}")));
    }
    let c = field.channels();
    let data = field.data();
    Ok(label_components(
        field.dims(),
        |i| data[i * c] >= threshold,
        |_, _| true,
        min_size,
    ))
}

/// Interior cut-off for [`label_field`]: a fixed value or Otsu's
/// between-class-variance optimum over reference values.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Threshold {
    Fixed(f64),
    #[default]
    Otsu,
}

impl Threshold {
    pub fn resolve(self, reference: &[f64]) -> f64 {
        match self {
            Threshold::Fixed(t) => t,
            Threshold::Otsu => otsu_threshold(reference),
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("otsu") {
            return Ok(Threshold::Otsu);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| Error::config(format!("threshold must be a number or \"otsu\", got {s:?}")))?;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::config(format!("threshold must lie in (0, 1), got {t}")));
        }
        Ok(Threshold::Fixed(t))
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Fixed(t) => write!(f, "{t}"),
            Threshold::Otsu => f.write_str("otsu"),
        }
    }
}

const OTSU_BINS: usize = 256;

/// Otsu's threshold over values clamped to `[0, 1]`, 256 bins. Returns
/// the upper edge of the last background bin, or 0.5 when every value
/// falls in one bin.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let mut hist = [0.0f64; OTSU_BINS];
    for &v in values {
        let b = (v.clamp(0.0, 1.0) * OTSU_BINS as f64) as usize;
        hist[b.min(OTSU_BINS - 1)] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    let weighted: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * c).sum();
    let (mut w_lo, mut s_lo) = (0.0, 0.0);
    let (mut best, mut cut) = (0.0, None);
    for (i, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w_lo += c;
        s_lo += i as f64 * c;
        let w_hi = total - w_lo;
        if w_lo == 0.0 || w_hi == 0.0 {
            continue;
        }
        let diff = s_lo / w_lo - (weighted - s_lo) / w_hi;
        let between = w_lo * w_hi * diff * diff;
        if between > best {
            best = between;
            cut = Some(i);
        }
    }
    cut.map_or(0.5, |i| (i + 1) as f64 / OTSU_BINS as f64)
}

/// Same-label face-connected regions.
pub fn label_lattice(lattice: &SpinLattice, min_size: usize) -> GrainLabeling {
    let labels = lattice.labels();
    label_components(lattice.dims(), |_| true, |a, b| labels[a] == labels[b], min_size)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrainMetrics {
    pub count: usize,
    /// Mean cells per grain (area in 2D, volume in 3D); 0 without grains.
    pub mean_size: f64,
    /// Equivalent circle / sphere diameters in cell units.
    pub diameters: Vec<f64>,
    /// Diameters divided by their mean.
    pub normalized_diameters: Vec<f64>,
}

pub fn equivalent_diameter(size: usize, ndim: usize) -> f64 {
    let s = size as f64;
    match ndim {
        3 => (6.0 * s / std::f64::consts::PI).cbrt(),
        _ => (4.0 * s / std::f64::consts::PI).sqrt(),
    }
}

pub fn grain_metrics(labeling: &GrainLabeling) -> GrainMetrics {
    let d = labeling.dims.len();
    let count = labeling.count();
    let diameters: Vec<f64> = labeling.sizes.iter().map(|&s| equivalent_diameter(s, d)).collect();
    let mean_size = if count > 0 {
        labeling.sizes.iter().sum::<usize>() as f64 / count as f64
    } else {
        0.0
    };
    let mean_d = if count > 0 {
        diameters.iter().sum::<f64>() / count as f64
    } else {
        0.0
    };
    let normalized_diameters = diameters.iter().map(|x| x / mean_d).collect();
    GrainMetrics {
        count,
        mean_size,
        diameters,
        normalized_diameters,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Envelope {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Envelope {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        Envelope {
            mean: sum / n as f64,
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameSummary {
    pub frame: usize,
    pub count: Envelope,
    pub mean_size: Envelope,
}

/// Normalized-diameter density on fixed bins `[0, 3)` of width 0.15.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
    /// Samples at or above the last edge.
    pub overflow: usize,
    pub total: usize,
}

impl Histogram {
    pub fn from_samples(samples: &[f64]) -> Self {
        let bins = (HISTOGRAM_MAX / HISTOGRAM_BIN_WIDTH).round() as usize;
        let edges: Vec<f64> = (0..=bins).map(|i| i as f64 * HISTOGRAM_BIN_WIDTH).collect();
        let mut counts = vec![0; bins];
        let mut overflow = 0;
        for &s in samples {
            let b = (s / HISTOGRAM_BIN_WIDTH).floor();
            if b >= 0.0 && (b as usize) < bins {
                counts[b as usize] += 1;
            } else {
                overflow += 1;
            }
        }
        let total = samples.len();
        let density = counts
            .iter()
            .map(|&c| {
                if total > 0 {
                    c as f64 / (total as f64 * HISTOGRAM_BIN_WIDTH)
                } else {
                    0.0
                }
            })
            .collect();
        Histogram {
            edges,
            counts,
            density,
            overflow,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryStatistics {
    pub frames: Vec<FrameSummary>,
    /// Normalized diameters pooled over every trajectory and frame.
    pub histogram: Histogram,
}

/// Per-frame envelopes across trajectories plus the pooled histogram.
/// `metrics[i][t]` is trajectory `i`, frame `t`.
pub fn trajectory_statistics(metrics: &[Vec<GrainMetrics>]) -> Result<TrajectoryStatistics> {
    let first = metrics
        .first()
        .ok_or_else(|| Error::config("trajectory set is empty"))?;
    if metrics.iter().any(|m| m.len() != first.len()) {
        return Err(Error::shape("trajectories have different frame counts"));
    }
    let frames = (0..first.len())
        .map(|t| FrameSummary {
            frame: t,
            count: Envelope::of(metrics.iter().map(|m| m[t].count as f64)),
            mean_size: Envelope::of(metrics.iter().map(|m| m[t].mean_size)),
        })
        .collect();
    let pooled: Vec<f64> = metrics
        .iter()
        .flat_map(|m| m.iter().flat_map(|f| f.normalized_diameters.iter().copied()))
        .collect();
    Ok(TrajectoryStatistics {
        frames,
        histogram: Histogram::from_samples(&pooled),
    })
}

/// Normalized diameters of frame `t` pooled across trajectories.
pub fn pooled_normalized_diameters(metrics: &[Vec<GrainMetrics>], t: usize) -> Vec<f64> {
    metrics
        .iter()
        .flat_map(|m| m[t].normalized_diameters.iter().copied())
        .collect()
}

/// Two-sample Kolmogorov-Smirnov distance, `sup |F_a - F_b|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.is_empty() && b.is_empty() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Root mean square error per frame over all cells and channels.
pub fn rmse(predicted: &[Field], reference: &[Field]) -> Result<Vec<f64>> {
    if predicted.len() != reference.len() {
        return Err(Error::shape(format!(
            "{} predicted frames vs {} reference frames",
            predicted.len(),
            reference.len()
        )));
    }
    predicted
        .iter()
        .zip(reference)
        .map(|(p, r)| {
            if !p.same_shape(r) {
                return Err(Error::shape("predicted and reference frames differ in shape"));
            }
            let ss: f64 = p.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((ss / p.len() as f64).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared: if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 },
    }
}
