//! Potts-model Metropolis Monte Carlo on a periodic lattice.
//!
//! Energy is `J` per mismatched neighbor pair. Proposals copy the label of a
//! uniformly chosen neighbor, so labels can disappear but never appear.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::{unravel, wrapped_neighbor};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// 8 neighbors in 2D, 26 in 3D.
    #[default]
    Moore,
    /// 4 neighbors in 2D, 6 in 3D.
    VonNeumann,
}

impl Neighborhood {
    /// Neighbor offsets in a fixed order.
    pub fn offsets(self, ndim: usize) -> Vec<Vec<isize>> {
        let mut out = Vec::new();
        let total = 3usize.pow(ndim as u32);
        for code in 0..total {
            let mut c = code;
            let mut off = vec![0isize; ndim];
            for o in off.iter_mut().rev() {
                *o = (c % 3) as isize - 1;
                c /= 3;
            }
            let nonzero = off.iter().filter(|&&o| o != 0).count();
            let keep = match self {
                Neighborhood::Moore => nonzero > 0,
                Neighborhood::VonNeumann => nonzero == 1,
            };
            if keep {
                out.push(off);
            }
        }
        out
    }
}

/// Integer grain labels on a periodic 2D or 3D grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpinLattice {
    dims: Vec<usize>,
    labels: Vec<u32>,
    neighborhood: Neighborhood,
    offsets: Vec<Vec<isize>>,
}

impl SpinLattice {
    pub fn from_labels(dims: &[usize], labels: Vec<u32>, neighborhood: Neighborhood) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::config(format!("lattice must be 2D or 3D, got {}D", dims.len())));
        }
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::config(format!("lattice dims {dims:?} too small")));
        }
        let sites: usize = dims.iter().product();
        if labels.len() != sites {
            return Err(Error::shape(format!(
                "{} labels for a lattice of {} sites",
                labels.len(),
                sites
            )));
        }
        Ok(SpinLattice {
            dims: dims.to_vec(),
            labels,
            neighborhood,
            offsets: neighborhood.offsets(dims.len()),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn neighborhood(&self) -> Neighborhood {
        self.neighborhood
    }

    pub fn site_count(&self) -> usize {
        self.labels.len()
    }

    pub fn with_neighborhood(mut self, neighborhood: Neighborhood) -> Self {
        self.neighborhood = neighborhood;
        self.offsets = neighborhood.offsets(self.dims.len());
        self
    }

    pub fn set_label(&mut self, site: usize, label: u32) {
        self.labels[site] = label;
    }

    /// Fills `out` with the neighbor site indices of `site` in offset order.
    pub fn neighbors_into(&self, site: usize, out: &mut Vec<usize>) {
        out.clear();
        let mut coords = [0usize; 3];
        let coords = &mut coords[..self.dims.len()];
        unravel(site, &self.dims, coords);
        for off in &self.offsets {
            out.push(wrapped_neighbor(coords, off, &self.dims));
        }
    }

    pub fn neighbors(&self, site: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.offsets.len());
        self.neighbors_into(site, &mut out);
        out
    }

    fn mismatches(&self, neighbors: &[usize], label: u32) -> usize {
        neighbors.iter().filter(|&&n| self.labels[n] != label).count()
    }

    /// `coupling` times the number of neighbors carrying a different label.
    pub fn site_energy(&self, site: usize, coupling: f64) -> f64 {
        let nbrs = self.neighbors(site);
        coupling * self.mismatches(&nbrs, self.labels[site]) as f64
    }

    /// Total Potts energy, `coupling` per unordered mismatched pair.
    pub fn total_energy(&self, coupling: f64) -> f64 {
        let mut nbrs = Vec::with_capacity(self.offsets.len());
        let mut twice = 0usize;
        for site in 0..self.site_count() {
            self.neighbors_into(site, &mut nbrs);
            twice += self.mismatches(&nbrs, self.labels[site]);
        }
        coupling * twice as f64 / 2.0
    }

    /// Energy change if `site` took `label`, from the local neighborhood only.
    pub fn delta_energy(&self, site: usize, label: u32, coupling: f64) -> f64 {
        let nbrs = self.neighbors(site);
        let before = self.mismatches(&nbrs, self.labels[site]) as f64;
        let after = self.mismatches(&nbrs, label) as f64;
        coupling * (after - before)
    }

    /// Distinct labels present, sorted.
    pub fn label_set(&self) -> Vec<u32> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dims: Vec<usize>,
    pub num_labels: u32,
    pub kt: f64,
    pub coupling: f64,
    pub sweeps_per_frame: usize,
    pub num_frames: usize,
    pub seed: u64,
    #[serde(default)]
    pub neighborhood: Neighborhood,
    /// Sweeps run before the first recorded snapshot.
    #[serde(default)]
    pub warmup_sweeps: usize,
}

impl McConfig {
    /// One label per site, kT = 0.5 J, Moore neighborhood.
    pub fn fine_grained(dims: &[usize], sweeps_per_frame: usize, num_frames: usize, seed: u64) -> Self {
        McConfig {
            dims: dims.to_vec(),
            num_labels: dims.iter().product::<usize>() as u32,
            kt: 0.5,
            coupling: 1.0,
            sweeps_per_frame,
            num_frames,
            seed,
            neighborhood: Neighborhood::Moore,
            warmup_sweeps: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sweeps_per_frame < 1 {
            return Err(Error::config("sweeps_per_frame must be at least 1"));
        }
        if self.num_frames < 2 {
            return Err(Error::config("num_frames must be at least 2"));
        }
        if !(self.kt >= 0.0) || !self.kt.is_finite() {
            return Err(Error::config(format!("kT must be finite and non-negative, got {}", self.kt)));
        }
        if !(self.coupling > 0.0) || !self.coupling.is_finite() {
            return Err(Error::config(format!("coupling must be positive, got {}", self.coupling)));
        }
        Ok(())
    }
}

/// Independent uniform labels in `[0, num_labels)`.
pub fn init_lattice(dims: &[usize], num_labels: u32, seed: u64, neighborhood: Neighborhood) -> Result<SpinLattice> {
    if num_labels < 2 {
        return Err(Error::config(format!(
            "need at least 2 labels for grain boundaries to exist, got {num_labels}"
        )));
    }
    if !(2..=3).contains(&dims.len()) {
        return Err(Error::config(format!("lattice must be 2D or 3D, got {}D", dims.len())));
    }
    if let Some(&bad) = dims.iter().find(|&&n| n < 4) {
        return Err(Error::config(format!("every lattice dim must be >= 4, got {bad}")));
    }
    let mut rng = rng::substream(seed, &[tag::INIT]);
    let sites: usize = dims.iter().product();
    let labels = (0..sites).map(|_| rng.random_range(0..num_labels)).collect();
    SpinLattice::from_labels(dims, labels, neighborhood)
}

/// One Metropolis decision for `site` adopting `proposed`. Returns whether the
/// lattice changed.
pub fn try_flip(lattice: &mut SpinLattice, site: usize, proposed: u32, kt: f64, coupling: f64, rng: &mut Rng) -> bool {
    if lattice.labels[site] == proposed {
        return false;
    }
    let de = lattice.delta_energy(site, proposed, coupling);
    let accept = de <= 0.0 || (kt > 0.0 && rng.random::<f64>() < (-de / kt).exp());
    if accept {
        lattice.labels[site] = proposed;
    }
    accept
}

/// One sweep: `site_count` random-sequential attempts. Returns accepted flips.
pub fn mc_sweep(lattice: &mut SpinLattice, kt: f64, coupling: f64, rng: &mut Rng) -> usize {
    let n = lattice.site_count();
    let z = lattice.offsets.len();
    let mut nbrs = Vec::with_capacity(z);
    let mut accepted = 0;
    for _ in 0..n {
        let site = rng.random_range(0..n);
        lattice.neighbors_into(site, &mut nbrs);
        let proposed = lattice.labels[nbrs[rng.random_range(0..z)]];
        let current = lattice.labels[site];
        if proposed == current {
            continue;
        }
        let before = lattice.mismatches(&nbrs, current) as f64;
        let after = lattice.mismatches(&nbrs, proposed) as f64;
        let de = coupling * (after - before);
        if de <= 0.0 || (kt > 0.0 && rng.random::<f64>() < (-de / kt).exp()) {
            lattice.labels[site] = proposed;
            accepted += 1;
        }
    }
    accepted
}

/// `num_frames` snapshots; snapshot `k` follows
/// `warmup_sweeps + k * sweeps_per_frame` sweeps.
pub fn run_trajectory(config: &McConfig) -> Result<Vec<SpinLattice>> {
    config.validate()?;
    let mut lattice = init_lattice(&config.dims, config.num_labels, config.seed, config.neighborhood)?;
    let mut rng = rng::substream(config.seed, &[tag::SWEEP]);
    for _ in 0..config.warmup_sweeps {
        mc_sweep(&mut lattice, config.kt, config.coupling, &mut rng);
    }
    let mut frames = Vec::with_capacity(config.num_frames);
    frames.push(lattice.clone());
    for _ in 1..config.num_frames {
        for _ in 0..config.sweeps_per_frame {
            mc_sweep(&mut lattice, config.kt, config.coupling, &mut rng);
        }
        frames.push(lattice.clone());
    }
    Ok(frames)
}

/// `count` independent trajectories, trajectory `i` seeded with `seed + i`.
pub fn run_ensemble(config: &McConfig, count: usize, exec: Execution) -> Result<Vec<Vec<SpinLattice>>> {
    config.validate()?;
    exec.map_range(count, |i| {
        let cfg = McConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        run_trajectory(&cfg)
    })
    .into_iter()
    .collect()
}
