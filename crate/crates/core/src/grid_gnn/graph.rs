use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{unravel, wrapped_neighbor};
use crate::lattice_mc::Neighborhood;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    #[default]
    VonNeumann,
    Moore,
}

impl Connectivity {
    fn offsets(self, ndim: usize) -> Vec<Vec<isize>> {
        match self {
            Connectivity::VonNeumann => Neighborhood::VonNeumann.offsets(ndim),
            Connectivity::Moore => Neighborhood::Moore.offsets(ndim),
        }
    }
}

/// Directed graph over grid cells. Edges are stored grouped by receiver so
/// that aggregation visits incoming edges in one fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGraph {
    dims: Vec<usize>,
    node_count: usize,
    senders: Vec<usize>,
    receivers: Vec<usize>,
    /// Incoming edges of node `r` are `in_offsets[r]..in_offsets[r + 1]`.
    in_offsets: Vec<usize>,
    /// One column per edge: sender-minus-receiver displacement, then its norm.
    edge_features: DMatrix<f64>,
}

impl GridGraph {
    /// Builds a graph from arbitrary directed edges. Edges are stably
    /// re-ordered by receiver.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)], edge_features: DMatrix<f64>) -> Result<Self> {
        if edge_features.ncols() != edges.len() {
            return Err(Error::shape(format!(
                "{} feature columns for {} edges",
                edge_features.ncols(),
                edges.len()
            )));
        }
        if let Some(&(s, r)) = edges.iter().find(|&&(s, r)| s >= node_count || r >= node_count) {
            return Err(Error::shape(format!("edge ({s}, {r}) outside {node_count} nodes")));
        }
        let mut order: Vec<usize> = (0..edges.len()).collect();
        order.sort_by_key(|&e| edges[e].1);
        let senders = order.iter().map(|&e| edges[e].0).collect();
        let receivers: Vec<usize> = order.iter().map(|&e| edges[e].1).collect();
        let mut in_offsets = vec![0; node_count + 1];
        for &r in &receivers {
            in_offsets[r + 1] += 1;
        }
        for i in 0..node_count {
            in_offsets[i + 1] += in_offsets[i];
        }
        let mut feats = DMatrix::zeros(edge_features.nrows(), edges.len());
        for (new, &old) in order.iter().enumerate() {
            feats.set_column(new, &edge_features.column(old));
        }
        Ok(GridGraph {
            dims: vec![node_count],
            node_count,
            senders,
            receivers,
            in_offsets,
            edge_features: feats,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.senders.len()
    }

    pub fn senders(&self) -> &[usize] {
        &self.senders
    }

    pub fn receivers(&self) -> &[usize] {
        &self.receivers
    }

    pub fn incoming(&self, node: usize) -> std::ops::Range<usize> {
        self.in_offsets[node]..self.in_offsets[node + 1]
    }

    pub fn in_degree(&self, node: usize) -> usize {
        self.in_offsets[node + 1] - self.in_offsets[node]
    }

    pub fn edge_features(&self) -> &DMatrix<f64> {
        &self.edge_features
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.edge_features.nrows()
    }
}

/// One node per cell, periodic edges from every neighbor. On an axis of
/// length 2 the `+1` and `-1` neighbors coincide; both edges are kept, so
/// every node still has the full degree and two parallel incoming edges
/// from that neighbor with opposite displacement features.
pub fn build_grid_graph(dims: &[usize], connectivity: Connectivity) -> Result<GridGraph> {
    if dims.is_empty() {
        return Err(Error::shape("grid graph needs at least one axis"));
    }
    if let Some(&bad) = dims.iter().find(|&&n| n < 2) {
        return Err(Error::shape(format!("grid dims must be >= 2, got {bad}")));
    }
    let d = dims.len();
    let offsets = connectivity.offsets(d);
    let node_count: usize = dims.iter().product();
    let degree = offsets.len();
    let mut senders = Vec::with_capacity(node_count * degree);
    let mut receivers = Vec::with_capacity(node_count * degree);
    let mut feats = DMatrix::zeros(d + 1, node_count * degree);
    let mut coords = vec![0; d];
    for r in 0..node_count {
        unravel(r, dims, &mut coords);
        for off in &offsets {
            let e = senders.len();
            senders.push(wrapped_neighbor(&coords, off, dims));
            receivers.push(r);
            let mut norm2 = 0.0;
            for (k, &o) in off.iter().enumerate() {
                feats[(k, e)] = o as f64;
                norm2 += (o * o) as f64;
            }
            feats[(d, e)] = norm2.sqrt();
        }
    }
    let in_offsets = (0..=node_count).map(|r| r * degree).collect();
    Ok(GridGraph {
        dims: dims.to_vec(),
        node_count,
        senders,
        receivers,
        in_offsets,
        edge_features: feats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts() {
        let g = build_grid_graph(&[4, 4], Connectivity::VonNeumann).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (16, 64));
        let g = build_grid_graph(&[8, 8, 8], Connectivity::VonNeumann).unwrap();
        assert_eq!((g.node_count(), g.edge_count()), (512, 3072));
        let g = build_grid_graph(&[4, 4], Connectivity::Moore).unwrap();
        assert_eq!(g.edge_count(), 128);
        assert!(build_grid_graph(&[1, 4], Connectivity::VonNeumann).is_err());
    }

    #[test]
    fn smallest_periodic_grid_keeps_full_degree() {
        let g = build_grid_graph(&[2, 2], Connectivity::VonNeumann).unwrap();
        assert_eq!(g.edge_count(), 16);
        for n in 0..4 {
            assert_eq!(g.in_degree(n), 4);
            for e in g.incoming(n) {
                assert_ne!(g.senders()[e], n);
            }
        }
    }

    #[test]
    fn edges_pair_up_and_are_lattice_neighbors() {
        let dims = [5, 3];
        let g = build_grid_graph(&dims, Connectivity::VonNeumann).unwrap();
        let mut pairs: Vec<(usize, usize)> = g.senders().iter().copied().zip(g.receivers().iter().copied()).collect();
        for &(s, r) in &pairs {
            assert_ne!(s, r);
            let (a, b) = ((s / 3, s % 3), (r / 3, r % 3));
            let da = a.0.abs_diff(b.0).min(5 - a.0.abs_diff(b.0));
            let db = a.1.abs_diff(b.1).min(3 - a.1.abs_diff(b.1));
            assert_eq!(da + db, 1);
        }
        let mut reversed: Vec<(usize, usize)> = pairs.iter().map(|&(s, r)| (r, s)).collect();
        pairs.sort_unstable();
        reversed.sort_unstable();
        assert_eq!(pairs, reversed);
        for e in 0..g.edge_count() {
            let f = g.edge_features().column(e);
            assert_eq!(f[2], 1.0);
            assert_eq!(f[0].abs() + f[1].abs(), 1.0);
        }
    }

    #[test]
    fn from_edges_groups_by_receiver() {
        let feats = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        let g = GridGraph::from_edges(3, &[(0, 2), (2, 0), (1, 2)], feats).unwrap();
        assert_eq!(g.receivers(), &[0, 2, 2]);
        assert_eq!(g.senders(), &[2, 0, 1]);
        assert_eq!(g.edge_features().row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0, 3.0]);
        assert_eq!(g.incoming(1), 1..1);
        assert_eq!(g.incoming(2), 1..3);
    }
}
