//! The surrogate `F = decode ∘ G ∘ encode` as one parameter bundle.

use serde::{Deserialize, Serialize};

use crate::bijective_ae::{AeGrads, AeParams, DEFAULT_CONDITION_BOUND};
use crate::error::{Error, Result};
use crate::grid_gnn::{build_grid_graph, Activation, Aggregation, Connectivity, GnnConfig, GnnGrads, GnnParams, GridGraph};

/// Architecture hyperparameters. `ratio = 1` is the GNN-only baseline:
/// no autoencoder stages, the graph lives on the full-resolution grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ndim: usize,
    pub channels: usize,
    /// Per-axis compression `n`, a power of two.
    pub ratio: usize,
    pub hidden: usize,
    pub layers: usize,
    pub activation: Activation,
    pub connectivity: Connectivity,
    pub aggregation: Aggregation,
    pub condition_bound: f64,
}

impl ModelConfig {
    pub fn new(ndim: usize, ratio: usize, hidden: usize, layers: usize) -> Self {
        ModelConfig {
            ndim,
            channels: 1,
            ratio,
            hidden,
            layers,
            activation: Activation::default(),
            connectivity: Connectivity::default(),
            aggregation: Aggregation::default(),
            condition_bound: DEFAULT_CONDITION_BOUND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.ndim) {
            return Err(Error::config(format!("ndim must be 2 or 3, got {}", self.ndim)));
        }
        if self.channels < 1 {
            return Err(Error::config("channels must be positive"));
        }
        if !self.ratio.is_power_of_two() {
            return Err(Error::config(format!("compression ratio must be a power of two, got {}", self.ratio)));
        }
        if !(self.condition_bound > 1.0) {
            return Err(Error::config("condition bound must exceed 1"));
        }
        self.gnn_config().validate()
    }

    pub fn stages(&self) -> usize {
        self.ratio.trailing_zeros() as usize
    }

    pub fn latent_channels(&self) -> usize {
        self.channels * self.ratio.pow(self.ndim as u32)
    }

    pub fn gnn_config(&self) -> GnnConfig {
        GnnConfig {
            ndim: self.ndim,
            latent_channels: self.latent_channels(),
            hidden: self.hidden,
            layers: self.layers,
            activation: self.activation,
            connectivity: self.connectivity,
            aggregation: self.aggregation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub ae: AeParams,
    pub gnn: GnnParams,
}

impl SurrogateParams {
    /// Random orthogonal mixing and fan-in GNN weights with a zero decoder
    /// output layer, so the untrained surrogate is the identity map.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ae = AeParams::random_orthogonal(config.ndim, config.channels, config.stages(), seed)
            .with_condition_bound(config.condition_bound)?;
        let gnn = GnnParams::new(config.gnn_config(), seed)?;
        Ok(SurrogateParams { ae, gnn })
    }

    pub fn from_parts(ae: AeParams, gnn: GnnParams) -> Result<Self> {
        if ae.latent_channels() != gnn.config().latent_channels || ae.ndim() != gnn.config().ndim {
            return Err(Error::shape(format!(
                "autoencoder yields {}D latents with {} channels, GNN expects {}D with {}",
                ae.ndim(),
                ae.latent_channels(),
                gnn.config().ndim,
                gnn.config().latent_channels
            )));
        }
        Ok(SurrogateParams { ae, gnn })
    }

    pub fn config(&self) -> ModelConfig {
        let g = self.gnn.config();
        ModelConfig {
            ndim: self.ae.ndim(),
            channels: self.ae.in_channels(),
            ratio: self.ae.ratio(),
            hidden: g.hidden,
            layers: g.layers,
            activation: g.activation,
            connectivity: g.connectivity,
            aggregation: g.aggregation,
            condition_bound: self.ae.condition_bound(),
        }
    }

    pub fn ratio(&self) -> usize {
        self.ae.ratio()
    }

    pub fn param_count(&self) -> usize {
        self.ae.param_count() + self.gnn.param_count()
    }

    /// Autoencoder entries first, then the GNN.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.ae.flatten_into(&mut out);
        self.gnn.flatten_into(&mut out);
        out
    }

    /// Loads a flat vector and refreshes the autoencoder inverses.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, model has {}",
                values.len(),
                self.param_count()
            )));
        }
        let at = self.ae.load_flat(values);
        self.gnn.load_flat(&values[at..]);
        self.ae.refresh_inverses()
    }

    /// Latent grid for a field of `dims`, checking divisibility.
    pub fn latent_dims(&self, dims: &[usize]) -> Result<Vec<usize>> {
        if dims.len() != self.ae.ndim() {
            return Err(Error::shape(format!(
                "model is {}D, field is {}D",
                self.ae.ndim(),
                dims.len()
            )));
        }
        let n = self.ratio();
        if let Some(&bad) = dims.iter().find(|&&d| d % n != 0) {
            return Err(Error::shape(format!("dim {bad} not divisible by compression ratio {n}")));
        }
        Ok(dims.iter().map(|d| d / n).collect())
    }

    pub fn graph_for(&self, dims: &[usize]) -> Result<GridGraph> {
        build_grid_graph(&self.latent_dims(dims)?, self.gnn.config().connectivity)
    }

    pub fn zero_grads(&self) -> SurrogateGrads {
        SurrogateGrads {
            ae: AeGrads::zeros(&self.ae),
            gnn: self.gnn.zero_grads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGrads {
    pub ae: AeGrads,
    pub gnn: GnnGrads,
}

impl SurrogateGrads {
    /// Same layout as [`SurrogateParams::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.ae.flatten_into(&mut out);
        self.gnn.flatten_into(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_channels_follow_ratio() {
        assert_eq!(ModelConfig::new(2, 4, 8, 1).latent_channels(), 16);
        assert_eq!(ModelConfig::new(3, 2, 8, 1).latent_channels(), 8);
        assert_eq!(ModelConfig::new(2, 1, 8, 1).stages(), 0);
        assert!(ModelConfig::new(2, 3, 8, 1).validate().is_err());
        assert!(ModelConfig::new(4, 2, 8, 1).validate().is_err());
    }

    #[test]
    fn flat_round_trip() {
        let p = SurrogateParams::new(&ModelConfig::new(2, 2, 6, 2), 11).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.param_count());
        let mut q = SurrogateParams::new(&ModelConfig::new(2, 2, 6, 2), 12).unwrap();
        assert_ne!(q.flatten(), flat);
        q.load_flat(&flat).unwrap();
        assert_eq!(q, p);
        assert!(q.load_flat(&flat[1..]).is_err());
        assert_eq!(p.config(), ModelConfig::new(2, 2, 6, 2));
        assert_eq!(p.zero_grads().flatten().len(), flat.len());
    }

    #[test]
    fn graph_dims() {
        let p = SurrogateParams::new(&ModelConfig::new(2, 4, 4, 1), 0).unwrap();
        assert_eq!(p.graph_for(&[32, 32]).unwrap().node_count(), 64);
        assert!(p.graph_for(&[30, 32]).is_err());
        assert!(p.graph_for(&[32, 32, 32]).is_err());
    }
}
