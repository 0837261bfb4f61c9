//! Grain-growth surrogate toolkit.
//!
//! Potts Monte Carlo trajectories ([`lattice_mc`]) are coarse-grained into
//! order-parameter fields ([`coarsen`]), compressed losslessly
//! ([`bijective_ae`]) and advanced in time by a message-passing network on
//! the latent grid ([`grid_gnn`]). [`trainer`] fits the model with a
//! multi-step loss, [`rollout`] runs the three inference schemes and
//! [`grainstats`] measures grain statistics of the results.

pub mod bijective_ae;
pub mod coarsen;
pub mod error;
pub mod exec;
pub mod field;
pub mod grainstats;
pub mod grid_gnn;
pub mod io;
pub mod lattice_mc;
pub mod model;
pub mod rng;
pub mod rollout;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use field::{Field, LatentField, OrderField, Trajectory};
pub use model::{ModelConfig, SurrogateParams};
