//! Neighbor averaging over relation subgraphs (NARS) for node classification
//! on heterogeneous graphs.
//!
//! The pipeline has two phases. Preprocessing samples `K` subsets of relation
//! types, builds one homogeneous subgraph per subset and precomputes `L` hops
//! of neighbor-averaged features on each ([`metagraph`], [`propagate`]).
//! Training learns a per-subgraph, per-hop, per-dimension weighting of those
//! features (a 1-D convolution over the subgraph axis) jointly with a small
//! MLP classifier ([`model`], [`train`]). [`staged`] trains with only `p` of
//! the `K` feature tensors resident at a time.

pub mod accountant;
pub mod config;
pub mod error;
pub mod featfile;
pub mod featurize;
pub mod hetgraph;
pub mod matrix;
pub mod metagraph;
pub mod metrics;
pub mod model;
pub mod propagate;
pub mod rng;
pub mod scalar;
pub mod staged;
pub mod synthetic;
pub mod train;

pub use accountant::MemoryAccountant;
pub use config::Config;
pub use error::{NarsError, Result};
pub use hetgraph::{FeatureMatrix, HeteroGraph, LabelSet, NodeTypeId, RelationId, Task};
pub use matrix::Matrix;
pub use metagraph::{RelationSubgraph, RelationSubset};
pub use model::{AggCoefficients, NarsModel};
pub use propagate::{HopFeatureTensor, HopSource};
pub use scalar::Scalar;
