//! Friedkin–Johnsen opinion dynamics on information cascades.
//!
//! Opinions on a directed follow graph move only when a post reaches a node
//! through resharing. [`cascade`] samples who sees a post, [`fjc`] turns each
//! exposure into an opinion update, [`fj`] provides the classical
//! Friedkin–Johnsen baseline, [`polarization`] measures the outcome, and
//! [`experiment`] wires everything into reproducible Monte Carlo runs.

pub mod cascade;
pub mod error;
pub mod experiment;
pub mod fj;
pub mod fjc;
pub mod graph;
mod linsolve;
pub mod polarization;

pub use cascade::{
    estimate_theta, expected_cascade_size_bruteforce, predecessors, sample_cascade, CascadeRealization, ReshareModel,
    ReshareTrace,
};
pub use error::{Error, Result};
pub use experiment::{
    replay_experiment, run_experiment, AggregateReport, Ecdf, ExperimentConfig, GraphSource, InitialOpinions,
    SusceptibilityStrategy, ThetaSpec,
};
pub use fj::{
    fj_async_run, fj_fixed_point, fj_iterate_until, fj_step, gossip_parameters, influence_map, GossipParameters,
    InfluenceMap, Susceptibility,
};
pub use fjc::{fjc_update, replay_trace, run_fjc, FjcEngine, FjcRunRecord, SeedSchedule, UpdateMode};
pub use graph::{InfluenceMatrix, LayerDecomposition, NodeId, NodeMap, SocialGraph, SocialMatrix};
pub use linsolve::{fj_residual, SolverChoice};
pub use polarization::{polarization_value, PolarizationMetric, PolarizingVectorSet};
