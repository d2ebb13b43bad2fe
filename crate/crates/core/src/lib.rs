//! Growing-batch neural fitted Q-iteration with a cart-pole swing-up simulator.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod costs;
pub mod env;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nfq;
pub mod qfunc;

pub use batch::{Episode, GrowingBatch, Observation, StartTag, Transition};
pub use config::ExperimentConfig;
pub use costs::{CostKind, CostSpec, TrackRegions};
pub use env::{CartPole, Environment, LatencyModel, SimParams, SimState, StartMode};
pub use error::{NfqError, Result};
pub use metrics::{StabilityReport, TrajectoryRecord};
pub use net::{Activation, LayerSpec, Network, OptimizerKind, OptimizerState, WeightInit};
pub use nfq::{EpsilonSchedule, QStats, RunArtifacts, TrainSchedule};
pub use qfunc::{ActionSet, Encoding, Normalizer, QFunction, QModel};
