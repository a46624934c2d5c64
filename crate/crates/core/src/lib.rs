//! Piecewise block-sparse attention with Taylor-expansion compensation,
//! stochastic block routing, and curvature-aware per-timestep budgets,
//! verified against a dense oracle.

pub mod analysis;
pub mod blockstats;
pub mod budget;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod routing;

pub use blockstats::{partition, BlockPartition, BlockStatistics, GroupedMeans};
pub use budget::{build_schedule, BudgetSchedule, VelocityTrajectory};
pub use error::{Error, Result};
pub use harness::{run_experiment, ExperimentConfig, ExperimentReport};
pub use kernel::{piecewise_attention, rel_frobenius, CompensationMode};
pub use numerics::{mean_abs_diff, Matrix};
pub use oracle::{dense_attention, piecewise_reference, AttentionInstance};
pub use routing::{density_to_k, route, RngContext, RoutingConfig, RoutingPlan};
