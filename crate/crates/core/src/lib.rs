//! Stochastic Lagrangian traffic flow with parametric driver heterogeneity.
//!
//! Drivers follow Newell-Franklin speed-spacing relations whose parameters
//! `(v_f, d, c)` are drawn from bounded-support distributions. The crate
//! provides:
//!
//! * [`relations`]: the per-driver relation, its inverse, and the empirical
//!   mean / variance / gradient relations used by the moment dynamics.
//! * [`params`]: scaled-Beta parameter laws, time-step selection, fitting.
//! * [`sim`]: sample paths of the heterogeneous platoon and ensembles.
//! * [`moments`]: mean state dynamics and the covariance matrix ODE.
//! * [`assimilation`]: probe measurement models and the discretized
//!   Kalman-Bucy filter.
//! * [`macroscopic`]: Eulerian fields, queue estimates, error metrics.
//! * [`oracles`]: brute-force Monte-Carlo witnesses for the derived dynamics.
//! * [`io`]: scenario files, trajectory CSV, run manifests.
//!
//! All quantities are SI internally (m, s, veh); see [`units`] for the
//! conversions applied at the I/O boundary.

pub mod assimilation;
pub mod error;
pub mod io;
pub mod macroscopic;
pub mod moments;
pub mod oracles;
pub mod params;
pub mod relations;
pub mod rng;
pub mod sim;
pub mod units;

pub use error::{Error, Result};
pub use params::{BetaMarginal, ParamDistribution};
pub use relations::{DriverParams, HistoricalSample, MeanRelation, RelationTable, SpeedMoments};
pub use sim::{Boundary, Scenario, SignalSpec, TrajectorySet};
