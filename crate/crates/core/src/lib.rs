//! Predator-prey worm interactions in encounter-based networks.
//!
//! Three engines share one [`Scenario`](model::Scenario) type and one set of
//! metrics:
//!
//! - [`ode`]: the deterministic multi-group compartment model, integrated
//!   with fixed-step RK4 and exact event handling. Generic over the scalar
//!   type ([`Scalar`]).
//! - [`sim`]: a stochastic encounter-level simulator with Monte Carlo
//!   aggregation and an exact small-population Markov oracle.
//! - [`trace`]: WLAN association trace parsing, encounter derivation,
//!   measurement statistics and trace-driven replay.
//!
//! [`sweep`] runs any engine over a parameter range.

pub mod events;
pub mod markov;
pub mod metrics;
pub mod model;
pub mod ode;
pub mod scalar;
pub mod sim;
pub mod sweep;
pub mod trace;

pub use scalar::Scalar;

/// Double-precision state, the default for all engines.
pub type StateVector = model::StateVector<f64>;
pub type StateVectorF32 = model::StateVector<f32>;
pub type Trajectory = ode::Trajectory<f64>;
pub type TrajectoryF32 = ode::Trajectory<f32>;
/// Exact rational arithmetic for the small-population Markov oracle.
pub type Exact = num_rational::BigRational;
pub type ExactMetrics = markov::ExpectedMetrics<Exact>;

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad field: {0}")]
    Field(String),
}
