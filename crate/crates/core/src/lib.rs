//! Multi-layer vector approximate message passing (ML-VAMP).
//!
//! Inference of the input and hidden signals of a stochastic deep network
//! from noisy measurements of its output, together with the scalar state
//! evolution that predicts the algorithm's per-layer error.

pub mod denoisers;
pub mod engine;
pub mod error;
pub mod fixed_point;
pub mod gauss;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod state_evolution;

pub use denoisers::Mode;
pub use error::{Error, Result};
pub use model::{Activation, Layer, LinearLayer, NetworkSpec, NoiseModel, NonlinearLayer, Precision, SignalSet};
pub use engine::{nmse_db, EngineConfig, EngineRun, MessageState};
pub use fixed_point::{fixed_point_report, FixedPointReport};
