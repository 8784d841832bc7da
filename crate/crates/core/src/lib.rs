//! Mean-square stabilization of discrete-time linear systems with multiple
//! input delays and multiplicative control-dependent noise.
//!
//! The crate solves the delay-dependent Riccati equation, realizes the
//! resulting predictor feedback as a delayed state/input law, certifies it
//! with Lyapunov and LMI tests, computes delay margins for the restricted
//! single-delay structure, and checks everything against an exact
//! second-moment analysis and Monte Carlo simulation.

pub mod cli;
pub mod ddare;
pub mod error;
pub mod lyapunov;
pub mod margin;
pub mod model;
pub mod numerics;
pub mod reduction;
pub mod serde_rows;
pub mod sim;

pub use ddare::{solve_ddare, synthesize_gain, DdareSolution, PFormSolution};
pub use error::{Error, Result, StopReason};
pub use lyapunov::{exact_ms_check, MomentReport, StabilizationCertificate, VerificationReport};
pub use margin::{DelayMarginResult, ScalarSubsystem};
pub use model::{MultiDelaySystem, ProblemSpec, RestrictedSystem, WncsDescription};
pub use numerics::ToleranceSet;
pub use reduction::{AuxGain, FeedbackLaw};
pub use sim::{NoisePath, SimulationResult};
