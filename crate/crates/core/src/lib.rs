//! Laguerre-parameterized nonlinear MPC, neural approximation of its control
//! law, and closed-loop evaluation on a buck-boost dc-dc converter.
//!
//! The pipeline: build the Laguerre basis and solve (Lag)NMPC online
//! ([`mpc`]), sample the state constraint set with a Halton sequence and
//! collect optimal solutions ([`sampling`]), train clamped MLP approximations
//! with an optional constraints-informed loss ([`nn`], [`training`]), then
//! evaluate in closed loop ([`closed_loop`], [`evaluation`]) and through a
//! 32-bit fixed-point inference path ([`fixedpoint`]).

pub mod closed_loop;
pub mod error;
pub mod evaluation;
pub mod fixedpoint;
pub mod laguerre;
pub mod mpc;
pub mod nn;
pub mod sampling;
pub mod training;
pub mod plant;

pub use error::{Error, Result};

/// Double-precision Laguerre basis used throughout the pipeline.
pub type Basis = laguerre::LaguerreBasis<f64>;
