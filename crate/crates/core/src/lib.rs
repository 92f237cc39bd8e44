//! Hydro cascades with uncontrolled spillways: modelling, simulation,
//! penalty-continuation optimal control and optimality-condition checks.
//!
//! Plants are numbered so that water only flows to higher indices. The
//! spillway of a plant is active only while its reservoir is full; the
//! [`spillway`] module simulates this exactly and through an exponential
//! penalty, [`ocp`] optimizes the periodic profit, and [`nco`] checks
//! candidate solutions against the first-order conditions.

pub mod cascade;
pub mod cli;
pub mod config;
pub mod error;
pub mod example;
pub mod nco;
pub mod ocp;
pub mod output;
pub mod spillway;

pub use error::{Error, Result};
