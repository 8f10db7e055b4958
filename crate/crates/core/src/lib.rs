//! One-stage and adaptive two-stage isotonic procedures for estimating the
//! threshold where a monotone regression function crosses a given level, with
//! Wald- and likelihood-ratio-type confidence intervals, limit-distribution
//! tabulators, and a Monte Carlo harness for coverage, rate and budget
//! experiments.

pub mod ci;
pub mod error;
pub mod exec;
pub mod isotonic;
pub mod limits;
pub mod nuisance;
pub mod sample;
pub mod sim;
pub mod twostage;

pub use error::{Error, Result};
pub use sample::{Domain, Obs, SampleBatch, Stage};
