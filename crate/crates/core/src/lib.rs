//! Reinforcement-learning link adaptation with offline policy distillation.
//!
//! A DQN teacher picks one of 28 MCS indices per HARQ transmission on a
//! desk-scale stochastic link, trained under domain randomization. Its
//! Q-values are then distilled, through a temperature-scaled KL objective,
//! into small student networks, either from one generalist teacher or from
//! several scenario specialists whose datasets are shuffled together.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod distill;
pub mod env;
pub mod error;
pub mod evalkit;
pub mod exec;
pub mod linksim;
pub mod mcs;
pub mod net;
pub mod pipeline;
pub mod rl;
pub mod rng;

pub use error::{Error, Result};
pub use exec::Exec;
