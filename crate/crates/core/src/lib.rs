//! Two-timescale actor-critic learning on finite layered MDPs: exact
//! enumeration oracles, PPO and RUDDER variants, and diagnostics for the
//! assumptions behind their convergence.

pub mod approximator;
pub mod control;
pub mod diagnostics;
pub mod error;
pub mod library;
pub mod mdp;
pub mod policy;
pub mod ppo;
pub mod rudder;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
