//! Repeated Stackelberg security games with a learning defender and a
//! manipulative attacker.
//!
//! The defender fits a behavior model to observed attack counts and then
//! patrols against it. The attacker plans attack counts over a horizon and
//! differentiates through the defender's learning and patrolling to steer
//! future coverage.

pub mod attacker;
pub mod behavior;
pub mod defender;
pub mod diffopt;
pub mod error;
pub mod game;
pub mod gradcheck;
pub mod seeds;

pub use error::{Error, Result};
