//! Adversarial training and robust soft-label distillation.
//!
//! The crate covers the full pipeline on top of [`robustdistill_tensor`]:
//! models and checkpoints ([`nn`]), datasets ([`data`]), attacks
//! ([`attacks`]), defense losses ([`distill`], [`losses`]), the training
//! loop ([`train`]) and evaluation reports ([`eval`]).
//!
//! Seven training methods share one loop: natural training (NAT),
//! PGD adversarial training (SAT), TRADES, MART, and the distillation
//! methods ARD, IAD and RSLAD. Each pairs an inner maximization that crafts
//! `x'` inside an L-infinity ball with an outer loss minimized by SGD.

pub mod attacks;
pub mod data;
pub mod digest;
pub mod distill;
mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
pub use robustdistill_tensor as tensor;
