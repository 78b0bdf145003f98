//! Geometric routing-invariance preservation for mixture-of-experts routers.
//!
//! The crate builds null-space and expert-specific constraints over a retain
//! set, enforces them during toy unlearning with a Randomized Kaczmarz
//! half-space projection, applies a closed-form post-training router
//! correction, and measures routing stability, unlearning efficacy and
//! expert-forcing vulnerability.

pub mod attack;
pub mod constraints;
pub mod cost;
pub mod enforce;
pub mod error;
pub mod io;
pub mod moe;
pub mod numerics;
pub mod ptc;
pub mod routing;
pub mod unlearn;

pub use error::{Error, Result};
