//! Humanoid upper-body motion imitation at desk scale.
//!
//! The crate covers the full pipeline: a tape-based autodiff engine and layer
//! toolkit ([`tensor`], [`nn`]), the 27-DoF humanoid model ([`kinematics`]),
//! a deterministic simplified physics environment ([`sim`]), a graph VQ
//! autoencoder for human-to-robot motion retargeting ([`retarget`]), a PPO
//! balance policy ([`policy`]), a learned one-step world model
//! ([`world_model`]), the executable motion prior that rewrites unsafe
//! upper-body targets ([`emp`]) and the metric/baseline evaluation harness
//! ([`eval`]).

pub mod config;
pub mod emp;
pub mod eval;
pub mod gradcheck;
pub mod kinematics;
pub mod motion;
pub mod nn;
pub mod policy;
pub mod retarget;
pub mod sim;
pub mod tensor;
pub mod util;
pub mod world_model;
