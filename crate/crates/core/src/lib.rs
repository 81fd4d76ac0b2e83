//! Shared modular policies for tree-structured agents.
//!
//! A single per-limb sensorimotor module is re-instantiated at every actuator
//! of every agent and coordinates through learned message passing over the
//! agent's morphology tree. The crate bundles everything needed to exercise
//! that idea end to end at desk scale:
//!
//! - [`morphology`]: morphology trees, spec files, variant enumeration
//! - [`sim`]: planar articulated rigid-body simulator with per-limb observations
//! - [`autodiff`]: reverse-mode automatic differentiation over dense arrays, plus Adam
//! - [`policy`]: the shared modular policy with four message-passing schemes
//! - [`rl`]: replay buffers and TD3 updates over whole-agent transitions
//! - [`trainer`]: joint multi-morphology training, evaluation, checkpointing
//! - [`baseline`]: zero-padded monolithic multi-task baseline
//! - [`analysis`]: message logging, 1-D projection, and correlation tooling

pub mod analysis;
pub mod autodiff;
pub mod baseline;
pub mod morphology;
pub mod policy;
pub mod rl;
pub mod sim;
pub mod trainer;

pub mod presets;
