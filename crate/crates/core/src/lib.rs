//! Latent-manifold geometry, entropy dynamics and reward composition for
//! step-level chain-of-thought faithfulness.
//!
//! The crate is organized along the data flow:
//!
//! * [`trace_store`] reads and writes the trajectory interchange format.
//! * [`spectral`] measures linear (PCA) and nonlinear (TwoNN) dimension.
//! * [`vae`] trains the latent chart: a β-VAE ensemble with hand-written gradients.
//! * [`geometry`] computes pullback metrics, graph geodesics, Fisher–Rao
//!   distances and trajectory-level contrast.
//! * [`entropy`] scores predictive-entropy dynamics per step.
//! * [`pipeline`] mines suspicious trajectories, fuses detector and entropy
//!   scores, and grows a labeled step set by bootstrapping.
//! * [`reward`] composes the hierarchical reward and evaluates the GRPO loss.

// Negated float comparisons are deliberate: they treat NaN as invalid.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod entropy;
pub mod geometry;
pub mod pipeline;
pub mod reward;
pub mod spectral;
pub mod synth;
pub mod trace_store;
pub mod vae;
