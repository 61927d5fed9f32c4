//! The book under `book/src`, one module per chapter. Building the docs or
//! running `cargo test -p geofaith-guide` executes every Rust example in it.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/dimension.md")]
pub mod dimension {}

#[doc = include_str!("../../../book/src/latent.md")]
pub mod latent {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/entropy.md")]
pub mod entropy {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/rewards.md")]
pub mod rewards {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
