// SPDX-License-Identifier: MIT OR Apache-2.0

//! `regforge`: a small Vision Transformer runtime built for looking inside.
//!
//! The forward pass records activations at declared tap points and rewrites
//! MLP neuron activations at declared edit points, which is all that is needed
//! to locate the sparse "register neurons" that create high-norm outlier
//! patches, and to move those outliers somewhere harmless (another patch, an
//! appended test-time register token, or a per-head attention bias).
//!
//! Modules, bottom-up:
//!
//! - [`tensor`]: dense `f32` kernels with naive reference twins.
//! - [`vit`]: config, weight container, embedding and the instrumented forward pass.
//! - [`analysis`]: outlier sets, norm profiles, activation maps, attention decomposition.
//! - [`registers`]: register-neuron scan and the interventions built on it.
//! - [`synthetic`]: tiny planted ViTs and brute-force oracles.
//! - [`io`]: PPM/PGM images, preprocessing, heatmaps, JSON reports.

pub mod analysis;
pub mod error;
pub mod io;
mod par;
pub mod registers;
pub mod synthetic;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
