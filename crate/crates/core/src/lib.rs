//! Normalizing flows with invertible attention layers.
//!
//! The crate provides Glow-style flow layers (actnorm, LU-parameterized 1x1
//! convolution, affine / logistic-mixture / conditional couplings, affine
//! injector, squeeze and split priors) together with two invertible
//! attention layers: a map-based diagonal scaling ([`attention::IMap`]) and
//! a patchwise scaled dot-product layer ([`attention::ISdp`]). Every layer
//! has an exact inverse and an analytic log-Jacobian-determinant; the
//! [`verify`] module checks all of them numerically.

// `!(a <= b)` style comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod dataio;
pub mod error;
pub mod flowlayers;
pub mod flowmodel;
pub mod masking;
pub mod numkit;
pub mod par;
pub mod params;
pub mod training;
pub mod verify;

pub use error::{Error, ErrorClass, Result};
