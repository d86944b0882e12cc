//! Invertible attention layers.
//!
//! [`IMap`] scales every position by a data-dependent factor computed from
//! the conditioning half of a checkerboard mask. [`ISdp`] builds, per patch
//! and head, an `m × m` matrix from conditioning-half queries and keys and
//! applies it to the transformed half. Both are triangular under the
//! (A, B) ordering, so their inverses recompute the weights from half A.

mod imap;
mod isdp;

pub use imap::IMap;
pub use isdp::{head_groups, ISdp, ISdpOptions};

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Activation applied to the scaled scores `Q Kᵀ / √d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Softmax,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "softmax" => Ok(Activation::Softmax),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}
