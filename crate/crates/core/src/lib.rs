//! Two-qubit state transfer through XX spin chains and structural restoring
//! of the non-diagonal part of the sender state with a fixed unitary on a
//! four-qubit extended receiver.

pub mod chain;
pub mod dynamics;
pub mod error;
pub mod io;
pub mod optim;
pub mod optimizer;
pub mod qstate;
pub mod restorer;

pub use error::{Error, Result};

use num_complex::Complex64;

/// Largest entry modulus, the max norm used by all tolerance checks.
pub fn max_abs<'a, I: IntoIterator<Item = &'a Complex64>>(entries: I) -> f64 {
    entries.into_iter().map(|z| z.norm()).fold(0.0, f64::max)
}
