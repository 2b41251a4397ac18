//! Capacitary potentials of annular domains in the Heisenberg group `H^n`.
//!
//! Coordinates are `(x_1..x_n, y_1..y_n, t)` with the group law
//! `(x,y,t)(x',y',t') = (x+x', y+y', t+t' + 2 sum(x'_i y_i - x_i y'_i))`.

pub mod domains;
pub mod error;
pub mod exact;
pub mod heis;
pub mod io;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
