//! Lattice construction of a divergence-free vector field on the 3-torus whose
//! Littlewood-Paley energy flux settles on a prescribed value, together with
//! exact verification of the interaction geometry behind it.

pub mod construction;
pub mod qfield;
pub mod flux;
pub mod lpcalc;
pub mod physoracle;
pub mod analysis;
pub mod verify;
pub mod cli;
