pub mod acceptance;
pub mod advect;
pub mod dipole;
pub mod error;
pub mod eulerian;
pub mod expr;
pub mod grid;
pub mod hj;
pub mod integrals;
pub mod io;
pub mod lagrangian;
pub mod model;
pub mod multilayer;
pub mod prep;
pub mod runner;

pub use error::{Error, ErrorKind, Result};
