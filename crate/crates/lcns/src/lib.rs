//! Adjoint-based optimal control for linearized compressible viscous flow
//! on structured grids.

pub mod adjoint;
pub mod base;
pub mod config;
pub mod control;
pub mod error;
pub mod expr;
pub mod field;
pub mod forward;
pub mod io;
pub mod opt;
pub mod run;
pub mod verify;

pub use error::{Error, Result};
