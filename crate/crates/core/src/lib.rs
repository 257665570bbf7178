#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod em;
pub mod error;
pub mod hermite;
pub mod io;
pub mod linalg;
pub mod model;
pub mod mom;
pub mod rng;
pub mod subspace;

pub use error::{Error, MomStage, Result};
