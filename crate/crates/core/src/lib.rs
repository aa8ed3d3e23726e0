//! Lookup vision networks: convolutional classifiers whose input coding is
//! a set of learnable per-color lookup tables, trained jointly with the
//! network weights.

pub mod checkpoint;
pub mod cli;
pub mod costing;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradcore;
pub mod lookup;
pub mod network;
pub mod recode;
pub mod trainer;

pub use error::{Error, Result};
