//! Core pipeline for locating the L3 vertebra slice in CT volumes from
//! maximum-intensity projections.

pub mod augment;
pub mod error;
pub mod eval;
pub mod inference;
pub mod mip;
pub mod models;
pub mod phantom;
pub mod resample;
pub mod targets;
pub mod training;
pub mod volume_io;

pub use error::{Error, Result};
