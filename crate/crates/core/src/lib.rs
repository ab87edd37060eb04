//! Flow matching for mixed-type tabular data.
//!
//! Two generators share one set of probability paths and samplers:
//! [`vfm::TabbyFlow`] learns a factorized posterior over the encoded row in
//! data space, and [`latent::TabSynFlow`] runs conditional flow matching in
//! the latent space of a small β-VAE. [`eval`] scores synthetic tables for
//! utility (ROC, CIO) and disclosure risk (TCAP).

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod eval;
pub mod latent;
pub mod nn;
pub mod par;
pub mod paths;
pub mod sampler;
pub mod tabular;
pub mod toy;
pub mod train;
pub mod vfm;

pub use error::{Error, Result};
pub use paths::Schedule;
pub use tabular::{Codec, DataTable, TableSchema};
