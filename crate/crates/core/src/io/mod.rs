//! File formats: dense depth as PFM, sparse measurements as CSV.

pub mod pfm;
pub mod sparse_csv;

pub use pfm::{read_pfm, write_pfm};
pub use sparse_csv::{read_sparse_csv, write_sparse_csv};
