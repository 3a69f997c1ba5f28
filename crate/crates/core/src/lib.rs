//! Tissue-aware self-supervision machinery for mammography.

pub mod crop_sampler;
pub mod dbt_pairs;
pub mod error;
pub mod mim_masker;
pub mod pipeline;
pub mod preprocess;
pub mod rng;
pub mod selftest;
pub mod ssl_losses;
pub mod tissue_mask;
pub mod toy_trainer;

pub use error::{Error, Result};
