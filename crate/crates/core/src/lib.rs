//! ASPS: a small frozen ViT plus a trainable CNN branch, joined in a SAM-style
//! mask decoder by cross-branch attention, and trained with confidence-weighted
//! ground-truth hints.

pub mod analysis;
pub mod cfa_decoder;
pub mod cli;
pub mod config;
pub mod data_metrics;
pub mod encoders;
pub mod error;
pub mod grad_suite;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod params;
pub mod training;
pub mod upr;

pub use error::{Error, Result};
