//! Deterministic CPU framework for 3D hippocampus segmentation experiments.
//!
//! The crate implements, end to end and without external ML dependencies:
//!
//! - a reverse-mode autodiff engine with exactly the primitives the
//!   segmentation networks need ([`autodiff`]);
//! - declarative builders for the UNet family and a densely connected
//!   autoencoder, with exact parameter accounting ([`nets`]);
//! - soft-voting ensembles and the coordinated dual-net composition
//!   ([`ensemble`]);
//! - the 3D volume pipeline: NIfTI-1 ingestion, 64x64 slice padding,
//!   seed derivation and deterministic splits ([`volume`]);
//! - elastic-deformation and horizontal-flip augmentation ([`augment`]);
//! - confusion-matrix metrics, five-run aggregation and paired t-tests
//!   with an exact Student-t CDF ([`metrics`]);
//! - the experiment runner: training, checkpointing, evaluation and
//!   report emission ([`runner`]).
//!
//! Everything is deterministic: a run is fully determined by its
//! configuration and seed, across reruns and platforms.

pub mod augment;
pub mod autodiff;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod runner;
pub mod volume;

pub use error::{Error, Result};
