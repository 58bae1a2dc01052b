//! Weak-supervision toolkit for building object-detection training sets from
//! camera streams.
//!
//! The crate is organised by pipeline role:
//!
//! - [`ingest`] harvests segmented video from camera sources with retry/backoff.
//! - [`sampler`] expands segments into frame records, subsamples them at a fixed
//!   rate and splits them into train/test partitions.
//! - [`parts_model`] is a small deformable-parts detector used as the built-in
//!   weak classifier.
//! - [`detector_io`] wraps detectors (built-in, external process, noisy oracle),
//!   synthesises scenes with ground truth and matches detections to ground truth.
//! - [`label_store`] is the embedded, append-only metadata store and the
//!   fine-tuning dataset exporter.
//! - [`qc_stats`] holds the quality-control statistics: sample sizes, Wald
//!   intervals, precision/recall and relative changes between two detectors.
//! - [`review`] runs human (or automatic) QC sessions on top of the store.
//! - [`pipeline`] orchestrates everything as named, resumable stages.

pub mod bbox;
pub mod detector_io;
pub mod ingest;
pub mod label_store;
pub mod parts_model;
pub mod pipeline;
pub mod qc_stats;
pub mod review;
pub mod sampler;
pub mod testkit;
pub mod util;

pub use bbox::BBox;
