//! Deterministic whole-slide-image analysis pipeline.
//!
//! The crate covers the full path from cohort selection to evaluation:
//!
//! * [`dicom`] — DICOM Part-10 parsing, Slide Microscopy metadata and frame
//!   access, plus a synthetic fixture writer.
//! * [`catalog`] — versioned slide-metadata catalogs with deterministic
//!   predicate queries (an offline mirror of a BigQuery-style workflow).
//! * [`storage`] — object fetch from local or S3-compatible backends and the
//!   on-disk PNG tile cache.
//! * [`tiling`] — streaming 256×256 tile extraction at a target resolution
//!   with tissue filtering.
//! * [`classifier`] — a deterministic reference tile classifier with an
//!   RMSProp trainer, and a wire protocol for external model runners.
//! * [`evaluation`] — patient-disjoint splitting, slide aggregation,
//!   one-vs-rest ROC/AUC and bootstrap confidence intervals.
//! * [`repro`] — declarative experiment manifests, run orchestration and
//!   cross-run deviation reports.
//!
//! Every stochastic step consumes an explicit seed through [`rng::SplitMix64`];
//! two runs of the same experiment manifest on the same inputs produce
//! byte-identical reports.

pub mod canon;
pub mod catalog;
pub mod class;
pub mod classifier;
pub mod dicom;
pub mod digest;
pub mod evaluation;
pub mod repro;
pub mod rng;
pub mod storage;
pub mod tiling;

pub use class::Class;
