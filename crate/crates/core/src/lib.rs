//! Auditing toolkit for multi-axis social-bias detectors.
//!
//! The modules follow the pipeline: [`corpus`] ingests and splits labelled
//! text, [`embedstore`] embeds and deduplicates it, [`promptdetect`] queries
//! policy-prompted chat models, and [`metrics`], [`disparity`] and
//! [`harness`] score and report the predictions.

pub mod corpus;
pub mod disparity;
pub mod embedstore;
pub mod harness;
pub mod metrics;
pub mod promptdetect;
pub mod retry;
pub mod synthetic;
pub mod taxonomy;

pub use taxonomy::{is_biased, Axis, LabelSet};
