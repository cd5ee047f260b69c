//! Pipeline for geolocating candidate oil & gas infrastructure from
//! satellite active-fire detections.
//!
//! The stages, front to back:
//!
//! 1. [`ingest`] — stream-parse FIRMS VIIRS hotspot CSV archives and apply
//!    the brightness / bright_t31 / confidence constraints.
//! 2. [`cluster`] — group filtered detections into persistent candidate
//!    sites by great-circle proximity.
//! 3. [`tiles`] — Web Mercator tile addressing for site coordinates.
//! 4. [`imagery`] — fetch static satellite imagery per site, with disk
//!    caching, rate limiting, and retry.
//! 5. [`dataset`] — build the augmented, split, labeled image dataset.
//! 6. [`nn`] — a small from-scratch CNN binary classifier and training loop.
//! 7. [`metrics`] — the evaluation metric battery (loss, accuracy, AUROC, F1).
//! 8. [`pipeline`] — configuration, stage orchestration, and file handoffs
//!    behind the `flaremap` CLI.

pub mod cluster;
pub mod dataset;
pub mod imagery;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tiles;
