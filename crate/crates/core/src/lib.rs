//! Bike-share occupancy analytics.
//!
//! The pipeline runs from station-status snapshots ([`ingest`]) through
//! regular-grid series ([`preprocess`]) and average daily cycles ([`cycles`])
//! to station clustering ([`cluster`]), availability forecasts ([`predict`])
//! and origin-destination inference with a log-linear transition model
//! ([`routes`]). [`simgen`] generates synthetic networks with known trips,
//! which serve as ground truth for the rest.

pub mod clock;
pub mod cluster;
pub mod config;
pub mod cycles;
pub mod geo;
pub mod ingest;
pub mod preprocess;
pub mod predict;
pub mod routes;
pub mod simplex;
pub mod stats;
pub mod simgen;
