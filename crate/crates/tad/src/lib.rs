//! Incident-detection service: detection ingestion, the event store, the
//! review API and the `tad` command line.

pub mod api;
pub mod cli;
pub mod config;
pub mod ingest;
pub mod pipeline;
pub mod store;
