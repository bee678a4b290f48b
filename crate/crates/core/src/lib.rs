//! Core of the tunnel incident-detection pipeline: box geometry, SORT car
//! tracking, incident rules, detection evaluation, false-positive curation
//! and a synthetic tunnel simulator with a trainable toy detector.

pub mod curation;
pub mod detection;
pub mod evaluation;
pub mod geometry;
pub mod incidents;
pub mod simulation;
pub mod tracking;

pub use detection::{Detection, ObjectClass};
pub use geometry::{BoundingBox, TravelAxis};
