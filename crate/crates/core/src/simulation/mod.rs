//! Synthetic tunnel clips, a trainable toy detector, and the closed
//! retraining loop that runs on them.

mod closed_loop;
mod detector;
mod scenario;
mod suite;

use thiserror::Error;

pub use closed_loop::{
    run_closed_loop, run_closed_loop_with, ClosedLoopReport, FieldSummary, LoopConfig, RoundSummary, ToyHook,
};
pub use detector::{
    toy_infer, toy_train, Features, ImageSource, IntegralImage, Prototype, ToyDetectorModel, ToyTrainConfig,
    TrainReport, FEATURE_NAMES,
};
pub use scenario::{
    generate_scenario, Entity, Motion, Placement, Raster, ScenarioFrames, ScenarioSpec, SmearSurface,
    DEFAULT_FRAME_SIZE,
};
pub use suite::ScenarioSuite;

use crate::curation::CurationError;
use crate::evaluation::EvaluationError;
use crate::tracking::TrackingError;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("scenario `{channel}` is invalid: {reason}")]
    InvalidSpec { channel: String, reason: String },
    #[error("frame size mismatch: expected {expected:?}, got {got:?}")]
    SizeMismatch { expected: (u32, u32), got: (u32, u32) },
    #[error("image `{0}` is not available")]
    MissingImage(String),
    #[error("training manifest has no usable objects")]
    EmptyTraining,
    #[error("scenario suite is incomplete: {0}")]
    IncompleteSuite(String),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Tracking(#[from] TrackingError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
}
