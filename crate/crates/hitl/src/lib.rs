//! Human-in-the-loop training workflow for infection segmentation.
//!
//! A [`HitlSession`] walks staged batches through manual annotation,
//! training, model proposals and corrections until holdout Dice stops
//! improving. [`api`] exposes a session over HTTP and [`sim`] drives one
//! with a simulated annotator.

pub mod api;
pub mod engine;
pub mod render;
pub mod report;
pub mod rle;
pub mod sim;
pub mod store;

pub use engine::{
    checkpoint_name, convergence_check, init_batches, Correction, Event, HitlSession, IterationRecord, JobOutput,
    Proposal, Provenance, SessionConfig, SessionData, SessionState, StoredMask, TrainJob, DEFAULT_EPSILON,
};
pub use report::{time_report, TimeColumn, TimeReport};
pub use rle::{MaskRle, RleError};
pub use store::SessionStore;

use vbquant_core::phantom::PhantomError;
use vbquant_core::quantify::QuantError;
use vbquant_core::trainer::TrainError;
use vbquant_core::vbnet::{CheckpointError, ModelError};
use vbquant_core::volume::VolumeError;

#[derive(Debug, thiserror::Error)]
pub enum HitlError {
    #[error("invalid batch sizes: {0}")]
    BatchSizes(String),
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("unknown volume {0}")]
    UnknownVolume(String),
    #[error("volume {volume} is not in the open batch {batch}")]
    WrongBatch { volume: String, batch: usize },
    #[error("{op} is not allowed in state {state:?}")]
    WrongState { op: &'static str, state: SessionState },
    #[error("a training job is already running")]
    Busy,
    #[error("stale proposal for {volume}: current is {expected}, got {got}")]
    StaleProposal { volume: String, expected: u64, got: u64 },
    #[error("seconds must be finite and >= 0, got {0}")]
    BadSeconds(f64),
    #[error("no completed batch to report on")]
    NothingToReport,
    #[error("{0}")]
    Data(String),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Rle(#[from] RleError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
