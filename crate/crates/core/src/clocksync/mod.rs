//! Receiver clock synchronization from opportunity traffic.

mod core_fit;
mod model;
mod pairwise;
mod propagate;

use thiserror::Error;

use crate::dataio::SensorId;

pub use core_fit::{fit_core_network, select_core, CoreFit, CoreFitOptions};
pub use model::{
    correct_timestamps, ClockModel, CorrectedRecord, OmitReason, RandomWalk, SensorNoiseModel, SensorStatus, SensorSync,
    SyncState,
};
pub use pairwise::{alpha_beta_track, pairwise_offset_series, AlphaBetaParams, AlphaBetaTrack};
pub use propagate::{
    fit_sensor_clock, propagate_network_sync, sync_residuals, PropagateOptions, RoundSummary, SensorFit, SensorIndex,
    EXCLUSION_REASON,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SyncError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("core sensors {0:?} share no records with the reference sensor")]
    Disconnected(Vec<SensorId>),
    #[error("core fit did not converge after {iterations} iterations (median |residual| {median_ns:.2} ns, 90th percentile {p90_ns:.2} ns)")]
    NotConverged { iterations: usize, median_ns: f64, p90_ns: f64 },
    #[error("no sensor could be synchronized in the first round; unreachable: {0:?}")]
    NoProgress(Vec<SensorId>),
    #[error("clock evaluation outside the fitted span: {0}")]
    OutOfSpan(String),
}
