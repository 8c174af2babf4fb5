//! Bit-accurate software model of an ELM-ensemble anomaly-detection
//! co-processor: PRBS input weights, a 16-bit fixed-point datapath, OPIUM
//! online learning, the ADEPOS adaptive ensemble, threshold calibration and
//! a calibrated energy model.

pub mod calibration;
pub mod energy;
pub mod ensemble;
pub mod features;
pub mod fxp;
pub mod ingest;
pub mod network;
pub mod prbs;
pub mod training;
pub mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

/// Any failure of the end-to-end pipeline, tagged with the module it came
/// from.
#[derive(Debug, Error)]
pub enum Error {
    #[error("fxp: {0}")]
    Fxp(#[from] fxp::FxpError),
    #[error("prbs: {0}")]
    Prbs(#[from] prbs::PrbsError),
    #[error("network: {0}")]
    Network(#[from] network::NetworkError),
    #[error("training: {0}")]
    Training(#[from] training::TrainingError),
    #[error("model record: {0}")]
    Record(#[from] training::record::RecordError),
    #[error("ensemble: {0}")]
    Ensemble(#[from] ensemble::EnsembleError),
    #[error("features: {0}")]
    Features(#[from] features::FeatureError),
    #[error("calibration: {0}")]
    Calibration(#[from] calibration::CalibrationError),
    #[error("energy: {0}")]
    Energy(#[from] energy::EnergyError),
    #[error("ingest: {0}")]
    Ingest(#[from] ingest::IngestError),
    #[error("config: {0}")]
    Config(String),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
