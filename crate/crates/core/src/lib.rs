//! Multi-stage lithium-ion battery state-of-health estimation.
//!
//! The pipeline per degradation stage:
//!
//! 1. [`dataio`]: ingest telemetry, resample each cycle to `K` samples and
//!    z-score normalize with training-set statistics.
//! 2. [`psr`]: delay-embed voltage, current and temperature into a
//!    `J = 3r` dimensional phase space.
//! 3. [`cdl`]: learn an orthogonal projection whose first `S` components
//!    stay stationary across cycles (consistency) and whose remaining
//!    `J - S` components carry the degradation (discrepancy).
//! 4. [`estimators`]: regress capacity on the discrepancy components with an
//!    LSTM (few training cycles) or a temporal capsule network.
//! 5. [`transfer`]: gate reuse of a source model on a new battery with a
//!    control limit on the consistency components, compensating the error
//!    from the first target cycles when the limit is exceeded.

pub mod cdl;
pub mod dataio;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod psr;
pub mod transfer;

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

pub use cdl::{ComponentSplit, SubspaceModel};
pub use dataio::{CycleRecord, NormalizationStats, StageDataset, StageTable};
pub use error::{Error, Result};
pub use estimators::{Backbone, TrainConfig, TrainedEstimator};
pub use psr::{EmbeddedCycle, EmbeddingConfig};
pub use transfer::{ControlLimit, TransferPredictor};

/// Serializes `value` as pretty JSON followed by a newline.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_json_string(value)?;
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}
