//! Fit-partition provenance tags carried by every fitted artifact.
//!
//! Codebooks, probes, orientations, emission models, calibration maps,
//! classifier weights, and utility thresholds are all fitted before held-out
//! evaluation. Each such artifact records which partition it was fitted on so
//! that consumers can refuse anything fitted on test questions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The partition an artifact was fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitPartition {
    Train,
    Calibration,
    /// Present so that a mis-tagged artifact can be represented, detected,
    /// and refused. Nothing in this crate produces it.
    Test,
}

impl std::fmt::Display for FitPartition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitPartition::Train => write!(f, "train"),
            FitPartition::Calibration => write!(f, "calibration"),
            FitPartition::Test => write!(f, "test"),
        }
    }
}

/// Provenance record attached to fitted artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Partition the artifact was fitted on.
    pub partition: FitPartition,
    /// Seed used during fitting, when fitting is randomized.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Provenance {
    pub fn train() -> Self {
        Provenance {
            partition: FitPartition::Train,
            seed: None,
        }
    }

    pub fn calibration() -> Self {
        Provenance {
            partition: FitPartition::Calibration,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Reject artifacts fitted on held-out test questions.
    pub fn check_usable(&self, artifact: &str) -> Result<(), ProvenanceError> {
        if self.partition == FitPartition::Test {
            return Err(ProvenanceError::TestTagged {
                artifact: artifact.to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ProvenanceError {
    #[error("artifact `{artifact}` is tagged as fitted on the test partition; refusing to use it")]
    TestTagged { artifact: String },
}
