use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: Float,
    /// Mean over batches of the summed per-block coordinate losses.
    pub coordinate_loss: Float,
    pub probability_loss: Float,
    pub total_loss: Float,
    /// Validation PCK as a fraction; absent without a validation set.
    pub val_pck: Option<Float>,
    pub wall_clock_secs: f64,
}

impl EpochRecord {
    /// The record with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        EpochRecord {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(RunLog { entries })
    }

    pub fn append(path: &Path, record: &EpochRecord) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn without_timing(&self) -> Vec<EpochRecord> {
        self.entries.iter().map(EpochRecord::without_timing).collect()
    }

    pub fn final_val_pck(&self) -> Option<Float> {
        self.entries.last().and_then(|e| e.val_pck)
    }

    pub fn best_val_pck(&self) -> Option<Float> {
        self.entries.iter().filter_map(|e| e.val_pck).reduce(Float::max)
    }
}
