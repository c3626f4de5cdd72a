//! Event sequences, CSV ingestion, normalization and synthetic generators.

mod csv_io;
mod normalize;
mod synth;

pub use csv_io::{load_csv, read_csv, write_csv, DatasetSummary, LoadedDataset};
pub use normalize::Normalizer;
pub use synth::{generate, Cluster, SynthKind, SyntheticData, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub s: [f64; 2],
}

impl Event {
    pub fn new(t: f64, x: f64, y: f64) -> Self {
        Event { t, s: [x, y] }
    }
}

/// Time-ordered events of one sequence. Times are measured from the
/// sequence origin at `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub id: String,
    pub events: Vec<Event>,
}

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("row {row}: timestamp {t} of sequence `{seq_id}` does not increase (previous {prev})")]
    NonMonotone { row: usize, seq_id: String, t: f64, prev: f64 },
    #[error("row {row}: sequence `{seq_id}` reappears after other sequences; rows of a sequence must be contiguous")]
    NotContiguous { row: usize, seq_id: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("sequence `{seq_id}`: event {index} at t={t} precedes the origin t=0")]
    BeforeOrigin { seq_id: String, index: usize, t: f64 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("empty dataset")]
    Empty,
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

impl EventSequence {
    pub fn new(id: impl Into<String>, events: Vec<Event>) -> Result<Self, DataError> {
        let seq = EventSequence { id: id.into(), events };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Strictly increasing, non-negative timestamps.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut prev = f64::NEG_INFINITY;
        for (i, e) in self.events.iter().enumerate() {
            if e.t < 0.0 {
                return Err(DataError::BeforeOrigin { seq_id: self.id.clone(), index: i, t: e.t });
            }
            if !(e.t > prev) {
                return Err(DataError::NonMonotone { row: i + 1, seq_id: self.id.clone(), t: e.t, prev });
            }
            prev = e.t;
        }
        Ok(())
    }

    pub fn last_time(&self) -> f64 {
        self.events.last().map_or(0.0, |e| e.t)
    }
}

/// Seeded split of sequences into (train, validation) with `val_frac` of the
/// sequences (at least one when there are two or more) held out.
pub fn split_train_val(seqs: &[EventSequence], val_frac: f64, seed: u64) -> (Vec<EventSequence>, Vec<EventSequence>) {
    let mut idx: Vec<usize> = (0..seqs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (seqs.len() as f64 * val_frac).round() as usize;
    if n_val == 0 && seqs.len() >= 2 && val_frac > 0.0 {
        n_val = 1;
    }
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    (
        train_idx.iter().map(|&i| seqs[i].clone()).collect(),
        val_idx.iter().map(|&i| seqs[i].clone()).collect(),
    )
}
