//! Radar archive ingestion through to the training-ready dataset container.

mod container;
mod frame;
mod ingest;
mod pipeline;
mod prep;
mod qc;

pub use container::{read_array, read_container, read_meta, write_arrays, write_container, ContainerMeta, DatasetContainer, Split, SCHEMA_VERSION};
pub use frame::{find_gaps, season_of, timestamp_from_epoch, RadarFrame, Season, Timestamp, STEP_SECONDS};
pub use ingest::{ingest_archive, write_archive, ArchiveReader, ArchiveSchema};
pub use pipeline::{prepare_dataset, PrepareConfig, PrepareReport, SplitReport};
pub use prep::{
    candidate_windows, crop_frame, crop_grid, crop_landmask, rainy_fraction, select_sequences, CropSpec,
    NormFrame, Normalizer, RainAggregation, SelectionCriterion, SequenceWindow,
};
pub use qc::{apply_clutter_filter, FlaggedWindow, QcReport, QcRule, RuleSummary, DAY_LIMIT_UNITS, YEAR_LIMIT_UNITS};

use ndarray::Array3;

use crate::error::Result;
use crate::masks::{masks_for_hour, ThresholdRule};
use crate::FRAMES_PER_HOUR;

/// One training/test example: input hour, its mask stack and the target hour.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `12 × 64 × 64`, normalized.
    pub x: Array3<f32>,
    /// `25 × 64 × 64`, values in {0, 1}.
    pub m: Array3<u8>,
    /// `12 × 64 × 64`, normalized.
    pub y: Array3<f32>,
    /// Timestamp of the first input frame.
    pub t0: Timestamp,
}

impl Sample {
    pub fn from_window(window: SequenceWindow, norm_max: f64, rule: ThresholdRule) -> Result<Self> {
        let masks = masks_for_hour(window.x.view(), norm_max, rule)?;
        Ok(Self {
            x: window.x,
            m: masks.masks,
            y: window.y,
            t0: window.t0,
        })
    }

    /// Start time of the target hour.
    pub fn target_start(&self) -> Timestamp {
        self.t0 + chrono::Duration::seconds(STEP_SECONDS * FRAMES_PER_HOUR as i64)
    }

    pub fn season(&self) -> Season {
        season_of(self.target_start())
    }
}

/// Chronological split: the last `fraction` of samples (at least one when
/// there are two or more) become the validation set.
pub fn split_validation(samples: &[Sample], fraction: f64) -> (&[Sample], &[Sample]) {
    let n = samples.len();
    if n < 2 {
        return (samples, &samples[n..]);
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    samples.split_at(n - n_val)
}
