use std::sync::Arc;

use chrono::{DateTime, Datelike, TimeZone, Utc};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub type Timestamp = DateTime<Utc>;

/// Archive time step in seconds.
pub const STEP_SECONDS: i64 = 300;

pub fn timestamp_from_epoch(secs: i64) -> Result<Timestamp> {
    Utc.timestamp_opt(secs, 0)
        .single()
        .ok_or_else(|| Error::Domain(format!("timestamp {secs} out of range")))
}

/// One 5-minute radar accumulation grid in hundredths of a millimetre.
///
/// Values are forced to zero wherever the landmask is false.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarFrame {
    pub values: Array2<u32>,
    pub timestamp: Timestamp,
    pub landmask: Arc<Array2<bool>>,
}

impl RadarFrame {
    pub fn new(mut values: Array2<u32>, timestamp: Timestamp, landmask: Arc<Array2<bool>>) -> Result<Self> {
        if values.dim() != landmask.dim() {
            return shape_err(format!(
                "frame {:?} does not match landmask {:?}",
                values.dim(),
                landmask.dim()
            ));
        }
        ndarray::Zip::from(&mut values)
            .and(landmask.as_ref())
            .for_each(|v, &land| {
                if !land {
                    *v = 0;
                }
            });
        Ok(Self {
            values,
            timestamp,
            landmask,
        })
    }

    pub fn off_land_sum(&self) -> u64 {
        self.values
            .iter()
            .zip(self.landmask.iter())
            .filter(|(_, &land)| !land)
            .map(|(&v, _)| v as u64)
            .sum()
    }
}

/// Meteorological season (DJF, MAM, JJA, SON).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Season {
    Winter,
    Spring,
    Summer,
    Autumn,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Winter, Season::Spring, Season::Summer, Season::Autumn];

    pub fn name(self) -> &'static str {
        match self {
            Season::Winter => "winter",
            Season::Spring => "spring",
            Season::Summer => "summer",
            Season::Autumn => "autumn",
        }
    }
}

impl std::fmt::Display for Season {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub fn season_of(t: Timestamp) -> Season {
    match t.month() {
        12 | 1 | 2 => Season::Winter,
        3..=5 => Season::Spring,
        6..=8 => Season::Summer,
        _ => Season::Autumn,
    }
}

/// Indices `i` where frame `i` does not follow frame `i - 1` by exactly one step.
pub fn find_gaps(frames: &[RadarFrame]) -> Vec<usize> {
    frames
        .windows(2)
        .enumerate()
        .filter(|(_, w)| (w[1].timestamp - w[0].timestamp).num_seconds() != STEP_SECONDS)
        .map(|(i, _)| i + 1)
        .collect()
}
