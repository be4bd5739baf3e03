//! Radar archive adapters.
//!
//! The generic adapter reads a hierarchical (HDF5) file with
//!
//! * `frames`: `n × H × W` unsigned 32-bit, hundredths of mm per 5 minutes
//! * `timestamps`: `n` signed 64-bit, seconds since the Unix epoch (UTC)
//! * `landmask`: `H × W` 8-bit, nonzero where the radar carries data

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array2, Array3};

use super::frame::{timestamp_from_epoch, RadarFrame, STEP_SECONDS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchiveSchema {
    GenericH5,
}

impl ArchiveSchema {
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "generic-h5" => Ok(Self::GenericH5),
            other => Err(Error::Config(format!(
                "unknown ingestion schema `{other}` (registered: generic-h5)"
            ))),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            Self::GenericH5 => "generic-h5",
        }
    }
}

/// Random-access reader over one archive; frames are read lazily.
pub struct ArchiveReader {
    path: PathBuf,
    frames: hdf5::Dataset,
    timestamps: Vec<i64>,
    landmask: Arc<Array2<bool>>,
}

impl ArchiveReader {
    pub fn open(path: impl AsRef<Path>, schema: ArchiveSchema) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let ingest_err = |reason: String| Error::Ingest {
            path: path.clone(),
            reason,
        };
        match schema {
            ArchiveSchema::GenericH5 => {}
        }
        if !path.exists() {
            return Err(ingest_err("file does not exist".into()));
        }
        let file = hdf5::File::open(&path).map_err(|e| ingest_err(e.to_string()))?;
        let frames = file
            .dataset("frames")
            .map_err(|e| ingest_err(format!("dataset `frames`: {e}")))?;
        let timestamps: Vec<i64> = file
            .dataset("timestamps")
            .and_then(|d| d.read_raw())
            .map_err(|e| ingest_err(format!("dataset `timestamps`: {e}")))?;
        let mask: Array2<u8> = file
            .dataset("landmask")
            .and_then(|d| d.read_2d())
            .map_err(|e| ingest_err(format!("dataset `landmask`: {e}")))?;
        let shape = frames.shape();
        if shape.len() != 3 || shape[0] != timestamps.len() || (shape[1], shape[2]) != mask.dim() {
            return Err(ingest_err(format!(
                "inconsistent shapes: frames {shape:?}, {} timestamps, landmask {:?}",
                timestamps.len(),
                mask.dim()
            )));
        }
        for (i, pair) in timestamps.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(Error::Ordering {
                    index: i + 1,
                    previous: timestamp_from_epoch(pair[0])?.to_rfc3339(),
                    next: timestamp_from_epoch(pair[1])?.to_rfc3339(),
                });
            }
        }
        if let Some(bad) = timestamps.iter().find(|t| *t % STEP_SECONDS != 0) {
            return Err(ingest_err(format!(
                "timestamp {bad} is not on the 5-minute grid"
            )));
        }
        Ok(Self {
            path,
            frames,
            timestamps,
            landmask: Arc::new(mask.mapv(|v| v != 0)),
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn landmask(&self) -> &Arc<Array2<bool>> {
        &self.landmask
    }

    pub fn frame(&self, index: usize) -> Result<RadarFrame> {
        let values: Array2<u32> = self
            .frames
            .read_slice_2d(s![index, .., ..])
            .map_err(|e| Error::Ingest {
                path: self.path.clone(),
                reason: format!("frame {index}: {e}"),
            })?;
        RadarFrame::new(
            values,
            timestamp_from_epoch(self.timestamps[index])?,
            self.landmask.clone(),
        )
    }

    pub fn frames(&self) -> impl Iterator<Item = Result<RadarFrame>> + '_ {
        (0..self.len()).map(move |i| self.frame(i))
    }
}

/// Reads a whole archive in timestamp order with off-land pixels zeroed.
pub fn ingest_archive(path: impl AsRef<Path>, schema: ArchiveSchema) -> Result<Vec<RadarFrame>> {
    let reader = ArchiveReader::open(path, schema)?;
    reader.frames().collect()
}

/// Writes frames in the generic archive layout.
pub fn write_archive(path: impl AsRef<Path>, frames: &[RadarFrame]) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Argument("cannot write an empty archive".into()))?;
    let (h, w) = first.values.dim();
    let mut stack = Array3::<u32>::zeros((frames.len(), h, w));
    for (i, f) in frames.iter().enumerate() {
        if f.values.dim() != (h, w) {
            return Err(Error::Shape(format!("frame {i} has shape {:?}", f.values.dim())));
        }
        stack.slice_mut(s![i, .., ..]).assign(&f.values);
    }
    let ts: Vec<i64> = frames.iter().map(|f| f.timestamp.timestamp()).collect();
    let mask = first.landmask.mapv(u8::from);

    let file = hdf5::File::create(path.as_ref())?;
    file.new_dataset_builder().with_data(&stack).create("frames")?;
    file.new_dataset_builder().with_data(&ts).create("timestamps")?;
    file.new_dataset_builder().with_data(&mask).create("landmask")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn frame(ts_secs: i64, v: u32, mask: &Arc<Array2<bool>>) -> RadarFrame {
        RadarFrame::new(
            Array2::from_elem(mask.dim(), v),
            timestamp_from_epoch(ts_secs).unwrap(),
            mask.clone(),
        )
        .unwrap()
    }

    fn t0() -> i64 {
        Utc.with_ymd_and_hms(2020, 6, 1, 0, 0, 0).unwrap().timestamp()
    }

    #[test]
    fn roundtrip_and_masking() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.h5");
        let mut mask = Array2::from_elem((8, 8), true);
        mask[[0, 1]] = false;
        let mask = Arc::new(mask);
        let frames: Vec<_> = (0..5).map(|i| frame(t0() + i * 300, i as u32 + 1, &mask)).collect();
        write_archive(&path, &frames).unwrap();
        let back = ingest_archive(&path, ArchiveSchema::GenericH5).unwrap();
        assert_eq!(back, frames);
        assert_eq!(back[3].values[[0, 1]], 0);
    }

    #[test]
    fn off_land_value_in_file_is_zeroed_on_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw.h5");
        let file = hdf5::File::create(&path).unwrap();
        let mut raw = Array3::<u32>::zeros((1, 4, 4));
        raw[[0, 2, 2]] = 7;
        raw[[0, 1, 1]] = 3;
        let mut mask = Array2::<u8>::ones((4, 4));
        mask[[2, 2]] = 0;
        file.new_dataset_builder().with_data(&raw).create("frames").unwrap();
        file.new_dataset_builder().with_data(&[t0()]).create("timestamps").unwrap();
        file.new_dataset_builder().with_data(&mask).create("landmask").unwrap();
        drop(file);
        let frames = ingest_archive(&path, ArchiveSchema::GenericH5).unwrap();
        assert_eq!(frames[0].values[[2, 2]], 0);
        assert_eq!(frames[0].values[[1, 1]], 3);
    }

    #[test]
    fn shuffled_timestamps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.h5");
        let file = hdf5::File::create(&path).unwrap();
        let raw = Array3::<u32>::zeros((3, 4, 4));
        let ts = [t0() + 600, t0(), t0() + 300];
        file.new_dataset_builder().with_data(&raw).create("frames").unwrap();
        file.new_dataset_builder().with_data(&ts).create("timestamps").unwrap();
        file.new_dataset_builder()
            .with_data(&Array2::<u8>::ones((4, 4)))
            .create("landmask")
            .unwrap();
        drop(file);
        let err = ingest_archive(&path, ArchiveSchema::GenericH5).unwrap_err();
        assert!(matches!(err, Error::Ordering { index: 1, .. }), "{err}");
    }

    #[test]
    fn unreadable_file_names_the_path() {
        let err = ingest_archive("/nonexistent/archive.h5", ArchiveSchema::GenericH5).unwrap_err();
        match err {
            Error::Ingest { path, .. } => assert!(path.ends_with("archive.h5")),
            other => panic!("unexpected {other}"),
        }
        assert!(ArchiveSchema::from_id("knmi-nc").is_err());
    }
}
