//! End-to-end preparation: clutter filter, crop, normalize, select, mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::prep::{crop_frame, crop_landmask, select_sequences, CropSpec, NormFrame, Normalizer, SelectionCriterion};
use super::qc::{apply_clutter_filter, QcReport};
use super::{candidate_windows, ContainerMeta, RadarFrame, Sample};
use crate::error::{Error, Result};
use crate::masks::ThresholdRule;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Top-left corner of the cutout; centred on the landmask when absent.
    pub crop_origin: Option<(usize, usize)>,
    pub selection: SelectionCriterion,
    pub threshold_rule: ThresholdRule,
    /// Skip the clutter filter (only for archives known to be clean).
    pub skip_clutter_filter: bool,
}

/// Counts recorded for one split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub frames: usize,
    pub candidate_windows: usize,
    pub selected: usize,
    pub qc: QcReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub train: SplitReport,
    pub test: SplitReport,
    pub norm_max: f64,
}

struct Filtered {
    frames: Vec<RadarFrame>,
    qc: QcReport,
}

fn filter(frames: Vec<RadarFrame>, cfg: &PrepareConfig) -> Filtered {
    if cfg.skip_clutter_filter {
        Filtered {
            frames,
            qc: QcReport::default(),
        }
    } else {
        let (frames, qc) = apply_clutter_filter(frames);
        Filtered { frames, qc }
    }
}

fn select(
    cropped: &[ndarray::Array2<u32>],
    frames: &[RadarFrame],
    norm: &Normalizer,
    meta: &ContainerMeta,
    cfg: &PrepareConfig,
) -> Result<(Vec<Sample>, usize)> {
    let norm_frames: Vec<NormFrame> = cropped
        .iter()
        .zip(frames)
        .map(|(g, f)| NormFrame {
            values: norm.normalize(g),
            timestamp: f.timestamp,
        })
        .collect();
    let candidates = candidate_windows(&norm_frames).len();
    let samples = select_sequences(&norm_frames, &meta.landmask64, &cfg.selection)
        .into_iter()
        .map(|w| Sample::from_window(w, norm.norm_max, cfg.threshold_rule))
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, candidates))
}

/// Turns chronologically ordered train and test frame streams into samples.
/// The normalization constant is the maximum over the filtered, cropped
/// training frames.
pub fn prepare_dataset(
    train: Vec<RadarFrame>,
    test: Vec<RadarFrame>,
    cfg: &PrepareConfig,
) -> Result<(ContainerMeta, Vec<Sample>, Vec<Sample>, PrepareReport)> {
    let first = train
        .first()
        .ok_or_else(|| Error::Config("training archive has no frames".into()))?;
    let landmask = first.landmask.clone();
    let crop = match cfg.crop_origin {
        Some((r, c)) => CropSpec::new(r, c)?,
        None => CropSpec::centered_on(&landmask)?,
    };
    let train = filter(train, cfg);
    let test = filter(test, cfg);
    let crop_all = |fs: &[RadarFrame]| fs.iter().map(|f| crop_frame(f, &crop)).collect::<Result<Vec<_>>>();
    let train_cropped = crop_all(&train.frames)?;
    let test_cropped = crop_all(&test.frames)?;
    let norm = Normalizer::fit(train_cropped.iter())?;
    let meta = ContainerMeta {
        norm_max: norm.norm_max,
        crop,
        landmask64: crop_landmask(&landmask, &crop)?,
        provenance: BTreeMap::from([
            ("code_version".to_string(), crate::code_version()),
            ("selection".to_string(), serde_json::to_string(&cfg.selection)?),
            ("threshold_rule".to_string(), serde_json::to_string(&cfg.threshold_rule)?),
        ]),
    };
    let (train_samples, train_cands) = select(&train_cropped, &train.frames, &norm, &meta, cfg)?;
    let (test_samples, test_cands) = select(&test_cropped, &test.frames, &norm, &meta, cfg)?;
    let report = PrepareReport {
        train: SplitReport {
            frames: train.frames.len(),
            candidate_windows: train_cands,
            selected: train_samples.len(),
            qc: train.qc,
        },
        test: SplitReport {
            frames: test.frames.len(),
            candidate_windows: test_cands,
            selected: test_samples.len(),
            qc: test.qc,
        },
        norm_max: norm.norm_max,
    };
    Ok((meta, train_samples, test_samples, report))
}
