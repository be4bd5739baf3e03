//! Binary precipitation masks from the one-hour accumulation.

use ndarray::{Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{FRAMES_PER_HOUR, MASK_LEVELS};

/// Whether a pixel sitting exactly on a threshold counts as exceeding it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    #[default]
    Strict,
    Inclusive,
}

impl ThresholdRule {
    pub fn exceeds(self, value: f64, threshold: f64) -> bool {
        match self {
            ThresholdRule::Strict => value > threshold,
            ThresholdRule::Inclusive => value >= threshold,
        }
    }
}

/// 25 nested masks; level `t - 1` marks accumulations above `t` mm/h.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStack {
    pub masks: Array3<u8>,
}

impl MaskStack {
    pub fn thresholds() -> impl Iterator<Item = u32> {
        1..=MASK_LEVELS as u32
    }

    pub fn level(&self, threshold_mm: u32) -> ndarray::ArrayView2<'_, u8> {
        self.masks.index_axis(Axis(0), threshold_mm as usize - 1)
    }

    pub fn is_nested(&self) -> bool {
        (1..MASK_LEVELS).all(|t| {
            self.masks
                .index_axis(Axis(0), t)
                .iter()
                .zip(self.masks.index_axis(Axis(0), t - 1).iter())
                .all(|(hi, lo)| hi <= lo)
        })
    }
}

/// Sums a normalized hour to millimetres.
///
/// Each frame is denormalized and rounded to whole stored units (hundredths
/// of a millimetre) before summing, so the result does not depend on the
/// normalization constant used to store the same raw values.
pub fn accumulate_hour(x: ArrayView3<'_, f32>, norm_max: f64) -> Result<Array2<f64>> {
    if x.len_of(Axis(0)) != FRAMES_PER_HOUR {
        return Err(Error::Shape(format!(
            "expected {FRAMES_PER_HOUR} frames, got {}",
            x.len_of(Axis(0))
        )));
    }
    let (_, h, w) = x.dim();
    let mut units = Array2::<f64>::zeros((h, w));
    for frame in x.axis_iter(Axis(0)) {
        units.zip_mut_with(&frame, |acc, &v| *acc += (v as f64 * norm_max).round());
    }
    Ok(units.mapv_into(|u| u / 100.0))
}

pub fn make_masks(acc_mm: &Array2<f64>, rule: ThresholdRule) -> Result<MaskStack> {
    if let Some(bad) = acc_mm.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("negative or non-finite accumulation {bad}")));
    }
    let (h, w) = acc_mm.dim();
    let mut masks = Array3::<u8>::zeros((MASK_LEVELS, h, w));
    for (level, t) in MaskStack::thresholds().enumerate() {
        let mut plane = masks.index_axis_mut(Axis(0), level);
        plane.zip_mut_with(acc_mm, |m, &v| *m = u8::from(rule.exceeds(v, t as f64)));
    }
    Ok(MaskStack { masks })
}

/// Mask stack for a normalized input hour.
pub fn masks_for_hour(x: ArrayView3<'_, f32>, norm_max: f64, rule: ThresholdRule) -> Result<MaskStack> {
    make_masks(&accumulate_hour(x, norm_max)?, rule)
}
