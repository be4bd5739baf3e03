use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::frame::{RadarFrame, Timestamp, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::{FRAMES_PER_HOUR, GRID, RAW_GRID};

/// Top-left corner of the 64×64 cutout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub origin_row: usize,
    pub origin_col: usize,
}

impl CropSpec {
    pub const MAX_ORIGIN: usize = RAW_GRID - GRID;

    pub fn new(origin_row: usize, origin_col: usize) -> Result<Self> {
        if origin_row > Self::MAX_ORIGIN || origin_col > Self::MAX_ORIGIN {
            return Err(Error::Bounds {
                row: origin_row,
                col: origin_col,
                max: Self::MAX_ORIGIN,
            });
        }
        Ok(Self {
            origin_row,
            origin_col,
        })
    }

    /// Cutout centred on the bounding box of the land pixels.
    pub fn centered_on(landmask: &Array2<bool>) -> Result<Self> {
        let (h, w) = landmask.dim();
        let rows: Vec<usize> = (0..h).filter(|&r| landmask.row(r).iter().any(|&v| v)).collect();
        let cols: Vec<usize> = (0..w).filter(|&c| landmask.column(c).iter().any(|&v| v)).collect();
        let (Some(r0), Some(r1), Some(c0), Some(c1)) = (rows.first(), rows.last(), cols.first(), cols.last())
        else {
            return Err(Error::Config("landmask has no land pixels".into()));
        };
        let max_r = h.saturating_sub(GRID).min(Self::MAX_ORIGIN);
        let max_c = w.saturating_sub(GRID).min(Self::MAX_ORIGIN);
        let origin = |lo: usize, hi: usize, max: usize| ((lo + hi) / 2).saturating_sub(GRID / 2).min(max);
        Self::new(origin(*r0, *r1, max_r), origin(*c0, *c1, max_c))
    }

    fn check(&self, dim: (usize, usize)) -> Result<()> {
        if self.origin_row + GRID > dim.0 || self.origin_col + GRID > dim.1 {
            return Err(Error::Bounds {
                row: self.origin_row,
                col: self.origin_col,
                max: dim.0.min(dim.1).saturating_sub(GRID),
            });
        }
        Ok(())
    }
}

pub fn crop_grid<T: Clone>(grid: ArrayView2<'_, T>, crop: &CropSpec) -> Result<Array2<T>> {
    crop.check(grid.dim())?;
    Ok(grid
        .slice(s![
            crop.origin_row..crop.origin_row + GRID,
            crop.origin_col..crop.origin_col + GRID
        ])
        .to_owned())
}

pub fn crop_frame(frame: &RadarFrame, crop: &CropSpec) -> Result<Array2<u32>> {
    crop_grid(frame.values.view(), crop)
}

pub fn crop_landmask(landmask: &Array2<bool>, crop: &CropSpec) -> Result<Array2<bool>> {
    crop_grid(landmask.view(), crop)
}

/// Division by the training-set maximum (stored integer units).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub norm_max: f64,
}

impl Normalizer {
    pub fn new(norm_max: f64) -> Result<Self> {
        if !(norm_max > 0.0 && norm_max.is_finite()) {
            return Err(Error::Config(format!(
                "norm_max must be positive, got {norm_max} (all-zero training set?)"
            )));
        }
        Ok(Self { norm_max })
    }

    pub fn fit<'a>(grids: impl IntoIterator<Item = &'a Array2<u32>>) -> Result<Self> {
        let max = grids
            .into_iter()
            .flat_map(|g| g.iter().copied())
            .max()
            .unwrap_or(0);
        Self::new(max as f64)
    }

    pub fn normalize(&self, grid: &Array2<u32>) -> Array2<f32> {
        grid.mapv(|v| (v as f64 / self.norm_max) as f32)
    }

    pub fn normalize_value(&self, v: f64) -> f64 {
        v / self.norm_max
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        v * self.norm_max
    }

    pub fn denormalize<D: ndarray::Dimension>(&self, grid: &ndarray::Array<f32, D>) -> ndarray::Array<f64, D> {
        grid.mapv(|v| v as f64 * self.norm_max)
    }
}

/// A cropped, normalized frame.
#[derive(Clone, Debug, PartialEq)]
pub struct NormFrame {
    pub values: Array2<f32>,
    pub timestamp: Timestamp,
}

/// How the rainy-pixel fraction of the 12 target frames is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RainAggregation {
    /// Mean fraction over the target frames must exceed the threshold.
    #[default]
    Mean,
    /// Every target frame must exceed the threshold.
    EveryFrame,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionCriterion {
    pub rain_fraction_threshold: f64,
    pub aggregation: RainAggregation,
}

impl Default for SelectionCriterion {
    fn default() -> Self {
        Self {
            rain_fraction_threshold: 0.5,
            aggregation: RainAggregation::Mean,
        }
    }
}

/// An input/target hour pair before mask generation.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceWindow {
    pub x: Array3<f32>,
    pub y: Array3<f32>,
    pub t0: Timestamp,
}

/// Fraction of land pixels with a positive value.
pub fn rainy_fraction(frame: &Array2<f32>, landmask64: &Array2<bool>) -> f64 {
    let land = landmask64.iter().filter(|&&l| l).count();
    if land == 0 {
        return 0.0;
    }
    let rainy = frame
        .iter()
        .zip(landmask64.iter())
        .filter(|(&v, &l)| l && v > 0.0)
        .count();
    rainy as f64 / land as f64
}

/// Indices of every window start whose 24 frames are consecutive 5-minute steps.
pub fn candidate_windows(frames: &[NormFrame]) -> Vec<usize> {
    let span = 2 * FRAMES_PER_HOUR;
    if frames.len() < span {
        return Vec::new();
    }
    (0..=frames.len() - span)
        .filter(|&i| {
            frames[i..i + span]
                .windows(2)
                .all(|w| (w[1].timestamp - w[0].timestamp).num_seconds() == STEP_SECONDS)
        })
        .collect()
}

/// Stride-1 sliding windows of 24 frames kept when the target hour is rainy enough.
pub fn select_sequences(
    frames: &[NormFrame],
    landmask64: &Array2<bool>,
    criterion: &SelectionCriterion,
) -> Vec<SequenceWindow> {
    let fractions: Vec<f64> = frames.iter().map(|f| rainy_fraction(&f.values, landmask64)).collect();
    candidate_windows(frames)
        .into_iter()
        .filter(|&i| {
            let out = &fractions[i + FRAMES_PER_HOUR..i + 2 * FRAMES_PER_HOUR];
            let thr = criterion.rain_fraction_threshold;
            match criterion.aggregation {
                RainAggregation::Mean => out.iter().sum::<f64>() / out.len() as f64 > thr,
                RainAggregation::EveryFrame => out.iter().all(|&f| f > thr),
            }
        })
        .map(|i| SequenceWindow {
            x: stack(&frames[i..i + FRAMES_PER_HOUR]),
            y: stack(&frames[i + FRAMES_PER_HOUR..i + 2 * FRAMES_PER_HOUR]),
            t0: frames[i].timestamp,
        })
        .collect()
}

fn stack(frames: &[NormFrame]) -> Array3<f32> {
    let views: Vec<_> = frames.iter().map(|f| f.values.view()).collect();
    ndarray::stack(Axis(0), &views).expect("frames share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use std::sync::Arc;

    #[test]
    fn crop_copies_subgrid() {
        let mask = Arc::new(Array2::from_elem((256, 256), true));
        let mut v = Array2::<u32>::zeros((256, 256));
        v[[100, 100]] = 9;
        let f = RadarFrame::new(v, Utc::now(), mask).unwrap();
        let c = crop_frame(&f, &CropSpec::new(96, 96).unwrap()).unwrap();
        assert_eq!(c.dim(), (64, 64));
        assert_eq!(c[[4, 4]], 9);
        assert_eq!(c.iter().filter(|&&x| x != 0).count(), 1);
    }

    #[test]
    fn crop_out_of_bounds() {
        assert!(matches!(CropSpec::new(193, 0), Err(Error::Bounds { .. })));
        assert!(CropSpec::new(192, 192).is_ok());
    }

    #[test]
    fn default_crop_is_landmask_centre() {
        let mut mask = Array2::from_elem((256, 256), false);
        mask.slice_mut(s![40..120, 100..200]).fill(true);
        let c = CropSpec::centered_on(&mask).unwrap();
        assert_eq!(c, CropSpec::new(79 - 32, 149 - 32).unwrap());
    }

    #[test]
    fn normalize_examples() {
        let n = Normalizer::fit([&ndarray::arr2(&[[0u32, 26, 52]])]).unwrap();
        assert_eq!(n.norm_max, 52.0);
        assert_eq!(n.normalize(&ndarray::arr2(&[[0u32, 26, 52]])), ndarray::arr2(&[[0.0f32, 0.5, 1.0]]));
        approx::assert_relative_eq!(n.normalize_value(60.0), 1.153_846_153_8, epsilon = 1e-9);
        assert!(Normalizer::fit([&Array2::<u32>::zeros((2, 2))]).is_err());
    }

    fn frames(n: usize, value: impl Fn(usize) -> f32) -> Vec<NormFrame> {
        let t0 = Utc.with_ymd_and_hms(2020, 5, 1, 0, 0, 0).unwrap();
        (0..n)
            .map(|i| NormFrame {
                values: Array2::from_elem((64, 64), value(i)),
                timestamp: t0 + chrono::Duration::seconds(300 * i as i64),
            })
            .collect()
    }

    #[test]
    fn window_count_and_layout() {
        let land = Array2::from_elem((64, 64), true);
        let fr = frames(30, |i| i as f32 + 1.0);
        let sel = select_sequences(&fr, &land, &SelectionCriterion::default());
        assert_eq!(sel.len(), 7);
        assert_eq!(sel[2].x[[0, 0, 0]], 3.0);
        assert_eq!(sel[2].y[[0, 0, 0]], 15.0);
        assert_eq!(sel[2].t0, fr[2].timestamp);
        assert!(select_sequences(&fr[..23], &land, &SelectionCriterion::default()).is_empty());
    }

    #[test]
    fn dry_targets_rejected() {
        let land = Array2::from_elem((64, 64), true);
        let fr = frames(24, |i| if i < 12 { 1.0 } else { 0.0 });
        assert!(select_sequences(&fr, &land, &SelectionCriterion::default()).is_empty());
    }

    #[test]
    fn exactly_half_rainy_is_rejected() {
        let land = Array2::from_elem((64, 64), true);
        let mut fr = frames(24, |_| 0.0);
        for f in &mut fr {
            f.values.slice_mut(s![..32, ..]).fill(0.2);
        }
        assert!(select_sequences(&fr, &land, &SelectionCriterion::default()).is_empty());
        fr[20].values[[40, 0]] = 0.1;
        assert_eq!(select_sequences(&fr, &land, &SelectionCriterion::default()).len(), 1);
        let strict = SelectionCriterion {
            aggregation: RainAggregation::EveryFrame,
            ..Default::default()
        };
        assert!(select_sequences(&fr, &land, &strict).is_empty());
    }

    #[test]
    fn gaps_break_windows() {
        let land = Array2::from_elem((64, 64), true);
        let mut fr = frames(30, |_| 1.0);
        for f in &mut fr[15..] {
            f.timestamp += chrono::Duration::seconds(600);
        }
        assert!(candidate_windows(&fr).is_empty());
        assert!(select_sequences(&fr, &land, &SelectionCriterion::default()).is_empty());
    }

    #[test]
    fn rainy_fraction_counts_land_only() {
        let mut land = Array2::from_elem((64, 64), false);
        land.slice_mut(s![.., ..16]).fill(true);
        let mut f = Array2::<f32>::zeros((64, 64));
        f.slice_mut(s![..32, ..]).fill(1.0);
        assert_eq!(rainy_fraction(&f, &land), 0.5);
    }
}
