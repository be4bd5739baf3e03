//! Seeded synthetic storm archives: advecting Gaussian rain cells.

use std::sync::Arc;

use chrono::TimeZone;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, RadarFrame, Timestamp, STEP_SECONDS};
use crate::error::{Error, Result};
use crate::masks::{masks_for_hour, ThresholdRule};
use crate::{FRAMES_PER_HOUR, GRID};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LandmaskShape {
    Full,
    /// Centred disk of the given radius in pixels.
    Disk { radius: f64 },
}

impl LandmaskShape {
    pub fn build(self, grid: usize) -> Array2<bool> {
        match self {
            LandmaskShape::Full => Array2::from_elem((grid, grid), true),
            LandmaskShape::Disk { radius } => {
                let c = (grid as f64 - 1.0) / 2.0;
                Array2::from_shape_fn((grid, grid), |(r, col)| {
                    let (dr, dc) = (r as f64 - c, col as f64 - c);
                    dr * dr + dc * dc <= radius * radius
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StormConfig {
    pub seed: u64,
    pub n_frames: usize,
    pub n_cells: usize,
    /// Peak depth per 5 minutes, millimetres.
    pub amplitude_range: (f64, f64),
    /// Gaussian cell standard deviation, pixels.
    pub cell_sigma_range: (f64, f64),
    /// (rows, cols) pixels per frame.
    pub velocity: (f64, f64),
    /// Multiplicative amplitude change per frame.
    pub growth_rate: f64,
    /// Additive Gaussian noise, millimetres.
    pub noise_sigma: f64,
    /// Pixels carrying a constant 100 units per frame (ground clutter).
    pub n_clutter: usize,
    pub start: Timestamp,
    pub grid: usize,
    pub landmask: LandmaskShape,
}

impl Default for StormConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_frames: 288,
            n_cells: 60,
            amplitude_range: (0.05, 0.3),
            cell_sigma_range: (8.0, 24.0),
            velocity: (0.8, 0.5),
            growth_rate: 1.0,
            noise_sigma: 0.02,
            n_clutter: 0,
            start: chrono::Utc.with_ymd_and_hms(2016, 6, 1, 0, 0, 0).unwrap(),
            grid: crate::RAW_GRID,
            landmask: LandmaskShape::Disk { radius: 110.0 },
        }
    }
}

impl StormConfig {
    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.amplitude_range;
        let (s0, s1) = self.cell_sigma_range;
        if !(a0 >= 0.0 && a1 >= a0) {
            return Err(Error::Config(format!("amplitude_range {:?}", self.amplitude_range)));
        }
        if !(s0 > 0.0 && s1 >= s0) {
            return Err(Error::Config(format!("cell_sigma_range {:?}", self.cell_sigma_range)));
        }
        if !(self.growth_rate > 0.0) || !(self.noise_sigma >= 0.0) || self.grid == 0 {
            return Err(Error::Config("growth_rate, noise_sigma or grid out of range".into()));
        }
        Ok(())
    }
}

struct Cell {
    row: f64,
    col: f64,
    amplitude: f64,
    sigma: f64,
}

/// Gaussian profile along one periodic axis, centred at `center`.
fn periodic_profile(grid: usize, center: f64, sigma: f64) -> Vec<f64> {
    let g = grid as f64;
    (0..grid)
        .map(|i| {
            let mut d = (i as f64 - center).rem_euclid(g);
            if d > g / 2.0 {
                d -= g;
            }
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Rain depth field in millimetres (before noise and quantization).
fn field_mm(cells: &[Cell], frame: usize, cfg: &StormConfig) -> Array2<f64> {
    let g = cfg.grid;
    let mut out = Array2::<f64>::zeros((g, g));
    let growth = cfg.growth_rate.powi(frame as i32);
    for cell in cells {
        let r = cell.row + cfg.velocity.0 * frame as f64;
        let c = cell.col + cfg.velocity.1 * frame as f64;
        let pr = periodic_profile(g, r, cell.sigma);
        let pc = periodic_profile(g, c, cell.sigma);
        let amp = cell.amplitude * growth;
        for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let a = amp * pr[i];
            if a < 1e-9 {
                continue;
            }
            for (v, &b) in row.iter_mut().zip(&pc) {
                *v += a * b;
            }
        }
    }
    out
}

fn sample_cells(cfg: &StormConfig, rng: &mut ChaCha8Rng) -> Vec<Cell> {
    (0..cfg.n_cells)
        .map(|_| Cell {
            row: rng.random_range(0..cfg.grid) as f64,
            col: rng.random_range(0..cfg.grid) as f64,
            amplitude: uniform(rng, cfg.amplitude_range),
            sigma: uniform(rng, cfg.cell_sigma_range),
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates `cfg.n_frames` consecutive 5-minute frames. Identical configs
/// yield bit-identical archives.
pub fn gen_storm_archive(cfg: &StormConfig) -> Result<Vec<RadarFrame>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cells = sample_cells(cfg, &mut rng);
    let clutter: Vec<(usize, usize)> = (0..cfg.n_clutter)
        .map(|_| (rng.random_range(0..cfg.grid), rng.random_range(0..cfg.grid)))
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let landmask = Arc::new(cfg.landmask.build(cfg.grid));

    (0..cfg.n_frames)
        .map(|f| {
            let mm = field_mm(&cells, f, cfg);
            let mut values = mm.mapv(|v| {
                let v = if cfg.noise_sigma > 0.0 { v + noise.sample(&mut rng) } else { v };
                (100.0 * v).round().max(0.0) as u32
            });
            for &(r, c) in &clutter {
                values[[r, c]] = 100;
            }
            let ts = cfg.start + chrono::Duration::seconds(STEP_SECONDS * f as i64);
            RadarFrame::new(values, ts, landmask.clone())
        })
        .collect()
}

/// Input hour, masks, noisy target and the per-pixel noise standard deviation
/// that produced it (all in normalized units).
#[derive(Clone, Debug)]
pub struct HeteroscedasticPair {
    pub x: Array3<f32>,
    pub m: Array3<u8>,
    pub y: Array3<f32>,
    pub clean: Array3<f32>,
    pub noise_sigma: Array3<f32>,
}

/// Storm hours on a 64×64 grid whose targets carry zero-mean Gaussian noise
/// with standard deviation `sigma_fn(clean normalized intensity)`.
pub fn gen_heteroscedastic_pairs(
    seed: u64,
    n: usize,
    sigma_fn: impl Fn(f32) -> f32,
) -> Result<(Vec<HeteroscedasticPair>, f64)> {
    let base = StormConfig {
        n_frames: 2 * FRAMES_PER_HOUR,
        n_cells: 6,
        amplitude_range: (0.5, 2.0),
        cell_sigma_range: (4.0, 10.0),
        velocity: (0.5, 0.3),
        growth_rate: 1.0,
        noise_sigma: 0.0,
        grid: GRID,
        landmask: LandmaskShape::Full,
        ..StormConfig::default()
    };
    let storms: Vec<Vec<RadarFrame>> = (0..n)
        .map(|i| {
            gen_storm_archive(&StormConfig {
                seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect::<Result<_>>()?;
    let norm = Normalizer::fit(storms.iter().flatten().map(|f| &f.values))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0a1e);
    let std_normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut pairs = Vec::with_capacity(n);
    for frames in storms {
        let hour = |range: std::ops::Range<usize>| -> Array3<f32> {
            let v: Vec<_> = frames[range].iter().map(|f| norm.normalize(&f.values)).collect();
            let views: Vec<_> = v.iter().map(|a| a.view()).collect();
            ndarray::stack(Axis(0), &views).expect("equal shapes")
        };
        let x = hour(0..FRAMES_PER_HOUR);
        let clean = hour(FRAMES_PER_HOUR..2 * FRAMES_PER_HOUR);
        let noise_sigma = clean.mapv(&sigma_fn);
        let y = ndarray::Zip::from(&clean)
            .and(&noise_sigma)
            .map_collect(|&c, &s| c + s * std_normal.sample(&mut rng));
        let m = masks_for_hour(x.view(), norm.norm_max, ThresholdRule::Strict)?.masks;
        pairs.push(HeteroscedasticPair {
            x,
            m,
            y,
            clean,
            noise_sigma,
        });
    }
    Ok((pairs, norm.norm_max))
}
