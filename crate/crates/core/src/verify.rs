//! Forecast verification: denormalized MSE, per-lead-time MSE, threshold
//! binarization of accumulated hours and pooled contingency scores.

use std::collections::BTreeMap;
use std::ops::{Add, AddAssign};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Season};
use crate::error::{Error, Result};
use crate::masks::accumulate_hour;
use crate::models::Nowcaster;
use crate::nn::Ctx;
use crate::train::{to_array4, Batch};
use crate::FRAMES_PER_HOUR;

/// Thresholds on the accumulated hour, millimetres.
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 10.0, 20.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    fn f(&self) -> (f64, f64, f64, f64) {
        (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.tn + o.tn, self.fn_ + o.fn_)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// A skill score; `undefined` marks a zero denominator, in which case `value` is 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub undefined: bool,
}

impl Score {
    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Self::undefined()
        } else {
            Self {
                value: num / den,
                undefined: false,
            }
        }
    }

    fn undefined() -> Self {
        Self {
            value: 0.0,
            undefined: true,
        }
    }
}

/// Harmonic mean of precision and recall.
pub fn f1(c: &ConfusionCounts) -> Score {
    let (tp, fp, _, fn_) = c.f();
    let (p, r) = (Score::ratio(tp, tp + fp), Score::ratio(tp, tp + fn_));
    if p.undefined || r.undefined {
        return Score::undefined();
    }
    Score::ratio(2.0 * p.value * r.value, p.value + r.value)
}

pub fn csi(c: &ConfusionCounts) -> Score {
    let (tp, fp, _, fn_) = c.f();
    Score::ratio(tp, tp + fn_ + fp)
}

/// Heidke skill score without the conventional factor 2, so a perfect
/// forecast scores 0.5.
pub fn hss(c: &ConfusionCounts) -> Score {
    let (tp, fp, tn, fn_) = c.f();
    Score::ratio(tp * tn - fp * fn_, (tp + fn_) * (fn_ + tn) + (tp + fp) * (fp + tn))
}

pub fn mcc(c: &ConfusionCounts) -> Score {
    let (tp, fp, tn, fn_) = c.f();
    Score::ratio(tp * tn - fp * fn_, ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt())
}

/// Accumulates a normalized hour to millimetres and marks pixels strictly above `threshold_mm`.
pub fn binarize_hour(seq: ArrayView3<'_, f32>, norm_max: f64, threshold_mm: f64) -> Result<Array2<bool>> {
    if !(threshold_mm > 0.0) {
        return Err(Error::Argument(format!("threshold must be positive, got {threshold_mm}")));
    }
    Ok(accumulate_hour(seq, norm_max)?.mapv(|mm| mm > threshold_mm))
}

/// Contingency counts over land pixels.
pub fn confusion(pred: ArrayView2<'_, bool>, truth: ArrayView2<'_, bool>, landmask: ArrayView2<'_, bool>) -> Result<ConfusionCounts> {
    if pred.dim() != truth.dim() || pred.dim() != landmask.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?}, target {:?} and landmask {:?} differ",
            pred.dim(),
            truth.dim(),
            landmask.dim()
        )));
    }
    let mut c = ConfusionCounts::default();
    ndarray::Zip::from(pred).and(truth).and(landmask).for_each(|&p, &t, &land| {
        if land {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
    });
    Ok(c)
}

/// Running sums behind an MSE-per-lead-time series.
#[derive(Clone, Debug)]
struct SquaredError {
    sse: Vec<f64>,
    count: Vec<u64>,
}

impl SquaredError {
    fn new(lead_times: usize) -> Self {
        Self {
            sse: vec![0.0; lead_times],
            count: vec![0; lead_times],
        }
    }

    fn add(&mut self, pred: ArrayView3<'_, f32>, target: ArrayView3<'_, f32>, norm_max: f64) -> Result<()> {
        if pred.dim() != target.dim() || pred.len_of(Axis(0)) != self.sse.len() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs target {:?} ({} lead times expected)",
                pred.dim(),
                target.dim(),
                self.sse.len()
            )));
        }
        for (t, (p, y)) in pred.axis_iter(Axis(0)).zip(target.axis_iter(Axis(0))).enumerate() {
            self.sse[t] += p
                .iter()
                .zip(y.iter())
                .map(|(&a, &b)| {
                    let d = (a as f64 - b as f64) * norm_max;
                    d * d
                })
                .sum::<f64>();
            self.count[t] += p.len() as u64;
        }
        Ok(())
    }

    fn per_leadtime(&self) -> Vec<f64> {
        self.sse
            .iter()
            .zip(&self.count)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect()
    }

    fn overall(&self) -> f64 {
        let n: u64 = self.count.iter().sum();
        if n == 0 {
            0.0
        } else {
            self.sse.iter().sum::<f64>() / n as f64
        }
    }
}

/// MSE of denormalized values, computed separately for each lead time.
pub fn mse_per_leadtime(preds: &[Array3<f32>], targets: &[Array3<f32>], norm_max: f64) -> Result<Vec<f64>> {
    if preds.len() != targets.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", preds.len(), targets.len())));
    }
    let mut acc = SquaredError::new(FRAMES_PER_HOUR);
    for (p, y) in preds.iter().zip(targets) {
        acc.add(p.view(), y.view(), norm_max)?;
    }
    Ok(acc.per_leadtime())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScores {
    pub threshold_mm: f64,
    pub counts: ConfusionCounts,
    pub f1: Score,
    pub csi: Score,
    pub hss: Score,
    pub mcc: Score,
}

impl ThresholdScores {
    pub fn from_counts(threshold_mm: f64, counts: ConfusionCounts) -> Self {
        Self {
            threshold_mm,
            f1: f1(&counts),
            csi: csi(&counts),
            hss: hss(&counts),
            mcc: mcc(&counts),
            counts,
        }
    }
}

/// Scores over one group of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub n_samples: usize,
    pub mse: f64,
    pub per_leadtime_mse: Vec<f64>,
    pub thresholds: Vec<ThresholdScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    /// Stochastic passes averaged per sample.
    pub runs: usize,
    pub norm_max: f64,
    pub overall: GroupMetrics,
    /// Keyed by season name; present only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seasons: Option<BTreeMap<String, GroupMetrics>>,
}

impl MetricsReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    fn groups(&self) -> Vec<(&str, &GroupMetrics)> {
        let mut out = vec![("all", &self.overall)];
        if let Some(s) = &self.seasons {
            out.extend(s.iter().map(|(k, g)| (k.as_str(), g)));
        }
        out
    }

    /// One row per (group, threshold).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "model", "group", "n_samples", "threshold_mm", "mse", "f1", "csi", "hss", "mcc", "tp", "fp", "tn", "fn",
        ])?;
        for (group, g) in self.groups() {
            for t in &g.thresholds {
                w.write_record([
                    self.model.clone(),
                    group.to_string(),
                    g.n_samples.to_string(),
                    t.threshold_mm.to_string(),
                    g.mse.to_string(),
                    t.f1.value.to_string(),
                    t.csi.value.to_string(),
                    t.hss.value.to_string(),
                    t.mcc.value.to_string(),
                    t.counts.tp.to_string(),
                    t.counts.fp.to_string(),
                    t.counts.tn.to_string(),
                    t.counts.fn_.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// One row per (group, lead time).
    pub fn write_leadtime_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["model", "group", "lead_minutes", "mse"])?;
        for (group, g) in self.groups() {
            for (i, v) in g.per_leadtime_mse.iter().enumerate() {
                w.write_record([self.model.clone(), group.to_string(), ((i + 1) * 5).to_string(), v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Stochastic passes per sample for models with dropout.
    pub runs: usize,
    pub thresholds: Vec<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub by_season: bool,
    /// Keep dropout active at test time; off gives a single deterministic pass.
    pub test_time_dropout: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 10,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            batch_size: 8,
            seed: 0,
            by_season: true,
            test_time_dropout: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("`runs` must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be positive".into()));
        }
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("`thresholds` must be non-empty and positive".into()));
        }
        Ok(())
    }
}

struct GroupAcc {
    n: usize,
    se: SquaredError,
    counts: Vec<ConfusionCounts>,
}

impl GroupAcc {
    fn new(thresholds: usize) -> Self {
        Self {
            n: 0,
            se: SquaredError::new(FRAMES_PER_HOUR),
            counts: vec![ConfusionCounts::default(); thresholds],
        }
    }

    fn finish(&self, thresholds: &[f64]) -> GroupMetrics {
        GroupMetrics {
            n_samples: self.n,
            mse: self.se.overall(),
            per_leadtime_mse: self.se.per_leadtime(),
            thresholds: thresholds
                .iter()
                .zip(&self.counts)
                .map(|(&t, &c)| ThresholdScores::from_counts(t, c))
                .collect(),
        }
    }
}

/// Mean of `passes` forward passes; dropout is drawn from `rng` when `passes > 1`.
pub fn ensemble_mean(model: &dyn Nowcaster, b: &Batch, passes: usize, rng: &mut ChaCha8Rng) -> Result<candle_core::Tensor> {
    if passes <= 1 {
        return model.predict(&b.x, &b.m, &mut Ctx::eval());
    }
    let mut sum = model.predict(&b.x, &b.m, &mut Ctx::stochastic(rng))?;
    for _ in 1..passes {
        sum = (sum + model.predict(&b.x, &b.m, &mut Ctx::stochastic(rng))?)?;
    }
    Ok((sum / passes as f64)?)
}

/// Scores `model` on `samples`, pooling contingency counts per threshold.
pub fn evaluate_model(
    model: &dyn Nowcaster,
    samples: &[Sample],
    landmask: &Array2<bool>,
    norm_max: f64,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("empty test split".into()));
    }
    let passes = if model.is_stochastic() && cfg.test_time_dropout { cfg.runs } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nt = cfg.thresholds.len();
    let mut all = GroupAcc::new(nt);
    let mut seasons: BTreeMap<Season, GroupAcc> = BTreeMap::new();
    for chunk in samples.chunks(cfg.batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = Batch::from_samples(&refs, model.dtype())?;
        let preds = to_array4(&ensemble_mean(model, &b, passes, &mut rng)?)?;
        for (s, pred) in chunk.iter().zip(preds.axis_iter(Axis(0))) {
            let mut per = Vec::with_capacity(nt);
            for &t in &cfg.thresholds {
                let pb = binarize_hour(pred, norm_max, t)?;
                let tb = binarize_hour(s.y.view(), norm_max, t)?;
                per.push(confusion(pb.view(), tb.view(), landmask.view())?);
            }
            let mut groups = vec![&mut all];
            let season_acc;
            if cfg.by_season {
                season_acc = seasons.entry(s.season()).or_insert_with(|| GroupAcc::new(nt));
                groups.push(season_acc);
            }
            for g in groups {
                g.n += 1;
                g.se.add(pred, s.y.view(), norm_max)?;
                for (acc, c) in g.counts.iter_mut().zip(&per) {
                    *acc += *c;
                }
            }
        }
    }
    Ok(MetricsReport {
        model: model.name(),
        runs: passes,
        norm_max,
        overall: all.finish(&cfg.thresholds),
        seasons: cfg.by_season.then(|| {
            seasons
                .iter()
                .map(|(s, g)| (s.name().to_string(), g.finish(&cfg.thresholds)))
                .collect()
        }),
    })
}
