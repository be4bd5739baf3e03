//! Epistemic uncertainty from test-time dropout and aleatoric uncertainty
//! from the log-variance head.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::Tensor;
use ndarray::{Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Season};
use crate::error::{Error, Result};
use crate::models::{Generator, Nowcaster};
use crate::nn::Ctx;
use crate::train::{to_array4, Batch};
use crate::FRAMES_PER_HOUR;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyKind {
    Epistemic,
    Aleatoric,
}

/// Per-pixel variance in normalized units², `(n, 12, h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMaps {
    pub kind: UncertaintyKind,
    pub maps: Array4<f32>,
    /// Stochastic passes behind an epistemic estimate.
    pub k: Option<usize>,
}

/// `k` dropout-active passes; returns the per-pixel mean and population variance.
pub fn ttd_predict(model: &dyn Nowcaster, x: &Tensor, m: &Tensor, k: usize, seed: u64) -> Result<(Array4<f32>, UncertaintyMaps)> {
    if k < 2 {
        return Err(Error::Argument(format!("test-time dropout needs k >= 2 passes, got {k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let passes = (0..k)
        .map(|_| to_array4(&model.predict(x, m, &mut Ctx::stochastic(&mut rng))?))
        .collect::<Result<Vec<_>>>()?;
    let dim = passes[0].dim();
    let mut sum = Array4::<f64>::zeros(dim);
    for p in &passes {
        sum.zip_mut_with(p, |s, &v| *s += v as f64);
    }
    let mean = sum.mapv(|s| s / k as f64);
    let mut sq = Array4::<f64>::zeros(dim);
    for p in &passes {
        ndarray::Zip::from(&mut sq).and(p).and(&mean).for_each(|s, &v, &mu| {
            let d = v as f64 - mu;
            *s += d * d;
        });
    }
    Ok((
        mean.mapv(|v| v as f32),
        UncertaintyMaps {
            kind: UncertaintyKind::Epistemic,
            maps: sq.mapv(|v| (v / k as f64) as f32),
            k: Some(k),
        },
    ))
}

/// `σ̂² = exp(s)` from the log-variance head, deterministic pass.
pub fn aleatoric_infer(g: &Generator, x: &Tensor, m: &Tensor) -> Result<(Array4<f32>, UncertaintyMaps)> {
    if g.s_head.is_none() {
        return Err(Error::Argument("model has no log-variance head".into()));
    }
    let p = g.forward(x, Some(m), &mut Ctx::eval())?;
    let s = p.s.expect("head present");
    Ok((
        to_array4(&p.y_hat)?,
        UncertaintyMaps {
            kind: UncertaintyKind::Aleatoric,
            maps: to_array4(&s.exp()?)?,
            k: None,
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Leadtime,
    Season,
}

/// Mean uncertainty per group plus the overall mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub kind: UncertaintyKind,
    pub group_by: GroupBy,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    /// Samples contributing to each group.
    pub counts: Vec<usize>,
    pub overall: f64,
    /// Mean normalized precipitation of the targets in each group.
    pub mean_precipitation: Vec<f64>,
}

impl UncertaintySummary {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["group", "n_samples", "mean_uncertainty", "mean_precipitation"])?;
        for i in 0..self.labels.len() {
            w.write_record([
                self.labels[i].clone(),
                self.counts[i].to_string(),
                self.values[i].to_string(),
                self.mean_precipitation[i].to_string(),
            ])?;
        }
        w.write_record(["all".to_string(), self.counts.iter().sum::<usize>().to_string(), self.overall.to_string(), String::new()])?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Default)]
struct Running {
    sum: f64,
    precip: f64,
    pixels: u64,
    samples: usize,
}

struct Summarizer {
    group_by: GroupBy,
    leads: Vec<Running>,
    seasons: BTreeMap<Season, Running>,
    all: Running,
}

impl Summarizer {
    fn new(group_by: GroupBy) -> Self {
        Self {
            group_by,
            leads: (0..FRAMES_PER_HOUR).map(|_| Running::default()).collect(),
            seasons: BTreeMap::new(),
            all: Running::default(),
        }
    }

    fn add(&mut self, samples: &[Sample], maps: &Array4<f32>) {
        for (s, map) in samples.iter().zip(maps.axis_iter(Axis(0))) {
            let season = self.seasons.entry(s.season()).or_default();
            season.samples += 1;
            self.all.samples += 1;
            for (t, (frame, target)) in map.axis_iter(Axis(0)).zip(s.y.axis_iter(Axis(0))).enumerate() {
                let v: f64 = frame.iter().map(|&u| u as f64).sum();
                let p: f64 = target.iter().map(|&u| u as f64).sum();
                let n = frame.len() as u64;
                for r in [&mut self.leads[t], &mut *season, &mut self.all] {
                    r.sum += v;
                    r.precip += p;
                    r.pixels += n;
                }
            }
        }
    }

    fn finish(self, kind: UncertaintyKind) -> UncertaintySummary {
        let mean = |r: &Running| if r.pixels == 0 { 0.0 } else { r.sum / r.pixels as f64 };
        let precip = |r: &Running| if r.pixels == 0 { 0.0 } else { r.precip / r.pixels as f64 };
        let n_all = self.all.samples;
        let (labels, groups): (Vec<String>, Vec<&Running>) = match self.group_by {
            GroupBy::Leadtime => self
                .leads
                .iter()
                .enumerate()
                .map(|(i, r)| (format!("{}min", (i + 1) * 5), r))
                .unzip(),
            GroupBy::Season => Season::ALL
                .iter()
                .filter_map(|s| self.seasons.get(s).map(|r| (s.name().to_string(), r)))
                .unzip(),
        };
        UncertaintySummary {
            kind,
            group_by: self.group_by,
            values: groups.iter().map(|r| mean(r)).collect(),
            mean_precipitation: groups.iter().map(|r| precip(r)).collect(),
            counts: match self.group_by {
                GroupBy::Leadtime => vec![n_all; labels.len()],
                GroupBy::Season => groups.iter().map(|r| r.samples).collect(),
            },
            labels,
            overall: mean(&self.all),
        }
    }
}

fn check_split(samples: &[Sample], batch_size: usize) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Argument("empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("`batch_size` must be positive".into()));
    }
    Ok(())
}

/// Mean test-time-dropout variance over `samples`, grouped by lead time or season.
pub fn epistemic_summary(
    model: &dyn Nowcaster,
    samples: &[Sample],
    k: usize,
    seed: u64,
    group_by: GroupBy,
    batch_size: usize,
) -> Result<UncertaintySummary> {
    check_split(samples, batch_size)?;
    let mut acc = Summarizer::new(group_by);
    for (i, chunk) in samples.chunks(batch_size).enumerate() {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = Batch::from_samples(&refs, model.dtype())?;
        let (_, u) = ttd_predict(model, &b.x, &b.m, k, seed.wrapping_add(i as u64))?;
        acc.add(chunk, &u.maps);
    }
    Ok(acc.finish(UncertaintyKind::Epistemic))
}

/// Mean predicted `σ̂²` over `samples`, grouped by lead time or season.
pub fn aleatoric_summary(g: &Generator, samples: &[Sample], group_by: GroupBy, batch_size: usize) -> Result<UncertaintySummary> {
    check_split(samples, batch_size)?;
    let mut acc = Summarizer::new(group_by);
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let b = Batch::from_samples(&refs, g.dtype())?;
        let (_, u) = aleatoric_infer(g, &b.x, &b.m)?;
        acc.add(chunk, &u.maps);
    }
    Ok(acc.finish(UncertaintyKind::Aleatoric))
}

/// Ranks starting at 1; ties share their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument(format!("spearman needs two equal series of length >= 2, got {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("spearman of a constant series".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GeneratorConfig, Persistence};
    use candle_core::{DType, Device};
    use std::cell::Cell;

    /// Alternates between two constant outputs on successive calls.
    struct Flipper {
        calls: Cell<usize>,
    }

    impl Nowcaster for Flipper {
        fn name(&self) -> String {
            "flipper".into()
        }

        fn is_stochastic(&self) -> bool {
            true
        }

        fn predict(&self, x: &Tensor, _m: &Tensor, _ctx: &mut Ctx) -> crate::Result<Tensor> {
            let i = self.calls.get();
            self.calls.set(i + 1);
            Ok(x.ones_like()?.affine(if i % 2 == 0 { 0.1 } else { 0.3 }, 0.0)?)
        }
    }

    fn inputs(n: usize) -> (Tensor, Tensor) {
        let dev = Device::Cpu;
        (
            Tensor::rand(0f32, 1.0, (n, 12, 64, 64), &dev).unwrap(),
            Tensor::rand(0f32, 1.0, (n, 25, 64, 64), &dev).unwrap().ge(0.5).unwrap().to_dtype(DType::F32).unwrap(),
        )
    }

    #[test]
    fn alternating_passes_give_population_variance() {
        let (x, m) = inputs(1);
        let (mean, u) = ttd_predict(&Flipper { calls: Cell::new(0) }, &x, &m, 10, 0).unwrap();
        assert!(mean.iter().all(|v| (v - 0.2).abs() < 1e-6));
        assert!(u.maps.iter().all(|v| (v - 0.01).abs() < 1e-6));
        assert_eq!(u.k, Some(10));
    }

    #[test]
    fn deterministic_models_have_zero_variance() {
        let (x, m) = inputs(2);
        let (mean, u) = ttd_predict(&Persistence, &x, &m, 3, 0).unwrap();
        assert!(u.maps.iter().all(|v| *v == 0.0));
        assert_eq!(mean, to_array4(&crate::models::persistence_predict(&x).unwrap()).unwrap());
        assert!(matches!(ttd_predict(&Persistence, &x, &m, 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn dropout_free_generator_has_zero_variance() {
        let cfg = GeneratorConfig { dropout_p: 0.0, ..GeneratorConfig::gnet().with_width_scale(0.25) };
        let g = Generator::new(cfg, 0, DType::F32).unwrap();
        let (x, m) = inputs(1);
        let (mean, u) = ttd_predict(&g, &x, &m, 2, 5).unwrap();
        assert!(u.maps.iter().all(|v| *v == 0.0));
        let det = to_array4(&g.forward(&x, Some(&m), &mut Ctx::eval()).unwrap().y_hat).unwrap();
        assert_eq!(mean, det);
    }

    #[test]
    fn aleatoric_requires_head_and_exponentiates() {
        let (x, m) = inputs(1);
        let plain = Generator::new(GeneratorConfig::gnet().with_width_scale(0.25), 0, DType::F32).unwrap();
        assert!(matches!(aleatoric_infer(&plain, &x, &m), Err(Error::Argument(_))));
        let cfg = GeneratorConfig { aleatoric_head: true, ..GeneratorConfig::gnet().with_width_scale(0.25) };
        let g = Generator::new(cfg, 0, DType::F32).unwrap();
        for (name, var) in g.store.trainable_under("head_s") {
            var.set(&var.zeros_like().unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        let (_, u) = aleatoric_infer(&g, &x, &m).unwrap();
        assert!(u.maps.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn spearman_fixtures() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // ties take average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        let r = spearman(&[5.0, 5.0, 7.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
