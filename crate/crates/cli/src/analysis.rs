//! evaluate, predict, uncertainty, gradcam.

use std::path::{Path, PathBuf};

use anyhow::Context;
use gnet_core::data::{read_container, write_arrays, DatasetContainer, Sample, Split};
use gnet_core::explain::{gradcam as gradcam_site, heatmap_grid, HeatmapGrid};
use gnet_core::masks::accumulate_hour;
use gnet_core::models::checkpoint::load_generator;
use gnet_core::models::{Generator, Nowcaster, Persistence};
use gnet_core::plot::{compose_grid, save_png, Panel};
use gnet_core::train::{to_array4, Batch};
use gnet_core::uncertainty::{aleatoric_infer, aleatoric_summary, epistemic_summary, ttd_predict, GroupBy};
use gnet_core::verify::{ensemble_mean, evaluate_model};
use ndarray::{s, Array2, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::commands::TrainSummary;
use crate::config::SplitName;
use crate::{missing, CliError, CliResult, Invocation, UncertaintyArg};

fn load_split(container: &Path, split: SplitName) -> CliResult<DatasetContainer> {
    let split = match split {
        SplitName::Train => Split::Train,
        SplitName::Test => Split::Test,
    };
    Ok(read_container(container, split).with_context(|| format!("reading {}", container.display()))?)
}

fn load_checkpoint(path: &Path) -> CliResult<Generator> {
    let (g, _) = load_generator(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(g)
}

/// Label from the training summary beside the checkpoint, else the architecture name.
fn label_for(checkpoint: &Path, g: &Generator) -> String {
    checkpoint
        .parent()
        .map(|d| d.join("outcome.json"))
        .and_then(|p| std::fs::read_to_string(p).ok())
        .and_then(|t| serde_json::from_str::<TrainSummary>(&t).ok())
        .map(|s| s.model)
        .unwrap_or_else(|| g.name())
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize], key: &str) -> CliResult<Vec<&'a Sample>> {
    if idx.is_empty() {
        return Err(CliError::Config(format!("`{key}` must name at least one sample")));
    }
    idx.iter()
        .map(|&i| {
            samples.get(i).ok_or_else(|| {
                CliError::Config(format!("`{key}` index {i} out of range ({} samples)", samples.len()))
            })
        })
        .collect()
}

pub fn evaluate(inv: Invocation) -> CliResult<()> {
    let e = &inv.cfg.evaluate;
    if !e.persistence && e.checkpoint.is_none() {
        return Err(missing("evaluate.checkpoint", "--checkpoint"));
    }
    let eval_cfg = e.eval_config(inv.cfg.eval_seed());
    eval_cfg.validate()?;
    let test = load_split(&inv.cfg.data.container, SplitName::Test)?;
    let (model, label): (Box<dyn Nowcaster>, String) = if e.persistence {
        (Box::new(Persistence), "Persistence".into())
    } else {
        let ckpt = e.checkpoint.as_ref().ok_or_else(|| missing("evaluate.checkpoint", "--checkpoint"))?;
        let g = load_checkpoint(ckpt)?;
        let label = label_for(ckpt, &g);
        (Box::new(g), label)
    };
    let label = e.label.clone().unwrap_or(label);
    let dir = inv.cfg.run_dir.clone();
    inv.record(&dir, Some(label.clone()))?;
    log::info!("evaluating {label} on {} test samples", test.samples.len());
    let mut report = evaluate_model(model.as_ref(), &test.samples, &test.meta.landmask64, test.meta.norm_max, &eval_cfg)?;
    report.model = label;
    report.write_json(dir.join("metrics.json"))?;
    report.write_csv(dir.join("metrics.csv"))?;
    report.write_leadtime_csv(dir.join("mse_per_leadtime.csv"))?;
    Ok(())
}

fn rain_panels(maps: &[Array2<f64>]) -> Vec<Option<Panel>> {
    let vmax = maps.iter().flat_map(|m| m.iter()).cloned().fold(0.0, f64::max).max(1e-6) as f32;
    maps.iter()
        .map(|m| {
            Some(Panel {
                map: m.mapv(|v| v as f32),
                vmin: 0.0,
                vmax,
            })
        })
        .collect()
}

fn hour_mm(seq: ArrayView3<'_, f32>, norm_max: f64) -> CliResult<Array2<f64>> {
    Ok(accumulate_hour(seq, norm_max)?)
}

pub fn predict(inv: Invocation) -> CliResult<()> {
    let p = &inv.cfg.predict;
    let ckpt = p.checkpoint.as_ref().ok_or_else(|| missing("predict.checkpoint", "--checkpoint"))?;
    if p.runs == 0 {
        return Err(CliError::Config("`predict.runs` must be positive".into()));
    }
    let data = load_split(&inv.cfg.data.container, p.split)?;
    let chosen = pick(&data.samples, &p.samples, "predict.samples")?;
    let g = load_checkpoint(ckpt)?;
    let label = label_for(ckpt, &g);
    let dir = inv.cfg.run_dir.clone();
    inv.record(&dir, Some(label))?;

    let passes = if g.is_stochastic() && p.test_time_dropout { p.runs } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(inv.cfg.eval_seed());
    let b = Batch::from_samples(&chosen, g.dtype())?;
    let pred = to_array4(&ensemble_mean(&g, &b, passes, &mut rng)?)?;
    let stack = |f: &dyn Fn(&Sample) -> ArrayView3<'_, f32>| -> Array4<f32> {
        let views: Vec<_> = chosen.iter().map(|s| f(s)).collect();
        ndarray::stack(Axis(0), &views).expect("equal sample shapes")
    };
    let x = stack(&|s| s.x.view());
    let y = stack(&|s| s.y.view());
    let nm = data.meta.norm_max;
    write_arrays(dir.join("predictions.h5"), nm, &[("input", x.view()), ("target", y.view()), ("prediction", pred.view())])?;

    let mut panels = Vec::new();
    for (i, s) in chosen.iter().enumerate() {
        panels.extend(rain_panels(&[
            hour_mm(s.x.view(), nm)?,
            hour_mm(s.y.view(), nm)?,
            hour_mm(pred.index_axis(Axis(0), i), nm)?,
        ]));
    }
    save_png(&compose_grid(&panels, 3, 3, 4)?, dir.join("predictions.png"))?;
    let meta = serde_json::json!({
        "samples": p.samples,
        "t0": chosen.iter().map(|s| s.t0.to_rfc3339()).collect::<Vec<_>>(),
        "passes": passes,
        "norm_max": nm,
    });
    std::fs::write(dir.join("predictions.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn group_name(g: GroupBy) -> &'static str {
    match g {
        GroupBy::Leadtime => "leadtime",
        GroupBy::Season => "season",
    }
}

/// Lead times shown in the map figure: 10, 30 and 50 minutes.
const MAP_LEADS: [usize; 3] = [1, 5, 9];

/// Rows per sample and lead time: target, prediction, uncertainty (normalized units).
fn uncertainty_figure(target: &Array4<f32>, mean: &Array4<f32>, var: &Array4<f32>, path: &Path) -> CliResult<()> {
    let mut panels = Vec::new();
    for i in 0..target.dim().0 {
        for &t in &MAP_LEADS {
            let tgt = target.slice(s![i, t, .., ..]).to_owned();
            let pr = mean.slice(s![i, t, .., ..]).to_owned();
            let vmax = tgt.iter().chain(pr.iter()).cloned().fold(0.0f32, f32::max).max(1e-6);
            panels.push(Some(Panel { map: tgt, vmin: 0.0, vmax }));
            panels.push(Some(Panel { map: pr, vmin: 0.0, vmax }));
            panels.push(Some(Panel::auto(var.slice(s![i, t, .., ..]).to_owned())));
        }
    }
    save_png(&compose_grid(&panels, 3, 2, 4)?, path)?;
    Ok(())
}

pub fn uncertainty(inv: Invocation, kind: UncertaintyArg) -> CliResult<()> {
    let u = &inv.cfg.uncertainty;
    let ckpt = u.checkpoint.as_ref().ok_or_else(|| missing("uncertainty.checkpoint", "--checkpoint"))?;
    if u.group_by.is_empty() {
        return Err(CliError::Config("`uncertainty.group_by` must not be empty".into()));
    }
    if kind == UncertaintyArg::Epistemic && u.k < 2 {
        return Err(CliError::Config("`uncertainty.k` must be at least 2".into()));
    }
    let data = load_split(&inv.cfg.data.container, u.split)?;
    let g = load_checkpoint(ckpt)?;
    if kind == UncertaintyArg::Aleatoric && g.s_head.is_none() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "checkpoint {} has no log-variance head; train it with `train aleatoric`",
            ckpt.display()
        )));
    }
    let label = u.label.clone().unwrap_or_else(|| label_for(ckpt, &g));
    let dir = inv.cfg.run_dir.clone();
    inv.record(&dir, Some(label))?;
    let seed = inv.cfg.eval_seed();
    let prefix = match kind {
        UncertaintyArg::Epistemic => "epistemic",
        UncertaintyArg::Aleatoric => "aleatoric",
    };
    for &gb in &u.group_by {
        let summary = match kind {
            UncertaintyArg::Epistemic => epistemic_summary(&g, &data.samples, u.k, seed, gb, u.batch_size)?,
            UncertaintyArg::Aleatoric => aleatoric_summary(&g, &data.samples, gb, u.batch_size)?,
        };
        summary.write_json(dir.join(format!("{prefix}_{}.json", group_name(gb))))?;
        summary.write_csv(dir.join(format!("{prefix}_{}.csv", group_name(gb))))?;
    }
    if !u.map_samples.is_empty() {
        let chosen = pick(&data.samples, &u.map_samples, "uncertainty.map_samples")?;
        let b = Batch::from_samples(&chosen, g.dtype())?;
        let (mean, maps) = match kind {
            UncertaintyArg::Epistemic => ttd_predict(&g, &b.x, &b.m, u.k, seed)?,
            UncertaintyArg::Aleatoric => aleatoric_infer(&g, &b.x, &b.m)?,
        };
        let target = to_array4(&b.y)?;
        write_arrays(
            dir.join(format!("{prefix}_maps.h5")),
            data.meta.norm_max,
            &[("target", target.view()), ("mean", mean.view()), ("variance", maps.maps.view())],
        )?;
        uncertainty_figure(&target, &mean, &maps.maps, &dir.join(format!("{prefix}_maps.png")))?;
    }
    Ok(())
}

pub fn gradcam(inv: Invocation) -> CliResult<()> {
    let c = &inv.cfg.gradcam;
    let ckpt = c.checkpoint.as_ref().ok_or_else(|| missing("gradcam.checkpoint", "--checkpoint"))?;
    if !(c.binarize_mm > 0.0) {
        return Err(CliError::Config("`gradcam.binarize_mm` must be positive".into()));
    }
    let data = load_split(&inv.cfg.data.container, c.split)?;
    let sample = pick(&data.samples, &[c.sample], "gradcam.sample")?[0];
    let g = load_checkpoint(ckpt)?;
    let known = g.sites();
    if let Some(bad) = c.sites.iter().find(|s| !known.contains(s)) {
        return Err(CliError::Config(format!(
            "`gradcam.sites`: unknown site `{bad}` (available: {})",
            known.join(", ")
        )));
    }
    let label = label_for(ckpt, &g);
    let dir: PathBuf = inv.cfg.run_dir.clone();
    inv.record(&dir, Some(label))?;
    let nm = data.meta.norm_max;
    let grid = if c.sites.is_empty() {
        heatmap_grid(&g, sample, nm, c.binarize_mm)?
    } else {
        let mut full = heatmap_grid_without_cams(&g, sample, nm)?;
        let b = Batch::from_samples(&[sample], g.dtype())?;
        full.cams = c
            .sites
            .iter()
            .map(|site| gradcam_site(&g, &b.x, &b.m, site, nm, c.binarize_mm))
            .collect::<gnet_core::Result<Vec<_>>>()?;
        full
    };
    let flagged: Vec<_> = grid.cams.iter().filter(|c| c.no_rain).map(|c| c.site.as_str()).collect();
    if !flagged.is_empty() {
        log::warn!("no pixel predicted above {} mm; heatmaps are all zero", c.binarize_mm);
    }
    grid.save_png(dir.join("gradcam.png"))?;
    grid.write_json(dir.join("gradcam.json"))?;
    Ok(())
}

fn heatmap_grid_without_cams(g: &Generator, sample: &Sample, nm: f64) -> CliResult<HeatmapGrid> {
    let b = Batch::from_samples(&[sample], g.dtype())?;
    let pred = to_array4(&g.predict(&b.x, &b.m, &mut gnet_core::nn::Ctx::eval())?)?;
    Ok(HeatmapGrid {
        cams: Vec::new(),
        input_mm: hour_mm(sample.x.view(), nm)?,
        target_mm: hour_mm(sample.y.view(), nm)?,
        prediction_mm: hour_mm(pred.index_axis(Axis(0), 0), nm)?,
    })
}
