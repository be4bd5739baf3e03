//! Skill table and charts assembled from stored run directories.

use std::path::{Path, PathBuf};

use anyhow::Context;
use gnet_core::plot::{bar_chart, line_chart, save_png, write_series_csv};
use gnet_core::uncertainty::UncertaintySummary;
use gnet_core::verify::{GroupMetrics, MetricsReport, Score, ThresholdScores};
use serde::Serialize;

use crate::{CliError, CliResult, Invocation, Provenance};

const SEASONS: [&str; 4] = ["winter", "spring", "summer", "autumn"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub threshold_mm: f64,
    pub model: String,
    /// MSE is threshold-independent; only the first threshold row carries it.
    pub mse: Option<f64>,
    pub f1: f64,
    pub csi: f64,
    pub hss: f64,
    pub mcc: f64,
    /// Names of scores whose denominator vanished.
    pub undefined: Vec<String>,
}

#[derive(Default)]
struct Inputs {
    metrics: Vec<MetricsReport>,
    /// (model, kind, group, summary)
    uncertainty: Vec<(String, String, String, UncertaintySummary)>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn label_of(dir: &Path, command: &str) -> String {
    read_json::<Provenance>(&dir.join(format!("{command}.provenance.json")))
        .ok()
        .and_then(|p| p.model)
        .unwrap_or_else(|| dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
}

fn collect(dirs: &[PathBuf]) -> CliResult<Inputs> {
    let mut out = Inputs::default();
    for dir in dirs {
        if !dir.is_dir() {
            return Err(CliError::Config(format!("`report.inputs`: `{}` is not a directory", dir.display())));
        }
        let mut found = false;
        let metrics = dir.join("metrics.json");
        if metrics.exists() {
            out.metrics.push(MetricsReport::read_json(&metrics)?);
            found = true;
        }
        for kind in ["epistemic", "aleatoric"] {
            for group in ["leadtime", "season"] {
                let p = dir.join(format!("{kind}_{group}.json"));
                if p.exists() {
                    let label = label_of(dir, &format!("uncertainty-{kind}"));
                    out.uncertainty.push((label, kind.into(), group.into(), read_json(&p)?));
                    found = true;
                }
            }
        }
        if !found {
            log::warn!("{} holds no metrics or uncertainty summaries", dir.display());
        }
    }
    Ok(out)
}

fn score(s: &Score) -> f64 {
    s.value
}

pub fn skill_table(reports: &[MetricsReport]) -> Vec<TableRow> {
    let mut thresholds: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.overall.thresholds.iter().map(|t| t.threshold_mm))
        .collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut rows = Vec::new();
    for (i, &t) in thresholds.iter().enumerate() {
        for r in reports {
            let Some(ts) = r.overall.thresholds.iter().find(|s| s.threshold_mm == t) else {
                continue;
            };
            let undefined = [("f1", &ts.f1), ("csi", &ts.csi), ("hss", &ts.hss), ("mcc", &ts.mcc)]
                .iter()
                .filter(|(_, s)| s.undefined)
                .map(|(n, _)| n.to_string())
                .collect();
            rows.push(TableRow {
                threshold_mm: t,
                model: r.model.clone(),
                mse: (i == 0).then_some(r.overall.mse),
                f1: score(&ts.f1),
                csi: score(&ts.csi),
                hss: score(&ts.hss),
                mcc: score(&ts.mcc),
                undefined,
            });
        }
    }
    rows
}

fn write_table(rows: &[TableRow], dir: &Path) -> CliResult<()> {
    let mut w = csv::Writer::from_path(dir.join("skill_table.csv")).context("skill_table.csv")?;
    w.write_record(["threshold_mm", "model", "mse", "f1", "csi", "hss", "mcc", "undefined"])
        .context("skill_table.csv")?;
    for r in rows {
        w.write_record([
            r.threshold_mm.to_string(),
            r.model.clone(),
            r.mse.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            r.f1.to_string(),
            r.csi.to_string(),
            r.hss.to_string(),
            r.mcc.to_string(),
            r.undefined.join(";"),
        ])
        .context("skill_table.csv")?;
    }
    w.flush()?;
    std::fs::write(dir.join("skill_table.json"), serde_json::to_string_pretty(rows)?)?;
    Ok(())
}

fn chart(series: &[(String, Vec<f64>)], index: &[String], line: Option<(f64, f64)>, dir: &Path, name: &str) -> CliResult<String> {
    let img = match line {
        Some((a, b)) => line_chart(series, a, b, false)?,
        None => bar_chart(series)?,
    };
    save_png(&img, dir.join(format!("{name}.png")))?;
    write_series_csv(series, index, dir.join(format!("{name}.csv")))?;
    Ok(name.to_string())
}

fn lead_index() -> Vec<String> {
    (1..=12).map(|i| (i * 5).to_string()).collect()
}

fn season_index() -> Vec<String> {
    SEASONS.iter().map(|s| s.to_string()).collect()
}

fn season_values(seasons: Option<&std::collections::BTreeMap<String, GroupMetrics>>, f: impl Fn(&GroupMetrics) -> Option<f64>) -> Vec<f64> {
    SEASONS
        .iter()
        .map(|s| seasons.and_then(|m| m.get(*s)).and_then(&f).unwrap_or(f64::NAN))
        .collect()
}

fn at(g: &GroupMetrics, t: f64) -> Option<&ThresholdScores> {
    g.thresholds.iter().find(|s| s.threshold_mm == t)
}

fn by_labels(summary: &UncertaintySummary, labels: &[String]) -> Vec<f64> {
    labels
        .iter()
        .map(|l| {
            summary
                .labels
                .iter()
                .position(|x| x == l)
                .map(|i| summary.values[i])
                .unwrap_or(f64::NAN)
        })
        .collect()
}

#[derive(Serialize)]
struct ReportIndex {
    models: Vec<String>,
    artifacts: Vec<String>,
}

pub fn report(inv: Invocation) -> CliResult<()> {
    let r = &inv.cfg.report;
    if r.inputs.is_empty() {
        return Err(CliError::Config("`report.inputs` must list at least one run directory".into()));
    }
    let inputs = collect(&r.inputs)?;
    let dir = inv.cfg.run_dir.clone();
    inv.record(&dir, None)?;
    let mut artifacts = Vec::new();

    if !inputs.metrics.is_empty() {
        write_table(&skill_table(&inputs.metrics), &dir)?;
        artifacts.push("skill_table".into());

        // Persistence is left out of the lead-time chart, as it dwarfs the learned models.
        let learned: Vec<_> = inputs.metrics.iter().filter(|m| m.model != "Persistence").collect();
        let shown = if learned.is_empty() { inputs.metrics.iter().collect() } else { learned };
        let series: Vec<_> = shown
            .iter()
            .filter(|m| m.overall.per_leadtime_mse.len() == 12)
            .map(|m| (m.model.clone(), m.overall.per_leadtime_mse.clone()))
            .collect();
        if !series.is_empty() {
            artifacts.push(chart(&series, &lead_index(), Some((5.0, 60.0)), &dir, "mse_per_leadtime")?);
        }

        let t = r.season_threshold_mm;
        if inputs.metrics.iter().any(|m| m.seasons.is_some()) {
            type Pick = fn(&ThresholdScores) -> f64;
            let metrics: [(&str, Pick); 4] = [
                ("f1", |s| s.f1.value),
                ("csi", |s| s.csi.value),
                ("hss", |s| s.hss.value),
                ("mcc", |s| s.mcc.value),
            ];
            for (name, f) in metrics {
                let series: Vec<_> = inputs
                    .metrics
                    .iter()
                    .map(|m| (m.model.clone(), season_values(m.seasons.as_ref(), |g| at(g, t).map(f))))
                    .collect();
                if series.iter().all(|s| s.1.iter().all(|v| v.is_nan())) {
                    log::warn!("no per-season scores at {t} mm; skipping season charts");
                    break;
                }
                artifacts.push(chart(&series, &season_index(), None, &dir, &format!("season_{name}"))?);
            }
        }
    }

    let leads = lead_index();
    let mut epi_lead = Vec::new();
    for (model, kind, group, s) in &inputs.uncertainty {
        if kind == "epistemic" && group == "leadtime" {
            // Lead-time summaries are ordered 5..60 minutes.
            if s.values.len() == 12 {
                epi_lead.push((model.clone(), s.values.clone()));
                epi_lead.push((format!("{model} mean"), vec![s.overall; 12]));
            }
        }
    }
    if !epi_lead.is_empty() {
        artifacts.push(chart(&epi_lead, &leads, Some((5.0, 60.0)), &dir, "epistemic_per_leadtime")?);
    }
    let seasons = season_index();
    for kind in ["epistemic", "aleatoric"] {
        let series: Vec<_> = inputs
            .uncertainty
            .iter()
            .filter(|(_, k, g, _)| k == kind && g == "season")
            .map(|(m, _, _, s)| (m.clone(), by_labels(s, &seasons)))
            .collect();
        if !series.is_empty() {
            artifacts.push(chart(&series, &seasons, None, &dir, &format!("{kind}_per_season"))?);
        }
    }
    if let Some((_, _, _, s)) = inputs.uncertainty.iter().find(|(_, _, g, _)| g == "season") {
        let precip: Vec<f64> = seasons
            .iter()
            .map(|l| s.labels.iter().position(|x| x == l).map(|i| s.mean_precipitation[i]).unwrap_or(f64::NAN))
            .collect();
        artifacts.push(chart(&[("mean precipitation".into(), precip)], &seasons, None, &dir, "precipitation_per_season")?);
    }

    let mut models: Vec<String> = inputs.metrics.iter().map(|m| m.model.clone()).collect();
    models.extend(inputs.uncertainty.iter().map(|u| u.0.clone()));
    models.dedup();
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&ReportIndex { models, artifacts })?,
    )?;
    Ok(())
}
