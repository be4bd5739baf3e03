//! synth, prepare-data, train.

use std::path::{Path, PathBuf};

use anyhow::Context;
use gnet_core::data::{
    ingest_archive, prepare_dataset, read_container, split_validation, write_archive, write_container, ArchiveSchema,
    Split, STEP_SECONDS,
};
use gnet_core::models::{Discriminator, Generator};
use gnet_core::synth::gen_storm_archive;
use gnet_core::train::{train_gan, train_supervised, RunOutput};
use serde::Serialize;

use crate::{CliError, CliResult, Invocation, TrainVariant};

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct SynthSummary {
    train_archive: PathBuf,
    test_archive: PathBuf,
    train_frames: usize,
    test_frames: usize,
    train_seed: u64,
    test_seed: u64,
}

pub fn synth(inv: Invocation) -> CliResult<()> {
    let s = &inv.cfg.synth;
    let d = &inv.cfg.data;
    if s.train_frames == 0 {
        return Err(CliError::Config("`synth.train_frames` must be positive".into()));
    }
    if s.test_frames == 0 {
        return Err(CliError::Config("`synth.test_frames` must be positive".into()));
    }
    let mut train_cfg = s.storm.clone();
    train_cfg.n_frames = s.train_frames;
    train_cfg.validate()?;
    let mut test_cfg = train_cfg.clone();
    test_cfg.n_frames = s.test_frames;
    test_cfg.seed = train_cfg.seed.wrapping_add(1);
    test_cfg.start = train_cfg.start + chrono::Duration::seconds(STEP_SECONDS * s.train_frames as i64);

    log::info!("generating {} + {} synthetic frames", s.train_frames, s.test_frames);
    for p in [&d.train_archive, &d.test_archive] {
        std::fs::create_dir_all(parent_dir(p))?;
    }
    write_archive(&d.train_archive, &gen_storm_archive(&train_cfg)?)
        .with_context(|| format!("writing {}", d.train_archive.display()))?;
    write_archive(&d.test_archive, &gen_storm_archive(&test_cfg)?)
        .with_context(|| format!("writing {}", d.test_archive.display()))?;

    let dir = parent_dir(&d.train_archive);
    write_json(
        &dir.join("synth.json"),
        &SynthSummary {
            train_archive: d.train_archive.clone(),
            test_archive: d.test_archive.clone(),
            train_frames: s.train_frames,
            test_frames: s.test_frames,
            train_seed: train_cfg.seed,
            test_seed: test_cfg.seed,
        },
    )?;
    inv.record(&dir, None)
}

pub fn prepare_data(inv: Invocation) -> CliResult<()> {
    let d = &inv.cfg.data;
    let schema = ArchiveSchema::from_id(&d.schema).map_err(|e| CliError::Config(format!("`data.schema`: {e}")))?;
    let train = ingest_archive(&d.train_archive, schema)?;
    let test = ingest_archive(&d.test_archive, schema)?;
    let (meta, train_s, test_s, report) = prepare_dataset(train, test, &inv.cfg.prepare)?;
    if train_s.is_empty() {
        log::warn!("no training sequence passed selection");
    }
    let dir = parent_dir(&d.container);
    std::fs::create_dir_all(&dir)?;
    write_container(&d.container, &meta, &train_s, &test_s)
        .with_context(|| format!("writing {}", d.container.display()))?;
    log::info!("selected {} train / {} test sequences", train_s.len(), test_s.len());
    write_json(&dir.join("prepare_report.json"), &report)?;
    inv.record(&dir, None)
}

pub fn model_label(variant: TrainVariant) -> &'static str {
    match variant {
        TrainVariant::Unet => "SmaAt-UNet",
        TrainVariant::Gnet => "SmaAt-GNet",
        TrainVariant::Gan => "GA-SmaAt-GNet",
        TrainVariant::Aleatoric => "SmaAt-GNet (aleatoric)",
    }
}

/// Summary written next to the checkpoints; `model` labels later reports.
#[derive(Debug, Serialize, serde::Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub best_checkpoint: PathBuf,
    pub best_epoch: usize,
    /// Best monitored validation value (MSE, or the aleatoric objective).
    pub best_validation: f64,
    pub stopped_early: bool,
    pub iterations: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
}

pub fn train(mut inv: Invocation, variant: TrainVariant, resume: bool) -> CliResult<()> {
    let f = inv.cfg.data.validation_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(CliError::Config("`data.validation_fraction` must lie in (0, 1)".into()));
    }
    // The variant decides the architecture switches; the resolved config records the result.
    let gcfg = &mut inv.cfg.generator;
    gcfg.dual_encoder = variant != TrainVariant::Unet;
    gcfg.aleatoric_head = variant == TrainVariant::Aleatoric;
    inv.cfg.train.validate()?;

    let cfg = &inv.cfg;
    let data = read_container(&cfg.data.container, Split::Train)
        .with_context(|| format!("reading {}", cfg.data.container.display()))?;
    let (train_s, val_s) = split_validation(&data.samples, f);
    let dir = cfg.run_dir.clone();
    inv.record(&dir, Some(model_label(variant).into()))?;

    let dtype = cfg.precision.dtype();
    let g = Generator::new(cfg.generator.clone(), cfg.train.seed, dtype)?;
    let out = RunOutput {
        dir: Some(dir.clone()),
        resume,
        norm_max: data.meta.norm_max,
    };
    log::info!(
        "training {} on {} samples ({} held out)",
        model_label(variant),
        train_s.len(),
        val_s.len()
    );
    let (best_epoch, best_validation, stopped_early, iterations) = if variant == TrainVariant::Gan {
        let d = Discriminator::new(cfg.discriminator.clone(), cfg.train.seed.wrapping_add(1), dtype)?;
        let o = train_gan(&g, &d, train_s, val_s, &cfg.train, &out)?;
        (o.best_epoch, o.best_val_mse, o.stopped_early, o.iterations)
    } else {
        let o = train_supervised(&g, train_s, val_s, &cfg.train, &out)?;
        (o.best_epoch, o.best_val, o.stopped_early, o.iterations)
    };
    write_json(
        &dir.join("outcome.json"),
        &TrainSummary {
            model: model_label(variant).into(),
            best_checkpoint: dir.join("g_best.safetensors"),
            best_epoch,
            best_validation,
            stopped_early,
            iterations,
            train_samples: train_s.len(),
            validation_samples: val_s.len(),
        },
    )
}
