use candle_core::DType;
use chrono::{TimeZone, Utc};
use gnet_core::data::Sample;
use gnet_core::models::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig};
use gnet_core::train::*;
use ndarray::Array3;

fn sample(i: usize) -> Sample {
    Sample {
        x: Array3::from_shape_fn((12, 64, 64), |(a, b, c)| ((a + b * c + 3 * i) % 11) as f32 / 20.0),
        m: Array3::from_shape_fn((25, 64, 64), |(a, b, c)| u8::from((a + b + c + i) % 4 == 0)),
        y: Array3::from_shape_fn((12, 64, 64), |(a, b, c)| ((a * b + c + i) % 7) as f32 / 20.0),
        t0: Utc.with_ymd_and_hms(2018, 5, 1, 0, 0, 0).unwrap() + chrono::Duration::minutes(5 * i as i64),
    }
}

fn samples(n: usize) -> Vec<Sample> {
    (0..n).map(sample).collect()
}

fn gnet() -> Generator {
    Generator::new(GeneratorConfig::gnet().with_width_scale(0.25), 3, DType::F32).unwrap()
}

fn disc() -> Discriminator {
    Discriminator::new(DiscriminatorConfig::default().with_width_scale(0.25), 4, DType::F32).unwrap()
}

fn cfg(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: batch,
        ..TrainConfig::default()
    }
}

#[test]
fn discriminator_updates_every_second_batch() {
    let data = samples(5);
    let out = train_gan(&gnet(), &disc(), &data, &data[..1], &cfg(2, 1), &RunOutput::in_memory(100.0)).unwrap();
    for row in &out.log.rows {
        assert_eq!(row.d_updates, 2, "5 batches -> 2 updates");
        assert!(row.train_d_loss.is_some_and(f64::is_finite));
    }
    assert_eq!(out.iterations, 10);
}

#[test]
fn single_batch_epochs_report_no_discriminator_loss() {
    let data = samples(2);
    let out = train_gan(&gnet(), &disc(), &data, &data, &cfg(1, 2), &RunOutput::in_memory(100.0)).unwrap();
    assert_eq!(out.log.rows[0].d_updates, 0);
    assert_eq!(out.log.rows[0].train_d_loss, None);
}

#[test]
fn supervised_runs_are_bit_reproducible() {
    let data = samples(4);
    let run = || {
        let g = gnet();
        let out = train_supervised(&g, &data, &data[..2], &cfg(2, 2), &RunOutput::in_memory(100.0)).unwrap();
        (out.log.loss_trace(), g.store.snapshot().unwrap())
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    for (k, v) in &pa {
        assert_eq!(v.flatten_all().unwrap().to_vec1::<f32>().unwrap(), pb[k].flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }
}

#[test]
fn best_validation_is_the_minimum_logged() {
    let data = samples(4);
    let g = gnet();
    let out = train_supervised(&g, &data, &data[2..], &cfg(3, 2), &RunOutput::in_memory(100.0)).unwrap();
    let min = out.log.rows.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val, min);
    assert_eq!(out.log.rows[out.best_epoch - 1].val_loss, min);
    // the restored parameters reproduce the best score
    let rescored = evaluate_generator(&g, &data[2..], 2).unwrap();
    assert!((rescored.objective - min).abs() <= 1e-6 * min.max(1e-12));
}

#[test]
fn interrupted_gan_run_resumes_to_the_same_trace() {
    let data = samples(4);
    let straight = {
        let (g, d) = (gnet(), disc());
        train_gan(&g, &d, &data, &data[..2], &cfg(3, 1), &RunOutput::in_memory(100.0)).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    {
        let (g, d) = (gnet(), disc());
        train_gan(&g, &d, &data, &data[..2], &cfg(1, 1), &RunOutput::to_dir(dir.path(), 100.0)).unwrap();
    }
    let resumed = {
        let (g, d) = (gnet(), disc());
        let out = RunOutput {
            resume: true,
            ..RunOutput::to_dir(dir.path(), 100.0)
        };
        train_gan(&g, &d, &data, &data[..2], &cfg(3, 1), &out).unwrap()
    };
    let strip = |o: &GanOutcome| o.log.loss_trace();
    assert_eq!(strip(&straight), strip(&resumed));
    for f in ["g_best", "d_best", "g_last", "d_last"] {
        assert!(dir.path().join(format!("{f}.safetensors")).exists(), "{f}");
        assert!(dir.path().join(format!("{f}.json")).exists(), "{f} sidecar");
    }
    assert!(dir.path().join("train_log.csv").exists());
}

#[test]
fn supervised_resume_matches_straight_run() {
    let data = samples(4);
    let straight = train_supervised(&gnet(), &data, &data[..2], &cfg(3, 2), &RunOutput::in_memory(100.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train_supervised(&gnet(), &data, &data[..2], &cfg(2, 2), &RunOutput::to_dir(dir.path(), 100.0)).unwrap();
    let out = RunOutput {
        resume: true,
        ..RunOutput::to_dir(dir.path(), 100.0)
    };
    let resumed = train_supervised(&gnet(), &data, &data[..2], &cfg(3, 2), &out).unwrap();
    assert_eq!(straight.log.loss_trace(), resumed.log.loss_trace());
    assert_eq!(straight.best_epoch, resumed.best_epoch);
}

#[test]
fn training_rejects_bad_inputs() {
    let data = samples(2);
    let unet = Generator::new(GeneratorConfig::unet().with_width_scale(0.25), 0, DType::F32).unwrap();
    let err = train_gan(&unet, &disc(), &data, &data, &cfg(1, 2), &RunOutput::in_memory(1.0)).unwrap_err();
    assert!(matches!(err, gnet_core::Error::Config(_)));
    let err = train_supervised(&gnet(), &[], &data, &cfg(1, 2), &RunOutput::in_memory(1.0)).unwrap_err();
    assert!(matches!(err, gnet_core::Error::Config(_)));
    let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
    let err = train_supervised(&gnet(), &data, &data, &bad, &RunOutput::in_memory(1.0)).unwrap_err();
    assert!(err.to_string().contains("`batch_size`"));
}
