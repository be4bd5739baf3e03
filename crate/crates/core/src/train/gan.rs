use std::collections::HashMap;
use std::time::Instant;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    batch_indices, check_splits, loss_adversarial, loss_cgan, loss_l2, sequential_batches, Adam, Batch,
    EarlyStopping, EpochRow, PlateauScheduler, RunOutput, TrainConfig, TrainLog,
};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::models::checkpoint::{save_discriminator, save_generator};
use crate::models::{Discriminator, Generator};
use crate::nn::ops::scalar;
use crate::nn::{BnMode, Ctx};

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    /// Lowest generator validation MSE.
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct State {
    epoch: usize,
    iterations: usize,
    g_step: u64,
    g_lr: f64,
    d_step: u64,
    d_lr: f64,
    plateau_g: PlateauScheduler,
    plateau_d: PlateauScheduler,
    stopper: EarlyStopping,
    best_epoch: usize,
    log: TrainLog,
}

/// Generator validation MSE and the negated conditional-GAN objective of the
/// discriminator, both in deterministic mode.
fn validate(g: &Generator, d: &Discriminator, val: &[Sample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    let (mut mse, mut dl, mut n) = (0.0, 0.0, 0usize);
    for batch in sequential_batches(val, cfg.batch_size, g.dtype()) {
        let b = batch?;
        let fake = g.forward(&b.x, Some(&b.m), &mut Ctx::eval())?.y_hat.detach();
        let real_s = d.forward(&b.x, &b.y, &Ctx::eval())?.detach();
        let fake_s = d.forward(&b.x, &fake, &Ctx::eval())?.detach();
        let k = b.len() as f64;
        mse += scalar(&loss_l2(&b.y, &fake)?)? * k;
        dl -= scalar(&loss_cgan(&real_s, &fake_s, cfg.epsilon_log)?)? * k;
        n += b.len();
    }
    Ok((mse / n as f64, dl / n as f64))
}

// D sees the generator's batch statistics without them being folded in twice
const FROZEN: BnMode = BnMode::Train { update_stats: false };

/// One generator update on `adversarial + λ·L2`; returns `(total, l2, adversarial)`.
fn generator_step(
    g: &Generator,
    d: &Discriminator,
    b: &Batch,
    opt_g: &mut Adam,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64)> {
    let fake = g.forward(&b.x, Some(&b.m), &mut Ctx::train(rng))?.y_hat;
    let fake_scores = d.forward(&b.x, &fake, &Ctx::eval().with_bn(FROZEN))?;
    let adv = loss_adversarial(&fake_scores, cfg.epsilon_log, cfg.adversarial_form)?;
    let l2 = loss_l2(&b.y, &fake)?;
    let total = (&adv + (&l2 * cfg.lambda)?)?;
    opt_g.step(&total.backward()?)?;
    Ok((scalar(&total)?, scalar(&l2)?, scalar(&adv)?))
}

/// One discriminator update on `-loss_cgan` against fresh, detached fakes.
fn discriminator_step(
    g: &Generator,
    d: &Discriminator,
    b: &Batch,
    opt_d: &mut Adam,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let fresh = g
        .forward(&b.x, Some(&b.m), &mut Ctx::train(rng).with_bn(FROZEN))?
        .y_hat
        .detach();
    let train_bn = Ctx::eval().with_bn(BnMode::Train { update_stats: true });
    let real_s = d.forward(&b.x, &b.y, &train_bn)?;
    let fake_s = d.forward(&b.x, &fresh, &train_bn)?;
    let d_loss = loss_cgan(&real_s, &fake_s, cfg.epsilon_log)?.neg()?;
    opt_d.step(&d_loss.backward()?)?;
    scalar(&d_loss)
}

/// Adversarial training of a dual-encoder generator against `d`. Leaves the
/// best-validation generator loaded in `g`.
pub fn train_gan(
    g: &Generator,
    d: &Discriminator,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<GanOutcome> {
    cfg.validate()?;
    check_splits(train, val)?;
    if !g.is_dual() {
        return Err(Error::Config("adversarial training needs a dual-encoder generator".into()));
    }
    if g.s_head.is_some() {
        return Err(Error::Config("the aleatoric variant is trained without the discriminator".into()));
    }
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut opt_g = Adam::new(g.store.trainable(), cfg.adam(cfg.lr_generator))?;
    let mut opt_d = Adam::new(d.store.trainable(), cfg.adam(cfg.lr_discriminator))?;
    let mut plateau_g = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut plateau_d = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut log = TrainLog::default();
    let mut best_epoch = 0;
    let mut iterations = 0;
    let mut start_epoch = 1;
    let mut best: Option<HashMap<String, Tensor>> = None;

    if let (true, Some(state_path)) = (out.resume, out.path("state.json")) {
        if state_path.exists() {
            let st: State = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
            let dir = out.dir.as_ref().expect("dir set");
            let dev = g.store.device();
            g.store.load(dir.join("g_last.safetensors"))?;
            d.store.load(dir.join("d_last.safetensors"))?;
            opt_g.load_state(&candle_core::safetensors::load(dir.join("opt_g.safetensors"), dev)?, st.g_step, st.g_lr)?;
            opt_d.load_state(&candle_core::safetensors::load(dir.join("opt_d.safetensors"), dev)?, st.d_step, st.d_lr)?;
            if dir.join("g_best.safetensors").exists() {
                best = Some(candle_core::safetensors::load(dir.join("g_best.safetensors"), dev)?);
            }
            plateau_g = st.plateau_g;
            plateau_d = st.plateau_d;
            stopper = st.stopper;
            best_epoch = st.best_epoch;
            iterations = st.iterations;
            log = st.log;
            start_epoch = st.epoch + 1;
            log::info!("resuming adversarial training at epoch {start_epoch}");
        }
    }

    let capped = |it: usize| cfg.max_iterations.is_some_and(|m| it >= m);
    let mut stopped_early = stopper.bad_epochs >= stopper.patience;
    for epoch in start_epoch..=cfg.max_epochs {
        if stopped_early || capped(iterations) {
            break;
        }
        let t0 = Instant::now();
        let mut rng = cfg.epoch_rng(epoch);
        let order = batch_indices(train.len(), cfg.batch_size, cfg.shuffle.then_some(&mut rng));
        let (mut total_sum, mut l2_sum, mut adv_sum, mut d_sum, mut seen) = (0.0, 0.0, 0.0, 0.0, 0usize);
        let mut d_updates = 0usize;
        for (bi, idx) in order.into_iter().enumerate() {
            if capped(iterations) {
                break;
            }
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let b = Batch::from_samples(&refs, g.dtype())?;
            let k = b.len() as f64;

            let (total, l2, adv) = generator_step(g, d, &b, &mut opt_g, cfg, &mut rng)?;
            total_sum += total * k;
            l2_sum += l2 * k;
            adv_sum += adv * k;
            if (bi + 1) % cfg.d_update_every == 0 {
                d_sum += discriminator_step(g, d, &b, &mut opt_d, cfg, &mut rng)?;
                d_updates += 1;
            }
            seen += b.len();
            iterations += 1;
        }
        let (val_mse, val_d) = validate(g, d, val, cfg)?;
        if let Some(lr) = plateau_g.step(val_mse, opt_g.lr()) {
            log::info!("epoch {epoch}: generator lr -> {lr:e}");
            opt_g.set_lr(lr);
        }
        if let Some(lr) = plateau_d.step(val_d, opt_d.lr()) {
            log::info!("epoch {epoch}: discriminator lr -> {lr:e}");
            opt_d.set_lr(lr);
        }
        let verdict = stopper.update(val_mse);
        if verdict.improved {
            best_epoch = epoch;
            best = Some(g.store.snapshot()?);
            if let Some(dir) = &out.dir {
                save_generator(&dir.join("g_best.safetensors"), g, epoch, val_mse, out.norm_max, cfg.seed)?;
                save_discriminator(&dir.join("d_best.safetensors"), d, epoch, val_d, out.norm_max, cfg.seed)?;
            }
        }
        let denom = seen.max(1) as f64;
        log.push(EpochRow {
            epoch,
            train_loss: total_sum / denom,
            train_mse: l2_sum / denom,
            train_adversarial: Some(adv_sum / denom),
            train_d_loss: (d_updates > 0).then(|| d_sum / d_updates as f64),
            val_mse,
            val_loss: val_mse,
            val_d_loss: Some(val_d),
            lr_g: opt_g.lr(),
            lr_d: Some(opt_d.lr()),
            d_updates,
            iterations,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: G {:.4e} (l2 {:.4e}), val mse {val_mse:.4e}, val D {val_d:.4}, D updates {d_updates}{}",
            total_sum / denom,
            l2_sum / denom,
            if verdict.improved { " *" } else { "" }
        );
        if let Some(dir) = &out.dir {
            save_generator(&dir.join("g_last.safetensors"), g, epoch, val_mse, out.norm_max, cfg.seed)?;
            save_discriminator(&dir.join("d_last.safetensors"), d, epoch, val_d, out.norm_max, cfg.seed)?;
            candle_core::safetensors::save(&opt_g.state_tensors(), dir.join("opt_g.safetensors"))?;
            candle_core::safetensors::save(&opt_d.state_tensors(), dir.join("opt_d.safetensors"))?;
            let st = State {
                epoch,
                iterations,
                g_step: opt_g.steps(),
                g_lr: opt_g.lr(),
                d_step: opt_d.steps(),
                d_lr: opt_d.lr(),
                plateau_g: plateau_g.clone(),
                plateau_d: plateau_d.clone(),
                stopper: stopper.clone(),
                best_epoch,
                log: log.clone(),
            };
            std::fs::write(dir.join("state.json"), serde_json::to_string(&st)?)?;
            log.write_csv(dir.join("train_log.csv"))?;
            log.write_json(dir.join("train_log.json"))?;
        }
        stopped_early = verdict.stop;
    }
    if let Some(b) = &best {
        g.store.restore(b)?;
    }
    Ok(GanOutcome {
        best_val_mse: stopper.best,
        log,
        best_epoch,
        stopped_early,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DiscriminatorConfig, GeneratorConfig};
    use candle_core::DType;
    use chrono::{TimeZone, Utc};
    use ndarray::Array3;

    fn sample(i: usize) -> Sample {
        Sample {
            x: Array3::from_shape_fn((12, 64, 64), |(a, b, c)| ((a + b * c + i) % 11) as f32 / 20.0),
            m: Array3::from_shape_fn((25, 64, 64), |(a, b, c)| u8::from((a + b + c + i) % 4 == 0)),
            y: Array3::from_shape_fn((12, 64, 64), |(a, b, c)| ((a * b + c + i) % 7) as f32 / 20.0),
            t0: Utc.with_ymd_and_hms(2018, 5, 1, 0, 0, 0).unwrap(),
        }
    }

    fn max_change(before: &HashMap<String, Tensor>, after: &HashMap<String, Tensor>) -> f64 {
        before
            .iter()
            .map(|(k, v)| {
                let d = (v.to_dtype(DType::F64).unwrap() - after[k].to_dtype(DType::F64).unwrap()).unwrap();
                d.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn each_step_touches_only_its_own_network() {
        let g = Generator::new(GeneratorConfig::gnet().with_width_scale(0.25), 1, DType::F32).unwrap();
        let d = Discriminator::new(DiscriminatorConfig::default().with_width_scale(0.25), 2, DType::F32).unwrap();
        let cfg = TrainConfig::default();
        let (s0, s1) = (sample(0), sample(1));
        let b = Batch::from_samples(&[&s0, &s1], DType::F32).unwrap();
        let mut opt_g = Adam::new(g.store.trainable(), cfg.adam(1e-3)).unwrap();
        let mut opt_d = Adam::new(d.store.trainable(), cfg.adam(1e-3)).unwrap();
        let mut rng = cfg.epoch_rng(1);

        let (g0, d0) = (g.store.snapshot().unwrap(), d.store.snapshot().unwrap());
        generator_step(&g, &d, &b, &mut opt_g, &cfg, &mut rng).unwrap();
        let (g1, d1) = (g.store.snapshot().unwrap(), d.store.snapshot().unwrap());
        assert!(max_change(&g0, &g1) > 0.0);
        assert_eq!(max_change(&d0, &d1), 0.0, "generator step changed D (weights or BN statistics)");

        discriminator_step(&g, &d, &b, &mut opt_d, &cfg, &mut rng).unwrap();
        let (g2, d2) = (g.store.snapshot().unwrap(), d.store.snapshot().unwrap());
        assert_eq!(max_change(&g1, &g2), 0.0, "discriminator step changed G (weights or BN statistics)");
        assert!(max_change(&d1, &d2) > 0.0);
    }
}
