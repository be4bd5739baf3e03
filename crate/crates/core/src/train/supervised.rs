use std::collections::HashMap;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::{
    batch_indices, check_splits, loss_aleatoric, loss_mse, sequential_batches, Adam, Batch, EarlyStopping, EpochRow,
    PlateauScheduler, RunOutput, TrainConfig, TrainLog,
};
use crate::data::Sample;
use crate::error::Result;
use crate::models::checkpoint::save_generator;
use crate::models::Generator;
use crate::nn::ops::scalar;
use crate::nn::Ctx;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationScores {
    pub mse: f64,
    /// Training objective on the split: MSE, or the aleatoric loss for the σ-head variant.
    pub objective: f64,
}

/// Deterministic (eval-mode) scores of `g` on `samples`, in normalized units.
pub fn evaluate_generator(g: &Generator, samples: &[Sample], batch_size: usize) -> Result<ValidationScores> {
    let (mut mse, mut obj, mut n) = (0.0, 0.0, 0usize);
    for batch in sequential_batches(samples, batch_size, g.dtype()) {
        let b = batch?;
        let p = g.forward(&b.x, Some(&b.m), &mut Ctx::eval())?;
        let y_hat = p.y_hat.detach();
        let k = b.len() as f64;
        let batch_mse = scalar(&loss_mse(&b.y, &y_hat)?)?;
        mse += batch_mse * k;
        obj += match &p.s {
            Some(s) => scalar(&loss_aleatoric(&b.y, &y_hat, &s.detach())?)?,
            None => batch_mse,
        } * k;
        n += b.len();
    }
    Ok(ValidationScores {
        mse: mse / n as f64,
        objective: obj / n as f64,
    })
}

pub(crate) fn objective(g: &Generator, b: &Batch, ctx: &mut Ctx) -> Result<(Tensor, f64)> {
    let p = g.forward(&b.x, Some(&b.m), ctx)?;
    let mse = loss_mse(&b.y, &p.y_hat)?;
    let mse_v = scalar(&mse)?;
    let loss = match &p.s {
        Some(s) => loss_aleatoric(&b.y, &p.y_hat, s)?,
        None => mse,
    };
    Ok((loss, mse_v))
}

#[derive(Clone, Debug)]
pub struct SupervisedOutcome {
    pub log: TrainLog,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct State {
    epoch: usize,
    iterations: usize,
    adam_step: u64,
    lr: f64,
    plateau: PlateauScheduler,
    stopper: EarlyStopping,
    best_epoch: usize,
    log: TrainLog,
}

/// Trains `g` on MSE (or the aleatoric loss when it has a σ head) and leaves
/// the best-validation parameters loaded in `g`.
pub fn train_supervised(
    g: &Generator,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    out: &RunOutput,
) -> Result<SupervisedOutcome> {
    cfg.validate()?;
    check_splits(train, val)?;
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut opt = Adam::new(g.store.trainable(), cfg.adam(cfg.lr_generator))?;
    let mut plateau = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut log = TrainLog::default();
    let mut best_epoch = 0;
    let mut iterations = 0;
    let mut start_epoch = 1;
    let mut best: Option<HashMap<String, Tensor>> = None;

    if let (true, Some(state_path)) = (out.resume, out.path("state.json")) {
        if state_path.exists() {
            let st: State = serde_json::from_str(&std::fs::read_to_string(&state_path)?)?;
            g.store.load(out.path("g_last.safetensors").expect("dir set"))?;
            let moments = candle_core::safetensors::load(out.path("opt_g.safetensors").expect("dir set"), g.store.device())?;
            opt.load_state(&moments, st.adam_step, st.lr)?;
            let best_path = out.path("g_best.safetensors").expect("dir set");
            if best_path.exists() {
                best = Some(candle_core::safetensors::load(&best_path, g.store.device())?);
            }
            plateau = st.plateau;
            stopper = st.stopper;
            best_epoch = st.best_epoch;
            iterations = st.iterations;
            log = st.log;
            start_epoch = st.epoch + 1;
            log::info!("resuming supervised training at epoch {start_epoch}");
        }
    }

    let mut stopped_early = false;
    let capped = |it: usize| cfg.max_iterations.is_some_and(|m| it >= m);
    if stopper.bad_epochs >= stopper.patience {
        stopped_early = true;
    }
    for epoch in start_epoch..=cfg.max_epochs {
        if stopped_early || capped(iterations) {
            break;
        }
        let t0 = Instant::now();
        let mut rng = cfg.epoch_rng(epoch);
        let order = batch_indices(train.len(), cfg.batch_size, cfg.shuffle.then_some(&mut rng));
        let (mut loss_sum, mut mse_sum, mut seen) = (0.0, 0.0, 0usize);
        for idx in order {
            if capped(iterations) {
                break;
            }
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let b = Batch::from_samples(&refs, g.dtype())?;
            let (loss, mse) = objective(g, &b, &mut Ctx::train(&mut rng))?;
            let grads = loss.backward()?;
            opt.step(&grads)?;
            let k = b.len() as f64;
            loss_sum += scalar(&loss)? * k;
            mse_sum += mse * k;
            seen += b.len();
            iterations += 1;
        }
        let v = evaluate_generator(g, val, cfg.batch_size)?;
        if let Some(lr) = plateau.step(v.objective, opt.lr()) {
            log::info!("epoch {epoch}: generator lr -> {lr:e}");
            opt.set_lr(lr);
        }
        let verdict = stopper.update(v.objective);
        if verdict.improved {
            best_epoch = epoch;
            best = Some(g.store.snapshot()?);
            if let Some(p) = out.path("g_best.safetensors") {
                save_generator(&p, g, epoch, v.objective, out.norm_max, cfg.seed)?;
            }
        }
        log.push(EpochRow {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_mse: mse_sum / seen.max(1) as f64,
            train_adversarial: None,
            train_d_loss: None,
            val_mse: v.mse,
            val_loss: v.objective,
            val_d_loss: None,
            lr_g: opt.lr(),
            lr_d: None,
            d_updates: 0,
            iterations,
            wall_seconds: t0.elapsed().as_secs_f64(),
        });
        log::info!(
            "epoch {epoch}: train {:.6e}, val {:.6e}{}",
            log.rows.last().map_or(0.0, |r| r.train_loss),
            v.objective,
            if verdict.improved { " *" } else { "" }
        );
        if let Some(dir) = &out.dir {
            save_generator(&dir.join("g_last.safetensors"), g, epoch, v.objective, out.norm_max, cfg.seed)?;
            candle_core::safetensors::save(&opt.state_tensors(), dir.join("opt_g.safetensors"))?;
            let st = State {
                epoch,
                iterations,
                adam_step: opt.steps(),
                lr: opt.lr(),
                plateau: plateau.clone(),
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
    Ok(SupervisedOutcome {
        best_val: stopper.best,
        log,
        best_epoch,
        stopped_early,
        iterations,
    })
}
