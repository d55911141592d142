//! Pixel-loss pretraining followed by alternating WGAN-GP updates with
//! spatial attention and domain adaptation terms.

mod checkpoint;

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{from_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, to_bytes, MAGIC, VERSION};

use crate::autodiff::{grad, no_grad, ops, Tensor, Var};
use crate::datapipe::{CropBatch, CropDataset};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::losses::{self, LossReport, LossWeights};
use crate::model::{spatial_attention, AttentionVariant, Conditioning, Discriminator, Generator, NetConfig, ParamSet};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub loss: LossWeights,
    pub lr_generator: f64,
    pub lr_critic: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub critic_updates_per_gen: usize,
    pub adversarial_steps: u64,
    pub seed: u64,
    pub attention: AttentionVariant,
    pub conditioning: Conditioning,
    /// Write `step_NNNNNN.s2ac` every this many adversarial steps (0 disables).
    pub checkpoint_every: u64,
    /// Validate every this many adversarial steps (0: only at the end).
    pub validate_every: u64,
    /// Validation crops used per evaluation (0: all).
    pub val_crops: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            net: NetConfig::default(),
            loss: LossWeights::default(),
            lr_generator: adam.lr,
            lr_critic: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: 16,
            pretrain_epochs: 2,
            critic_updates_per_gen: 1,
            adversarial_steps: 2000,
            seed: 0,
            attention: AttentionVariant::V3,
            conditioning: Conditioning::Concat,
            checkpoint_every: 500,
            validate_every: 500,
            val_crops: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.loss.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_generator >= 0.0 && self.lr_critic >= 0.0) {
            return bad("learning rates must be nonnegative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size == 0 || self.critic_updates_per_gen == 0 {
            return bad("train.batch_size and train.critic_updates_per_gen must be positive");
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub val_sre: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone)]
pub struct TrainState {
    pub generator: Generator<f32>,
    pub critic: Discriminator<f32>,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub pretrain_epochs_done: usize,
    /// Adversarial steps completed.
    pub step: u64,
    pub critic_updates: u64,
    pub generator_updates: u64,
    pub rng: ChaCha8Rng,
    pub best: Option<BestRecord>,
}

fn params_equal(a: &ParamSet<f32>, b: &ParamSet<f32>) -> bool {
    a.names() == b.names() && a.iter().zip(b.iter()).all(|((_, x), (_, y))| x == y)
}

impl PartialEq for TrainState {
    fn eq(&self, o: &Self) -> bool {
        params_equal(&self.generator.params, &o.generator.params)
            && params_equal(&self.critic.params, &o.critic.params)
            && self.opt_g == o.opt_g
            && self.opt_d == o.opt_d
            && self.pretrain_epochs_done == o.pretrain_epochs_done
            && self.step == o.step
            && self.critic_updates == o.critic_updates
            && self.generator_updates == o.generator_updates
            && self.rng == o.rng
            && self.best == o.best
    }
}

impl std::fmt::Debug for TrainState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainState")
            .field("pretrain_epochs_done", &self.pretrain_epochs_done)
            .field("step", &self.step)
            .field("critic_updates", &self.critic_updates)
            .field("generator_updates", &self.generator_updates)
            .field("best", &self.best)
            .finish_non_exhaustive()
    }
}

impl TrainState {
    /// Fresh networks and optimizers, initialized from `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(&config.net, config.conditioning, &mut rng)?;
        let critic = Discriminator::new(&config.net, &mut rng)?;
        Ok(TrainState {
            opt_g: Adam::new(config.adam(config.lr_generator), &generator.params),
            opt_d: Adam::new(config.adam(config.lr_critic), &critic.params),
            generator,
            critic,
            pretrain_epochs_done: 0,
            step: 0,
            critic_updates: 0,
            generator_updates: 0,
            rng,
            best: None,
        })
    }

    /// Largest absolute difference over all network parameters.
    pub fn max_param_diff(&self, other: &TrainState) -> f64 {
        let diff = |a: &ParamSet<f32>, b: &ParamSet<f32>| {
            a.iter().zip(b.iter()).map(|((_, x), (_, y))| x.max_abs_diff(y)).fold(0.0, f64::max)
        };
        diff(&self.generator.params, &other.generator.params).max(diff(&self.critic.params, &other.critic.params))
    }

    /// Attention map the generator is conditioned on, without gradient.
    pub fn conditioning_map(&self, variant: AttentionVariant, attention_source: &Tensor<f32>) -> Result<Var<f32>> {
        conditioning_map(&self.critic, variant, attention_source)
    }

    /// `G(z, A_s(source))` without gradient.
    pub fn predict(&self, variant: AttentionVariant, z: &Tensor<f32>, attention_source: &Tensor<f32>) -> Result<Tensor<f32>> {
        predict(&self.generator, &self.critic, variant, z, attention_source)
    }
}

pub fn conditioning_map(critic: &Discriminator<f32>, variant: AttentionVariant, source: &Tensor<f32>) -> Result<Var<f32>> {
    no_grad(|| {
        let taps = critic.forward(&Var::constant(source.clone()))?.taps;
        Ok(spatial_attention(variant, &taps)?.detach())
    })
}

pub fn predict(
    generator: &Generator<f32>,
    critic: &Discriminator<f32>,
    variant: AttentionVariant,
    z: &Tensor<f32>,
    attention_source: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let a = conditioning_map(critic, variant, attention_source)?;
    no_grad(|| Ok(generator.forward(&Var::constant(z.clone()), &a)?.value().clone()))
}

fn grads_for(loss: &Var<f32>, params: &ParamSet<f32>) -> Vec<Option<Var<f32>>> {
    let wrt: Vec<&Var<f32>> = params.vars().iter().collect();
    grad(loss, &wrt, false)
}

fn non_finite(step: u64, report: &LossReport) -> Error {
    Error::NonFiniteLoss {
        step,
        report: report.to_json(),
    }
}

/// One pixel-loss update of the generator; the critic only supplies attention.
/// Returns the batch's per-pixel mean squared error before the update.
pub fn pretrain_step(state: &mut TrainState, cfg: &TrainConfig, batch: &CropBatch) -> Result<f64> {
    let a = conditioning_map(&state.critic, cfg.attention, &batch.y_tilde)?;
    let x_hat = state.generator.forward(&Var::constant(batch.z.clone()), &a)?;
    let loss = losses::pixel_loss(&x_hat, &Var::constant(batch.y.clone()), cfg.loss.pixel_reduction)?;
    if !loss.item().is_finite() {
        let report = LossReport {
            pixel: loss.item() as f64,
            ..Default::default()
        };
        return Err(non_finite(state.step, &report));
    }
    let mse = evaluation::mse(x_hat.value().data(), batch.y.data())?;
    let grads = grads_for(&ops::scale(&loss, cfg.loss.lambda_p as f32), &state.generator.params);
    state.opt_g.step(&mut state.generator.params, &grads);
    state.generator_updates += 1;
    Ok(mse)
}

/// One critic update per `cfg.critic_updates_per_gen`, then one generator update.
pub fn adversarial_step(state: &mut TrainState, cfg: &TrainConfig, batch: &CropBatch) -> Result<LossReport> {
    let n = batch.z.shape()[0];
    let z = Var::constant(batch.z.clone());
    let y = Var::constant(batch.y.clone());
    let y_tilde = Var::constant(batch.y_tilde.clone());
    let w = &cfg.loss;
    let mut report = LossReport {
        step: state.step + 1,
        ..Default::default()
    };

    for _ in 0..cfg.critic_updates_per_gen {
        let a_cond = conditioning_map(&state.critic, cfg.attention, &batch.y_tilde)?;
        let x_hat = no_grad(|| state.generator.forward(&z, &a_cond))?.detach();
        let real = state.critic.forward(&y)?;
        let fake = state.critic.forward(&x_hat)?;
        let up = state.critic.forward(&y_tilde)?;
        let a_real = spatial_attention(cfg.attention, &real.taps)?;
        let a_fake = spatial_attention(cfg.attention, &fake.taps)?;
        let a_up = spatial_attention(cfg.attention, &up.taps)?;
        let eps: Vec<f32> = (0..n).map(|_| state.rng.random::<f32>()).collect();
        let critic = &state.critic;
        let gp = losses::gradient_penalty(|x| critic.score(x), &batch.y, x_hat.value(), &eps)?;
        let l_sa = losses::spatial_attention_loss(&a_fake, &a_real)?;
        let l_da = losses::domain_adaptation_loss(&a_up, &a_real)?;
        let total = losses::critic_objective(&real.score, &fake.score, &gp.value, &l_sa, &l_da, w);

        report.wasserstein_gap = real.score.value().mean() - fake.score.value().mean();
        report.gradient_penalty = gp.value.item() as f64;
        report.critic_grad_norm = gp.norms.iter().sum::<f64>() / n as f64;
        report.spatial_attention = l_sa.item() as f64;
        report.domain_adaptation = l_da.item() as f64;
        report.critic_total = total.item() as f64;
        if !report.is_finite() {
            return Err(non_finite(report.step, &report));
        }
        let grads = grads_for(&total, &state.critic.params);
        state.opt_d.step(&mut state.critic.params, &grads);
        state.critic_updates += 1;
    }

    let a_cond = conditioning_map(&state.critic, cfg.attention, &batch.y_tilde)?;
    let x_hat = state.generator.forward(&z, &a_cond)?;
    let d_fake = state.critic.score(&x_hat)?;
    let l_p = losses::pixel_loss(&x_hat, &y, w.pixel_reduction)?;
    let total = losses::generator_objective(&d_fake, &l_p, w);
    report.pixel = l_p.item() as f64;
    report.generator_adversarial = -d_fake.value().mean();
    report.generator_total = total.item() as f64;
    if !report.is_finite() {
        return Err(non_finite(report.step, &report));
    }
    let grads = grads_for(&total, &state.generator.params);
    state.opt_g.step(&mut state.generator.params, &grads);
    state.generator_updates += 1;
    state.step += 1;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    /// Per-pixel mean squared error.
    pub mse: f64,
    pub sre: f64,
}

/// Pooled per-pixel MSE and SRE of the generator on (up to `limit`) crops.
pub fn validate(state: &TrainState, cfg: &TrainConfig, data: &CropDataset, limit: usize) -> Result<Validation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let count = if limit == 0 { data.len() } else { limit.min(data.len()) };
    let idx: Vec<usize> = (0..count).collect();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for chunk in idx.chunks(cfg.batch_size.max(1)) {
        let b = data.batch(chunk);
        pred.extend_from_slice(state.predict(cfg.attention, &b.z, &b.y_tilde)?.data());
        truth.extend_from_slice(b.y.data());
    }
    Ok(Validation {
        mse: evaluation::mse(&pred, &truth)?,
        sre: evaluation::sre(&pred, &truth)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrainEvent {
    Pretrain {
        epoch: usize,
        train_mse: Option<f64>,
        val_mse: f64,
    },
    Step(LossReport),
    Validation {
        step: u64,
        val_mse: f64,
        val_sre: f64,
    },
    Checkpoint {
        step: u64,
        path: String,
    },
}

impl TrainEvent {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<TrainEvent>,
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    train: &'a CropDataset,
    val: &'a CropDataset,
    out_dir: Option<&'a Path>,
    log: &'a mut dyn FnMut(&TrainEvent),
    history: Vec<TrainEvent>,
}

impl Run<'_> {
    fn emit(&mut self, e: TrainEvent) {
        (self.log)(&e);
        self.history.push(e);
    }

    fn checkpoint(&mut self, state: &TrainState, name: &str) -> Result<()> {
        if let Some(dir) = self.out_dir {
            let path = dir.join(name);
            save_checkpoint(self.cfg, state, &path)?;
            self.emit(TrainEvent::Checkpoint {
                step: state.step,
                path: path.display().to_string(),
            });
        }
        Ok(())
    }

    fn pretrain(&mut self, state: &mut TrainState) -> Result<()> {
        let cfg = self.cfg;
        if state.pretrain_epochs_done < cfg.pretrain_epochs && state.pretrain_epochs_done == 0 {
            let v = validate(state, cfg, self.val, cfg.val_crops)?;
            self.emit(TrainEvent::Pretrain {
                epoch: 0,
                train_mse: None,
                val_mse: v.mse,
            });
        }
        while state.pretrain_epochs_done < cfg.pretrain_epochs {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut state.rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                total += pretrain_step(state, cfg, &self.train.batch(chunk))? * chunk.len() as f64;
            }
            state.pretrain_epochs_done += 1;
            let v = validate(state, cfg, self.val, cfg.val_crops)?;
            self.emit(TrainEvent::Pretrain {
                epoch: state.pretrain_epochs_done,
                train_mse: Some(total / self.train.len() as f64),
                val_mse: v.mse,
            });
        }
        Ok(())
    }

    fn adversarial(&mut self, state: &mut TrainState) -> Result<()> {
        let cfg = self.cfg;
        let batch = cfg.batch_size.min(self.train.len());
        while state.step < cfg.adversarial_steps {
            let idx = index::sample(&mut state.rng, self.train.len(), batch).into_vec();
            let report = adversarial_step(state, cfg, &self.train.batch(&idx))?;
            self.emit(TrainEvent::Step(report));
            let s = state.step;
            let due = |every: u64| every > 0 && s % every == 0;
            if due(cfg.validate_every) || s == cfg.adversarial_steps {
                let v = validate(state, cfg, self.val, cfg.val_crops)?;
                self.emit(TrainEvent::Validation {
                    step: s,
                    val_mse: v.mse,
                    val_sre: v.sre,
                });
                if v.sre.is_finite() && state.best.is_none_or(|b| v.sre > b.val_sre) {
                    state.best = Some(BestRecord { step: s, val_sre: v.sre });
                    self.checkpoint(state, "best.s2ac")?;
                }
            }
            if due(cfg.checkpoint_every) {
                self.checkpoint(state, &format!("step_{s:06}.s2ac"))?;
            }
        }
        Ok(())
    }
}

/// Pretraining only: `cfg.pretrain_epochs` epochs of pixel-loss updates.
pub fn pretrain_generator(cfg: &TrainConfig, train: &CropDataset, val: &CropDataset) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut log = |_: &TrainEvent| {};
    Run {
        cfg,
        train,
        val,
        out_dir: None,
        log: &mut log,
        history: Vec::new(),
    }
    .pretrain(&mut state)?;
    Ok(state)
}

/// Full training from a fresh state.
pub fn train(
    cfg: &TrainConfig,
    train: &CropDataset,
    val: &CropDataset,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    resume(TrainState::new(cfg)?, cfg, train, val, out_dir, log)
}

/// Continues training from `state` up to the configured budget. Checkpoints
/// go to `out_dir`: `pretrain.s2ac` once pretraining ends, `step_NNNNNN.s2ac`
/// periodically, `best.s2ac` at the best validation SRE, and `last.s2ac`.
pub fn resume(
    mut state: TrainState,
    cfg: &TrainConfig,
    train: &CropDataset,
    val: &CropDataset,
    out_dir: Option<&Path>,
    log: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut run = Run {
        cfg,
        train,
        val,
        out_dir,
        log,
        history: Vec::new(),
    };
    let pretraining = state.pretrain_epochs_done < cfg.pretrain_epochs;
    run.pretrain(&mut state)?;
    if pretraining && state.step == 0 {
        run.checkpoint(&state, "pretrain.s2ac")?;
    }
    run.adversarial(&mut state)?;
    run.checkpoint(&state, "last.s2ac")?;
    Ok(TrainOutcome {
        history: run.history,
        state,
    })
}
