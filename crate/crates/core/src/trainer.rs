//! Mini-batch training of the combined objective with clipped Adam.
//!
//! Each step draws a batch from every non-empty part of the dataset, builds
//! `J`, and moves the parameters along `-Γ(g)` where `g = -∂J`. An epoch is
//! one pass over the labeled items (or over the first non-empty collection
//! when there are none).

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::diffcore::{ParamSet, Tensor};
use crate::distributions::NoiseStream;
use crate::model::{Model, ModelConfig};
use crate::objectives::{objective_gradient, validate_batch, Batch, BatchNoise, ObjectiveConfig, ObjectiveError, ObjectiveMetrics, UnfeaturedVariant};

/// Logs in a row with `|J|` above the ceiling before training aborts.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("non-finite gradient for `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: u64, reason: String },
    #[error("dataset has no items")]
    EmptyDataset,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

fn config_err(field: &str, reason: impl Into<String>) -> TrainError {
    TrainError::Config {
        field: field.to_owned(),
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Raw gradients are clipped into `[clip_lo, clip_hi]` before the moments.
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-4,
            clip_lo: -1.0,
            clip_hi: 1.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(config_err("learning_rate", "must be positive"));
        }
        for (f, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(config_err(f, "must lie in [0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(config_err("epsilon", "must be positive"));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(config_err("clip_lo", "must be below clip_hi"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One Adam step on `grads` (the descent direction). Returns the new state
/// and the increment to add to the parameters.
pub fn adam_update(state: &OptimizerState, grads: &ParamSet) -> Result<(OptimizerState, ParamSet), TrainError> {
    let c = state.config;
    let step = state.step + 1;
    if let Some((name, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
        return Err(TrainError::NonFiniteGradient { name: name.to_owned(), step });
    }
    let mut next = state.clone();
    next.step = step;
    let mut inc = grads.zeros_like();
    let bc1 = 1.0 - c.beta1.powi(step as i32);
    let bc2 = 1.0 - c.beta2.powi(step as i32);
    for (name, g) in grads.iter() {
        let m = next.m.get_mut(name).expect("moment shaped like params").data_mut();
        let v = next.v.get_mut(name).expect("moment shaped like params").data_mut();
        let d = inc.get_mut(name).unwrap().data_mut();
        for i in 0..g.len() {
            let gi = g.data()[i].clamp(c.clip_lo, c.clip_hi);
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            d[i] = -c.learning_rate * mh / (vh.sqrt() + c.epsilon);
        }
    }
    Ok((next, inc))
}

pub fn apply_increment(params: &mut ParamSet, inc: &ParamSet) {
    for (name, t) in params.iter_mut() {
        if let Some(d) = inc.get(name) {
            t.data_mut().iter_mut().zip(d.data()).for_each(|(p, d)| *p += d);
        }
    }
}

/// Evaluates `J` on `batch`, takes the Adam step on `-∂J` and returns the
/// updated parameters, state and the pre-update metrics.
pub fn train_step(
    config: &ModelConfig,
    params: &ParamSet,
    state: &OptimizerState,
    batch: &Batch,
    obj: &ObjectiveConfig,
    noise: &BatchNoise,
) -> Result<(ParamSet, OptimizerState, ObjectiveMetrics), TrainError> {
    let (metrics, mut grads) = objective_gradient(config, params, batch, obj, noise)?;
    if !metrics.j.is_finite() {
        return Err(TrainError::Diverged {
            step: state.step + 1,
            reason: format!("J = {}", metrics.j),
        });
    }
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    let (next, inc) = adam_update(state, &grads)?;
    let mut out = params.clone();
    apply_increment(&mut out, &inc);
    Ok((out, next, metrics))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub objective: ObjectiveConfig,
    pub seed: u64,
    /// Record metrics every this many steps.
    pub log_every: usize,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub divergence_ceiling: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            batch_size: 100,
            epochs: 100,
            learning_rate: a.learning_rate,
            beta1: a.beta1,
            beta2: a.beta2,
            epsilon: a.epsilon,
            clip_lo: a.clip_lo,
            clip_hi: a.clip_hi,
            objective: ObjectiveConfig::new(crate::objectives::Coefficients::CRISM),
            seed: 0,
            log_every: 1,
            checkpoint_every: 0,
            divergence_ceiling: 1e12,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            clip_lo: self.clip_lo,
            clip_hi: self.clip_hi,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(config_err("epochs", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(config_err("log_every", "must be positive"));
        }
        if !(self.divergence_ceiling > 0.0) {
            return Err(config_err("divergence_ceiling", "must be positive"));
        }
        self.adam().validate()?;
        self.objective.validate(model)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    #[serde(flatten)]
    pub metrics: ObjectiveMetrics,
}

pub const METRIC_HEADER: &str = "step,epoch,J,elbo_fxy,elbo_fx,elbo_rxy,elbo_ry,loss_y,loss_x";

pub fn write_metrics_csv(rows: &[MetricRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{METRIC_HEADER}")?;
    for r in rows {
        let m = &r.metrics;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step, r.epoch, m.j, m.elbo_fxy, m.elbo_fx, m.elbo_rxy, m.elbo_ry, m.loss_y, m.loss_x
        )?;
    }
    Ok(())
}

/// Endless reshuffled passes over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Self { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Batch composition for one epoch: the driving collection's permutation
/// split into chunks, the others drawn `batch_size` at a time.
struct Batcher {
    sizes: [usize; 3],
    driver: usize,
    cyclers: [Option<Cycler>; 3],
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(sizes: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let driver = sizes.iter().position(|n| *n > 0).expect("non-empty dataset");
        let cyclers = [0, 1, 2].map(|k| (k != driver && sizes[k] > 0).then(|| Cycler::new(sizes[k], &mut rng)));
        Self { sizes, driver, cyclers, rng }
    }

    fn steps_per_epoch(&self, batch: usize) -> usize {
        self.sizes[self.driver].div_ceil(batch)
    }

    /// Index lists per collection for every step of the next epoch.
    fn epoch(&mut self, batch: usize) -> Vec<[Vec<usize>; 3]> {
        let mut order: Vec<usize> = (0..self.sizes[self.driver]).collect();
        order.shuffle(&mut self.rng);
        order
            .chunks(batch)
            .map(|chunk| {
                let mut parts: [Vec<usize>; 3] = Default::default();
                parts[self.driver] = chunk.to_vec();
                for k in 0..3 {
                    if let Some(c) = self.cyclers[k].as_mut() {
                        parts[k] = c.take(batch, &mut self.rng);
                    }
                }
                parts
            })
            .collect()
    }
}

fn select(t: &Tensor, idx: &[usize], cols: usize) -> Tensor {
    if idx.is_empty() {
        Tensor::zeros(&[0, cols])
    } else {
        t.select_rows(idx)
    }
}

fn make_batch(ds: &Dataset, config: &ModelConfig, parts: &[Vec<usize>; 3]) -> Batch {
    Batch {
        labeled_x: select(&ds.labeled_x, &parts[0], config.x_dim),
        labeled_y: select(&ds.labeled_y, &parts[0], config.y_dim),
        unlabeled_x: select(&ds.unlabeled_x, &parts[1], config.x_dim),
        unfeatured_y: select(&ds.unfeatured_y, &parts[2], config.y_dim),
        unfeatured_z: ds.unfeatured_z.as_ref().map(|z| select(z, &parts[2], config.z_dim)),
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricRow>,
    pub optimizer: OptimizerState,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs the full loop. A pure function of `(model, dataset, config)`:
/// batches come from a stream seeded by `config.seed` and objective noise
/// from a separate stream of the same seed.
pub fn run_training(model: &Model, ds: &Dataset, config: &TrainConfig, checkpoint_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    let mc = &model.config;
    config.validate(mc)?;
    let (nl, nu, ny) = ds.counts();
    if nl + nu + ny == 0 {
        return Err(TrainError::EmptyDataset);
    }
    if ny > 0 && config.objective.variant == UnfeaturedVariant::ObservedZ && ds.unfeatured_z.is_none() {
        return Err(config_err("objective.variant", "observed_z needs unfeatured z values in the dataset"));
    }
    let mut batcher = Batcher::new([nl, nu, ny], config.seed);
    let mut noise = NoiseStream::new(config.seed, 1);
    let mut params = model.params.clone();
    let mut state = OptimizerState::new(config.adam(), &params);
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut above = 0;
    info!(
        "training {} epochs x {} steps (labeled {nl}, unlabeled {nu}, unfeatured {ny})",
        config.epochs,
        batcher.steps_per_epoch(config.batch_size)
    );
    for epoch in 1..=config.epochs {
        for parts in batcher.epoch(config.batch_size) {
            let batch = make_batch(ds, mc, &parts);
            validate_batch(mc, &batch, &config.objective)?;
            let bn = BatchNoise::draw(&mut noise, mc, &config.objective, batch.counts());
            let (p, s, metrics) = train_step(mc, &params, &state, &batch, &config.objective, &bn)?;
            params = p;
            state = s;
            if state.step % config.log_every as u64 == 0 {
                log.push(MetricRow { step: state.step, epoch, metrics });
                if metrics.j.abs() > config.divergence_ceiling {
                    above += 1;
                    if above >= DIVERGENCE_PATIENCE {
                        return Err(TrainError::Diverged {
                            step: state.step,
                            reason: format!("|J| above {} for {DIVERGENCE_PATIENCE} consecutive logs", config.divergence_ceiling),
                        });
                    }
                } else {
                    above = 0;
                }
            }
        }
        if let Some(last) = log.last() {
            debug!("epoch {epoch}: J = {:.6}, loss_x = {:.6}", last.metrics.j, last.metrics.loss_x);
        }
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("checkpoint_epoch{epoch}.bin"));
                params.save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome {
        model: Model {
            config: mc.clone(),
            params,
        },
        log,
        optimizer: state,
        checkpoints,
    })
}
