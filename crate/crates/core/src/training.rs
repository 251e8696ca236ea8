//! Optimization: clipping, Adam without momentum, weight averaging and the
//! checkpointed training loop.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::evaluation::evaluate_deterministic;
use crate::model::{DropoutMasks, Model, RnnState};
use crate::data::BatchStream;
use crate::numerics::{Gradients, ParameterSet, Real, Rng, Tape, Tensor};

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_gradients<R: Real>(grads: &mut Gradients<R>, max_norm: f64) -> Result<f64> {
    if !grads.is_finite() {
        return Err(Error::Numeric("gradient contains NaN or infinity".to_string()));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(R::from_f64_lossy(max_norm / norm));
        // Rounding can leave the result a few ulps above the limit.
        let mut factor = 1.0;
        while grads.global_norm() > max_norm {
            factor *= 1.0 - 1e-6;
            grads.scale(R::from_f64_lossy(factor));
        }
    }
    Ok(norm)
}

/// Adam constants. The first-moment decay is fixed at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Second-moment accumulators and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<R> {
    pub v: Vec<Tensor<R>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<R: Real> OptState<R> {
    pub fn new(params: &ParameterSet<R>, config: AdamConfig) -> Self {
        OptState { v: params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect(), t: 0, config }
    }
}

/// One Adam update with `β1 = 0` and coupled L2:
/// `g ← grad + 2·l2·θ`, `v ← β2·v + (1−β2)·g²`, `θ ← θ − lr·g/(√v̂ + ε)`
/// with `v̂ = v/(1−β2ᵗ)`. Parameters without a gradient get `grad = 0`.
///
/// Nothing is modified when the update would be non-finite.
pub fn adam_step<R: Real>(
    params: &mut ParameterSet<R>,
    grads: &Gradients<R>,
    opt: &mut OptState<R>,
    learning_rate: f64,
    l2_penalty: f64,
) -> Result<()> {
    if opt.v.len() != params.len() {
        return Err(Error::dim(format!("optimizer holds {} slots for {} parameters", opt.v.len(), params.len())));
    }
    let t = opt.t + 1;
    let AdamConfig { beta2, epsilon } = opt.config;
    let correction = 1.0 - beta2.powi(t.min(i32::MAX as u64) as i32);
    let (b2, one_minus_b2) = (R::from_f64_lossy(beta2), R::from_f64_lossy(1.0 - beta2));
    let (lr, eps, decay) =
        (R::from_f64_lossy(learning_rate), R::from_f64_lossy(epsilon), R::from_f64_lossy(2.0 * l2_penalty));
    let inv_correction = R::from_f64_lossy(1.0 / correction);

    let mut new_theta = Vec::with_capacity(params.len());
    let mut new_v = Vec::with_capacity(params.len());
    for (id, _, theta) in params.iter() {
        let grad = grads.get(id);
        if let Some(g) = grad {
            theta.check_same_shape(g)?;
        }
        let v = &opt.v[id.0];
        let mut th = theta.data().to_vec();
        let mut vv = v.data().to_vec();
        for k in 0..th.len() {
            let g = grad.map_or(R::zero(), |g| g.data()[k]) + decay * th[k];
            vv[k] = b2 * vv[k] + one_minus_b2 * g * g;
            th[k] -= lr * g / ((vv[k] * inv_correction).sqrt() + eps);
        }
        if th.iter().chain(&vv).any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite Adam update for `{}`", params.name(id))));
        }
        new_theta.push(th);
        new_v.push(vv);
    }
    for ((theta, v), (th, vv)) in params.tensors_mut().iter_mut().zip(opt.v.iter_mut()).zip(new_theta.into_iter().zip(new_v)) {
        theta.data_mut().copy_from_slice(&th);
        v.data_mut().copy_from_slice(&vv);
    }
    opt.t = t;
    Ok(())
}

/// Running mean of parameter snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct AverageState<R> {
    pub mean: Option<ParameterSet<R>>,
    pub count: u64,
}

impl<R: Real> Default for AverageState<R> {
    fn default() -> Self {
        AverageState { mean: None, count: 0 }
    }
}

impl<R: Real> AverageState<R> {
    pub fn is_active(&self) -> bool {
        self.mean.is_some()
    }

    /// `mean ← mean + (θ − mean)/(count + 1)`; the first snapshot is copied.
    pub fn update(&mut self, theta: &ParameterSet<R>) {
        match &mut self.mean {
            None => self.mean = Some(theta.clone()),
            Some(mean) => {
                let inv = R::from_f64_lossy(1.0 / (self.count + 1) as f64);
                for (m, t) in mean.tensors_mut().iter_mut().zip(theta.tensors()) {
                    for (a, &b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += (b - *a) * inv;
                    }
                }
            }
        }
        self.count += 1;
    }
}

/// When to validate and when to start averaging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSchedule {
    /// Total optimizer steps.
    pub steps: usize,
    /// Steps between validations.
    pub checkpoint_interval: usize,
    /// Validations without improvement before averaging starts.
    pub patience: usize,
    /// Averaging starts after this fraction of `steps` at the latest.
    pub averaging_fraction: f64,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_interval == 0 {
            return Err(Error::config("checkpoint_interval", "must be positive"));
        }
        if !(self.averaging_fraction > 0.0 && self.averaging_fraction <= 1.0) {
            return Err(Error::config("averaging_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Step after which averaging is switched on regardless of progress.
    pub fn latest_averaging_step(&self) -> usize {
        (self.steps as f64 * self.averaging_fraction).floor() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub max_grad_norm: f64,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { learning_rate: 0.002, l2_penalty: 0.0, max_grad_norm: 10.0, adam: AdamConfig::default() }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub train_nats: f64,
    pub val_nats: f64,
    pub wall_seconds: f64,
    pub averaged: bool,
}

pub const LOG_HEADER: &str = "step\ttrain_nats\tval_nats\twall_seconds";

/// Tab-separated log with header.
pub fn format_log(records: &[CheckpointRecord]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in records {
        s.push_str(&format!("{}\t{:.8}\t{:.8}\t{:.3}\n", r.step, r.train_nats, r.val_nats, r.wall_seconds));
    }
    s
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<R> {
    /// Weights (raw or averaged) with the lowest validation loss.
    pub best: ParameterSet<R>,
    pub best_val: f64,
    /// Raw weights after the last step.
    pub last: ParameterSet<R>,
    /// The running average if averaging started, otherwise `last`.
    pub final_params: ParameterSet<R>,
    pub opt: OptState<R>,
    pub log: Vec<CheckpointRecord>,
    /// Step at which averaging started.
    pub averaging_started: Option<usize>,
}

/// Generic checkpointed optimization loop.
///
/// `step(θ, i)` returns the gradient and training loss of step `i`;
/// `validate(θ)` returns validation nats. Gradients are clipped and applied
/// with Adam. Averaging starts once `patience` validations pass without
/// improvement, or after the latest averaging step; from then on every
/// validation first adds the current weights to the average and scores the
/// average. `record_wall_time = false` writes zero wall time so logs are
/// reproducible byte for byte.
pub fn optimize<R, S, V>(
    params: ParameterSet<R>,
    schedule: &TrainSchedule,
    optim: &OptimConfig,
    opt: Option<OptState<R>>,
    record_wall_time: bool,
    mut step: S,
    mut validate: V,
) -> Result<TrainOutcome<R>>
where
    R: Real,
    S: FnMut(&ParameterSet<R>, usize) -> Result<(Gradients<R>, f64)>,
    V: FnMut(&ParameterSet<R>) -> Result<f64>,
{
    schedule.validate()?;
    let started = Instant::now();
    let mut opt = opt.unwrap_or_else(|| OptState::new(&params, optim.adam));
    let mut theta = params;
    let mut average = AverageState::default();
    let mut averaging_started = None;
    let mut best = theta.clone();
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;
    let mut log = Vec::new();
    let (mut train_sum, mut train_count) = (0.0, 0usize);
    let latest = schedule.latest_averaging_step();
    if schedule.steps > 0 && latest == 0 {
        averaging_started = Some(0);
    }

    for i in 1..=schedule.steps {
        let (mut grads, loss) = step(&theta, i)?;
        clip_gradients(&mut grads, optim.max_grad_norm)?;
        adam_step(&mut theta, &grads, &mut opt, optim.learning_rate, optim.l2_penalty)?;
        train_sum += loss;
        train_count += 1;

        let at_checkpoint = i % schedule.checkpoint_interval == 0 || i == schedule.steps;
        if averaging_started.is_none() && (i >= latest || (at_checkpoint && stale >= schedule.patience)) {
            averaging_started = Some(i);
        }
        if !at_checkpoint {
            continue;
        }
        let val = if averaging_started.is_some() {
            average.update(&theta);
            validate(average.mean.as_ref().expect("active"))?
        } else {
            validate(&theta)?
        };
        if !val.is_finite() {
            return Err(Error::Numeric(format!("validation loss diverged ({val}) at step {i}")));
        }
        if val < best_val {
            best_val = val;
            best = average.mean.as_ref().unwrap_or(&theta).clone();
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(CheckpointRecord {
            step: i,
            train_nats: train_sum / train_count as f64,
            val_nats: val,
            wall_seconds: if record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 },
            averaged: averaging_started.is_some(),
        });
        train_sum = 0.0;
        train_count = 0;
    }
    let final_params = average.mean.clone().unwrap_or_else(|| theta.clone());
    Ok(TrainOutcome { best, best_val, last: theta, final_params, opt, log, averaging_started })
}

/// Data and evaluation settings for language-model training.
#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainOptions {
    pub schedule: TrainSchedule,
    pub optim: OptimConfig,
    pub eval_batch_size: usize,
    pub eval_window: usize,
    pub record_wall_time: bool,
}

/// Trains a language model by truncated BPTT over `data`, validating on `valid`.
///
/// State is carried across windows and reset to zero when a pass over the
/// shards wraps around. Fresh dropout masks are drawn for every window.
pub fn train_lm<R: Real>(
    model: &Model,
    params: ParameterSet<R>,
    data: &BatchStream,
    valid: &[u32],
    options: &LmTrainOptions,
    opt: Option<OptState<R>>,
    rng: &mut Rng,
) -> Result<TrainOutcome<R>> {
    let cfg = model.config();
    let batch = data.batch();
    let mut state = RnnState::<R>::zeros(cfg, batch);
    let mut cursor = 0usize;
    let step = |theta: &ParameterSet<R>, _i: usize| -> Result<(Gradients<R>, f64)> {
        let window = match data.window_at(cursor) {
            Some(w) => w,
            None => {
                cursor = 0;
                state = RnnState::zeros(cfg, batch);
                data.window_at(0).expect("non-empty stream")
            }
        };
        cursor += window.steps;
        let masks = DropoutMasks::sample(cfg, batch, rng);
        let mut tape = Tape::new(theta);
        let out = model.forward_window(&mut tape, &window.inputs, batch, &state, &masks)?;
        let loss = out.loss(&mut tape, &window.targets, 1.0)?;
        let grads = tape.backward(loss, R::one())?;
        state = out.final_state(&tape);
        Ok((grads, tape.value(loss).data()[0].to_f64_lossless()))
    };
    let validate =
        |theta: &ParameterSet<R>| evaluate_deterministic(model, theta, valid, options.eval_batch_size, options.eval_window, 1.0);
    optimize(params, &options.schedule, &options.optim, opt, options.record_wall_time, step, validate)
}
