//! Deterministic and Monte-Carlo dropout evaluation, softmax temperature
//! selection, and dynamic evaluation.
//!
//! Every mode scores windows through [`score_window`], so static and dynamic
//! evaluation agree exactly when the dynamic learning rate is zero.

use std::fmt;
use std::str::FromStr;

use crate::data::{batchify, BatchStream, Window};
use crate::error::{Error, Result};
use crate::model::{DropoutMasks, Model, RnnState};
use crate::numerics::{Gradients, ParameterSet, Real, Rng, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    Deterministic,
    Mc,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Deterministic => "deterministic",
            EvalMode::Mc => "mc",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(EvalMode::Deterministic),
            "mc" => Ok(EvalMode::Mc),
            other => Err(Error::config("eval_mode", format!("expected deterministic or mc, got `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub mc_samples: usize,
    pub temperature: f64,
    /// Factor applied to every dropout rate when sampling MC masks.
    pub mc_rate_scale: f64,
    pub batch_size: usize,
    pub window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::Deterministic,
            mc_samples: 200,
            temperature: 1.0,
            mc_rate_scale: 1.0,
            batch_size: 1,
            window: 70,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mc_samples < 1 {
            return Err(Error::config("mc_samples", "must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", format!("must be positive, got {}", self.temperature)));
        }
        if !(self.mc_rate_scale >= 0.0) {
            return Err(Error::config("mc_rate_scale", "must be non-negative"));
        }
        Ok(())
    }
}

/// Runs one window and returns per-token losses for each temperature
/// (time-major) together with the carried-over state.
pub fn score_window<R: Real>(
    model: &Model,
    params: &ParameterSet<R>,
    window: &Window,
    state: &RnnState<R>,
    masks: &DropoutMasks<R>,
    temperatures: &[f64],
) -> Result<(Vec<Vec<f64>>, RnnState<R>)> {
    let mut tape = Tape::new(params);
    let out = model.forward_window(&mut tape, &window.inputs, window.batch, state, masks)?;
    let losses = temperatures
        .iter()
        .map(|&t| out.token_losses(&tape, &window.targets, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((losses, out.final_state(&tape)))
}

/// Ordered sum of token losses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTotal {
    pub sum: f64,
    pub tokens: usize,
}

impl LossTotal {
    pub fn add(&mut self, losses: &[f64]) {
        for &l in losses {
            self.sum += l;
        }
        self.tokens += losses.len();
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.tokens as f64
    }
}

fn eval_stream(stream: &[u32], batch: usize, window: usize) -> Result<BatchStream> {
    if stream.len() < 2 {
        return Err(Error::Data("evaluation needs at least two tokens".to_string()));
    }
    let batch = batch.clamp(1, (stream.len() - 1).max(1));
    let window = window.min(stream.len() / batch - 1).max(1);
    batchify(stream, batch, window)
}

/// Dropout-off cross-entropy of `stream` in nats per token.
///
/// The stream is laid out as `batch` shards (clamped to fit) read in
/// windows of `window` steps with state carried across windows.
pub fn evaluate_deterministic<R: Real>(
    model: &Model,
    params: &ParameterSet<R>,
    stream: &[u32],
    batch: usize,
    window: usize,
    temperature: f64,
) -> Result<f64> {
    Ok(evaluate_temperatures(model, params, stream, batch, window, &[temperature])?[0])
}

/// As [`evaluate_deterministic`] for several temperatures in one pass.
pub fn evaluate_temperatures<R: Real>(
    model: &Model,
    params: &ParameterSet<R>,
    stream: &[u32],
    batch: usize,
    window: usize,
    temperatures: &[f64],
) -> Result<Vec<f64>> {
    let data = eval_stream(stream, batch, window)?;
    let masks = DropoutMasks::none(model.config());
    let mut state = RnnState::zeros(model.config(), data.batch());
    let mut totals = vec![LossTotal::default(); temperatures.len()];
    for w in data.windows() {
        let (losses, next) = score_window(model, params, &w, &state, &masks, temperatures)?;
        for (t, l) in totals.iter_mut().zip(&losses) {
            t.add(l);
        }
        state = next;
    }
    Ok(totals.iter().map(LossTotal::mean).collect())
}

/// Monte-Carlo dropout evaluation result.
#[derive(Clone, Debug, PartialEq)]
pub struct McReport {
    /// `−log` of the mask-averaged probability, per token.
    pub nats: f64,
    /// Mean loss of each individual mask chain.
    pub sample_nats: Vec<f64>,
}

/// Averages target probabilities over `samples` independent mask chains.
///
/// Chain `s` draws fresh masks per window from substream `mc{s}` of `rng`,
/// at the model's dropout rates times `rate_scale`, and carries its own state.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_mc<R: Real>(
    model: &Model,
    params: &ParameterSet<R>,
    stream: &[u32],
    batch: usize,
    window: usize,
    temperature: f64,
    samples: usize,
    rate_scale: f64,
    rng: &Rng,
) -> Result<McReport> {
    if samples < 1 {
        return Err(Error::config("mc_samples", "must be at least 1"));
    }
    let data = eval_stream(stream, batch, window)?;
    let rates = model.config().with_dropout_scaled(rate_scale);
    let tokens = data.target_count();
    // Running log-sum-exp of per-sample log-probabilities for every token.
    let mut lse = vec![f64::NEG_INFINITY; tokens];
    let mut sample_nats = Vec::with_capacity(samples);
    for s in 0..samples {
        let mut chain = rng.substream(&format!("mc{s}"));
        let mut state = RnnState::zeros(model.config(), data.batch());
        let mut total = LossTotal::default();
        let mut k = 0;
        for w in data.windows() {
            let masks = DropoutMasks::sample(&rates, data.batch(), &mut chain);
            let (losses, next) = score_window(model, params, &w, &state, &masks, &[temperature])?;
            for &l in &losses[0] {
                let lp = -l;
                let m = lse[k].max(lp);
                lse[k] = if m == f64::NEG_INFINITY { m } else { m + ((lse[k] - m).exp() + (lp - m).exp()).ln() };
                k += 1;
            }
            total.add(&losses[0]);
            state = next;
        }
        sample_nats.push(total.mean());
    }
    let log_s = (samples as f64).ln();
    let nats = lse.iter().map(|&v| log_s - v).sum::<f64>() / tokens as f64;
    Ok(McReport { nats, sample_nats })
}

/// Evaluates per [`EvalConfig`].
pub fn evaluate<R: Real>(
    model: &Model,
    params: &ParameterSet<R>,
    stream: &[u32],
    config: &EvalConfig,
    rng: &Rng,
) -> Result<f64> {
    config.validate()?;
    match config.mode {
        EvalMode::Deterministic => {
            evaluate_deterministic(model, params, stream, config.batch_size, config.window, config.temperature)
        }
        EvalMode::Mc => Ok(evaluate_mc(
            model,
            params,
            stream,
            config.batch_size,
            config.window,
            config.temperature,
            config.mc_samples,
            config.mc_rate_scale,
            rng,
        )?
        .nats),
    }
}

/// Index of the lowest loss; values within `1e-12` relative are ties, broken
/// toward the temperature closest to 1.
pub fn best_temperature(grid: &[f64], losses: &[f64]) -> Result<(f64, f64)> {
    if grid.is_empty() || grid.len() != losses.len() {
        return Err(Error::config("temperature_grid", "must be non-empty with one loss per entry"));
    }
    if grid.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::config("temperature_grid", "temperatures must be positive"));
    }
    let min = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = 1e-12 * min.abs().max(1.0);
    let (t, l) = grid
        .iter()
        .zip(losses)
        .filter(|(_, &l)| l - min <= tol)
        .min_by(|a, b| (a.0 - 1.0).abs().total_cmp(&(b.0 - 1.0).abs()))
        .expect("non-empty");
    Ok((*t, *l))
}

/// Chooses the grid temperature with the lowest deterministic validation loss.
pub fn tune_temperature<R: Real>(
    model: &Model,
    params: &ParameterSet<R>,
    valid: &[u32],
    batch: usize,
    window: usize,
    grid: &[f64],
) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::config("temperature_grid", "must be non-empty"));
    }
    let losses = evaluate_temperatures(model, params, valid, batch, window, grid)?;
    best_temperature(grid, &losses)
}

/// Dynamic evaluation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynevalConfig {
    pub max_time_steps: usize,
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub epsilon: f64,
    pub ms_batch_size: usize,
    /// Rows of the test stream processed in parallel.
    pub batch_size: usize,
    pub temperature: f64,
}

impl DynevalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_time_steps == 0 {
            return Err(Error::config("max_time_steps", "must be positive"));
        }
        for (name, v) in [
            ("dyneval_learning_rate", self.learning_rate),
            ("dyneval_decay_rate", self.decay_rate),
            ("dyneval_epsilon", self.epsilon),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(name, format!("must be non-negative, got {v}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        Ok(())
    }
}

/// Per-parameter mean of squared gradients, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct MsGradients {
    pub values: Vec<Tensor<f64>>,
}

/// Accumulates squared gradients window by window.
#[derive(Clone, Debug)]
pub struct MsAccumulator {
    sums: Vec<Tensor<f64>>,
    windows: usize,
}

impl MsAccumulator {
    pub fn new<R: Real>(params: &ParameterSet<R>) -> Self {
        MsAccumulator { sums: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(), windows: 0 }
    }

    pub fn add<R: Real>(&mut self, grads: &Gradients<R>) {
        for (id, g) in grads.iter() {
            for (s, &v) in self.sums[id.0].data_mut().iter_mut().zip(g.data()) {
                let v = v.to_f64_lossless();
                *s += v * v;
            }
        }
        self.windows += 1;
    }

    pub fn finish(self) -> Result<MsGradients> {
        if self.windows == 0 {
            return Err(Error::Data("no windows to estimate mean squared gradients from".to_string()));
        }
        let inv = 1.0 / self.windows as f64;
        Ok(MsGradients { values: self.sums.into_iter().map(|t| t.map(|v| v * inv)).collect() })
    }
}

/// Mean squared gradient of the dropout-off training loss (no clipping, no
/// L2) over the windows of `train` laid out in `ms_batch_size` rows. At most
/// `max_windows` windows are used when it is non-zero.
pub fn estimate_ms_gradients<R: Real>(
    model: &Model,
    params: &ParameterSet<R>,
    train: &[u32],
    config: &DynevalConfig,
    max_windows: usize,
) -> Result<MsGradients> {
    config.validate()?;
    let data = eval_stream(train, config.ms_batch_size, config.max_time_steps)?;
    let masks = DropoutMasks::none(model.config());
    let mut state = RnnState::zeros(model.config(), data.batch());
    let mut acc = MsAccumulator::new(params);
    for (i, w) in data.windows().enumerate() {
        if max_windows > 0 && i >= max_windows {
            break;
        }
        let mut tape = Tape::new(params);
        let out = model.forward_window(&mut tape, &w.inputs, w.batch, &state, &masks)?;
        let loss = out.loss(&mut tape, &w.targets, 1.0)?;
        acc.add(&tape.backward(loss, R::one())?);
        state = out.final_state(&tape);
    }
    acc.finish()
}

/// `θ ← θ − lr·g/(√MS + ε) + decay·(θ0 − θ)`, elementwise.
pub fn dyneval_update<R: Real>(
    theta: &mut ParameterSet<R>,
    theta0: &ParameterSet<R>,
    grads: &Gradients<R>,
    ms: &MsGradients,
    config: &DynevalConfig,
) -> Result<()> {
    let (lr, eps, decay) = (config.learning_rate, config.epsilon, config.decay_rate);
    let ids: Vec<_> = theta.ids().collect();
    for id in ids {
        let name = theta.name(id).to_string();
        let base = theta0.get(id);
        let msv = &ms.values[id.0];
        let g = grads.get(id);
        let t = theta.get_mut(id);
        for k in 0..t.len() {
            let cur = t.data()[k].to_f64_lossless();
            let gk = g.map_or(0.0, |g| g.data()[k].to_f64_lossless());
            let step = if gk == 0.0 { 0.0 } else { lr * gk / (msv.data()[k].sqrt() + eps) };
            // Same as cur − step + decay·(base − cur), exact at decay = 1.
            let next = (1.0 - decay) * cur + decay * base.data()[k].to_f64_lossless() - step;
            if !next.is_finite() {
                return Err(Error::Numeric(format!("dynamic evaluation diverged in `{name}`")));
            }
            t.data_mut()[k] = R::from_f64_lossy(next);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynevalReport {
    /// Mean pre-update loss per token.
    pub nats: f64,
    /// Mean pre-update loss of each segment, in order.
    pub segment_nats: Vec<f64>,
    pub tokens: usize,
}

/// Scores each segment of `test` with the current weights, then adapts on it.
///
/// The weights start from `theta0`; state is carried across segments.
pub fn dynamic_eval<R: Real>(
    model: &Model,
    theta0: &ParameterSet<R>,
    ms: &MsGradients,
    test: &[u32],
    config: &DynevalConfig,
) -> Result<DynevalReport> {
    config.validate()?;
    if ms.values.len() != theta0.len() {
        return Err(Error::dim("mean squared gradients do not match the parameters"));
    }
    let data = eval_stream(test, config.batch_size, config.max_time_steps)?;
    let masks = DropoutMasks::none(model.config());
    let mut theta = theta0.clone();
    let mut state = RnnState::zeros(model.config(), data.batch());
    let mut total = LossTotal::default();
    let mut segment_nats = Vec::with_capacity(data.window_count());
    for w in data.windows() {
        let (grads, losses, next) = {
            let mut tape = Tape::new(&theta);
            let out = model.forward_window(&mut tape, &w.inputs, w.batch, &state, &masks)?;
            let losses = out.token_losses(&tape, &w.targets, config.temperature)?;
            let loss = out.loss(&mut tape, &w.targets, config.temperature)?;
            (tape.backward(loss, R::one())?, losses, out.final_state(&tape))
        };
        total.add(&losses);
        segment_nats.push(losses.iter().sum::<f64>() / losses.len() as f64);
        state = next;
        dyneval_update(&mut theta, theta0, &grads, ms, config)?;
    }
    Ok(DynevalReport { nats: total.mean(), segment_nats, tokens: total.tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_ties_go_to_one() {
        assert_eq!(best_temperature(&[0.8, 1.0, 1.2], &[2.0, 2.0, 2.0]).unwrap().0, 1.0);
        assert_eq!(best_temperature(&[1.0], &[3.0]).unwrap().0, 1.0);
        assert_eq!(best_temperature(&[0.5, 0.9, 1.3], &[2.0, 1.0, 1.0]).unwrap().0, 0.9);
        assert_eq!(best_temperature(&[0.8, 1.0, 1.2], &[2.0, 2.0, 1.5]).unwrap().0, 1.2);
        assert!(best_temperature(&[], &[]).is_err());
    }

    #[test]
    fn ms_examples() {
        let mut p = ParameterSet::<f64>::new();
        let a = p.push("a", Tensor::vector(vec![0.0]).unwrap()).unwrap();
        p.push("b", Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let mut acc = MsAccumulator::new(&p);
        for g in [1.0, 3.0] {
            let mut grads = Gradients::empty(2);
            grads.set(a, Tensor::vector(vec![g]).unwrap());
            acc.add(&grads);
        }
        let ms = acc.finish().unwrap();
        assert_eq!(ms.values[0].data(), &[5.0]);
        assert_eq!(ms.values[1].data(), &[0.0]);
    }

    #[test]
    fn decay_one_snaps_back() {
        let mut p = ParameterSet::<f64>::new();
        p.push("a", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
        let theta0 = p.clone();
        p.tensors_mut()[0].data_mut()[0] = 5.0;
        let ms = MsGradients { values: vec![Tensor::zeros(&[2])] };
        let cfg = DynevalConfig {
            max_time_steps: 1,
            learning_rate: 0.0,
            decay_rate: 1.0,
            epsilon: 1e-8,
            ms_batch_size: 1,
            batch_size: 1,
            temperature: 1.0,
        };
        dyneval_update(&mut p, &theta0, &Gradients::empty(1), &ms, &cfg).unwrap();
        assert!(p.bit_identical(&theta0));
    }
}
