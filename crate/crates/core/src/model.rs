//! Stacked recurrent language model.
//!
//! Tokens are embedded, passed through `depth` cells, optionally projected
//! down to the embedding width, and scored against the (tied or separate)
//! output embedding plus a bias. Dropout is variational: masks are drawn once
//! per window and reused at every step of it.

use crate::cells::{Cell, CellKind, CellState};
use crate::error::{Error, Result};
use crate::numerics::{lit, token_nll, Init, ParamId, ParamRegistry, ParameterSet, Real, Rng, Tape, Tensor, Var};

/// Architecture and dropout settings of a language model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub input_embedding_ratio: f64,
    pub tie_embeddings: bool,
    pub cell: CellKind,
    pub mogrifier_rounds: i64,
    pub mogrifier_rank: i64,
    pub input_dropout: f64,
    pub inter_layer_dropout: f64,
    pub state_dropout: f64,
    pub output_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 1,
            hidden_size: 32,
            vocab_size: 2,
            input_embedding_ratio: 1.0,
            tie_embeddings: true,
            cell: CellKind::Lstm,
            mogrifier_rounds: 0,
            mogrifier_rank: 0,
            input_dropout: 0.0,
            inter_layer_dropout: 0.0,
            state_dropout: 0.0,
            output_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Width of the embeddings; equals the hidden size unless the ratio is below one.
    pub fn embedding_size(&self) -> usize {
        if self.input_embedding_ratio >= 1.0 {
            self.hidden_size
        } else {
            ((self.input_embedding_ratio * self.hidden_size as f64).round() as usize).max(1)
        }
    }

    pub fn has_projection(&self) -> bool {
        self.input_embedding_ratio < 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth", "must be at least 1"));
        }
        if self.hidden_size == 0 {
            return Err(Error::config("hidden_size", "must be at least 1"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("vocab_size", "must be at least 1"));
        }
        if !(self.input_embedding_ratio >= 0.0) {
            return Err(Error::config("input_embedding_ratio", "must be non-negative"));
        }
        if self.mogrifier_rounds < 0 {
            return Err(Error::config("mogrifier_rounds", "must be non-negative"));
        }
        for (name, rate) in self.dropout_rates() {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {rate}")));
            }
        }
        Ok(())
    }

    pub fn dropout_rates(&self) -> [(&'static str, f64); 4] {
        [
            ("input_dropout", self.input_dropout),
            ("inter_layer_dropout", self.inter_layer_dropout),
            ("state_dropout", self.state_dropout),
            ("output_dropout", self.output_dropout),
        ]
    }

    /// The same model with every dropout rate multiplied by `factor`.
    pub fn with_dropout_scaled(&self, factor: f64) -> ModelConfig {
        ModelConfig {
            input_dropout: (self.input_dropout * factor).min(0.999),
            inter_layer_dropout: (self.inter_layer_dropout * factor).min(0.999),
            state_dropout: (self.state_dropout * factor).min(0.999),
            output_dropout: (self.output_dropout * factor).min(0.999),
            ..self.clone()
        }
    }
}

/// Parameter layout of a language model. Values live in a separate [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    registry: ParamRegistry,
    pub embedding: ParamId,
    /// Present when embeddings are untied.
    pub output_embedding: Option<ParamId>,
    /// `e×n` map from the last cell output into embedding space.
    pub projection: Option<ParamId>,
    pub output_bias: ParamId,
    pub layers: Vec<Cell>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let (n, v, e) = (config.hidden_size, config.vocab_size, config.embedding_size());
        let mut reg = ParamRegistry::new();
        let embedding = reg.declare("embedding", &[v, e], Init::Uniform((1.0 / e as f64).sqrt()));
        let mut layers = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let m = if l == 0 { e } else { n };
            let prefix = format!("layer{l}");
            layers.push(Cell::declare(
                &mut reg,
                &prefix,
                config.cell,
                m,
                n,
                config.mogrifier_rounds,
                config.mogrifier_rank,
            )?);
        }
        let projection = config
            .has_projection()
            .then(|| reg.declare("projection", &[e, n], Init::Uniform((1.0 / n as f64).sqrt())));
        let output_embedding = (!config.tie_embeddings)
            .then(|| reg.declare("output_embedding", &[v, e], Init::Uniform((1.0 / e as f64).sqrt())));
        let output_bias = reg.declare("output_bias", &[v], Init::Zeros);
        Ok(Model { config, registry: reg, embedding, output_embedding, projection, output_bias, layers })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn parameter_count(&self) -> usize {
        self.registry.count()
    }

    pub fn initialize<R: Real>(&self, rng: &mut Rng) -> ParameterSet<R> {
        self.registry.initialize(rng)
    }

    /// Parameter id of the matrix producing logits.
    pub fn output_weight(&self) -> ParamId {
        self.output_embedding.unwrap_or(self.embedding)
    }

    /// Runs one window. `tokens` is time-major, `T×batch`.
    ///
    /// Per step: embed, input dropout, the cells (state dropout on each
    /// recurrent `h`, inter-layer dropout between cells), output dropout,
    /// optional projection, and the output map.
    pub fn forward_window<R: Real>(
        &self,
        tape: &mut Tape<'_, R>,
        tokens: &[u32],
        batch: usize,
        state: &RnnState<R>,
        masks: &DropoutMasks<R>,
    ) -> Result<WindowOutput> {
        if batch == 0 || tokens.is_empty() {
            return Err(Error::dim("a window needs at least one step and one row"));
        }
        if !tokens.len().is_multiple_of(batch) {
            return Err(Error::dim(format!("{} tokens do not fill rows of {batch}", tokens.len())));
        }
        self.check_state(state, batch)?;
        masks.check(self, batch)?;
        let steps = tokens.len() / batch;
        let mut states: Vec<CellState> = state
            .layers
            .iter()
            .map(|(c, h)| CellState { c: tape.constant(c.clone()), h: tape.constant(h.clone()) })
            .collect();
        let table = tape.param(self.embedding);
        let out_w = tape.param(self.output_weight());
        let out_b = tape.param(self.output_bias);
        let proj = self.projection.map(|p| tape.param(p));
        let mask = |tape: &mut Tape<'_, R>, m: &Option<Tensor<R>>| m.as_ref().map(|t| tape.constant(t.clone()));
        let input_mask = mask(tape, &masks.input);
        let inter_masks: Vec<Option<Var>> = masks.inter_layer.iter().map(|m| mask(tape, m)).collect();
        let state_masks: Vec<Option<Var>> = masks.state.iter().map(|m| mask(tape, m)).collect();
        let output_mask = mask(tape, &masks.output);

        let mut logits = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids = &tokens[t * batch..(t + 1) * batch];
            let mut x = tape.gather(table, ids)?;
            if let Some(m) = input_mask {
                x = tape.mul(x, m)?;
            }
            for (l, cell) in self.layers.iter().enumerate() {
                if l > 0 {
                    if let Some(m) = inter_masks[l - 1] {
                        x = tape.mul(x, m)?;
                    }
                }
                let prev = states[l];
                let h_in = match state_masks[l] {
                    Some(m) => tape.mul(prev.h, m)?,
                    None => prev.h,
                };
                let next = cell.step(tape, x, CellState { c: prev.c, h: h_in })?;
                states[l] = next;
                x = next.h;
            }
            if let Some(m) = output_mask {
                x = tape.mul(x, m)?;
            }
            if let Some(p) = proj {
                x = tape.affine(p, x, None)?;
            }
            logits.push(tape.affine(out_w, x, Some(out_b))?);
        }
        Ok(WindowOutput { logits, states })
    }

    fn check_state<R: Real>(&self, state: &RnnState<R>, batch: usize) -> Result<()> {
        if state.layers.len() != self.config.depth {
            return Err(Error::dim(format!(
                "state has {} layers, model has {}",
                state.layers.len(),
                self.config.depth
            )));
        }
        let n = self.config.hidden_size;
        for (c, h) in &state.layers {
            if c.shape() != [batch, n] || h.shape() != [batch, n] {
                return Err(Error::dim(format!(
                    "state {:?} does not match batch {batch} and hidden size {n}",
                    c.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tape handles produced by [`Model::forward_window`].
#[derive(Clone, Debug)]
pub struct WindowOutput {
    /// One `batch×V` logit matrix per step.
    pub logits: Vec<Var>,
    pub states: Vec<CellState>,
}

impl WindowOutput {
    /// Values of the final states, for carrying into the next window.
    pub fn final_state<R: Real>(&self, tape: &Tape<'_, R>) -> RnnState<R> {
        RnnState {
            layers: self.states.iter().map(|s| (tape.value(s.c).clone(), tape.value(s.h).clone())).collect(),
        }
    }

    /// Mean cross-entropy over all steps and rows, as a tape scalar.
    ///
    /// `targets` is time-major like the inputs.
    pub fn loss<R: Real>(&self, tape: &mut Tape<'_, R>, targets: &[u32], temperature: f64) -> Result<Var> {
        let steps = self.logits.len();
        if !targets.len().is_multiple_of(steps) {
            return Err(Error::dim(format!("{} targets for {steps} steps", targets.len())));
        }
        let batch = targets.len() / steps;
        let mut total: Option<Var> = None;
        for (t, &z) in self.logits.iter().enumerate() {
            let ce = tape.cross_entropy(z, &targets[t * batch..(t + 1) * batch], temperature)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
        }
        let total = total.expect("at least one step");
        Ok(tape.scale(total, lit(1.0 / steps as f64)))
    }

    /// Per-token negative log-likelihoods in time-major order, computed in `f64`.
    pub fn token_losses<R: Real>(&self, tape: &Tape<'_, R>, targets: &[u32], temperature: f64) -> Result<Vec<f64>> {
        let steps = self.logits.len();
        if !targets.len().is_multiple_of(steps) {
            return Err(Error::dim(format!("{} targets for {steps} steps", targets.len())));
        }
        let batch = targets.len() / steps;
        let mut out = Vec::with_capacity(targets.len());
        for (t, &z) in self.logits.iter().enumerate() {
            out.extend(token_nll(tape.value(z), &targets[t * batch..(t + 1) * batch], temperature)?);
        }
        Ok(out)
    }
}

/// Mean cross-entropy of `logits` (rows) against `targets`.
pub fn loss<R: Real>(logits: &Tensor<R>, targets: &[u32], temperature: f64) -> Result<f64> {
    let nll = token_nll(logits, targets, temperature)?;
    if nll.is_empty() {
        return Err(Error::dim("no targets"));
    }
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Per-layer `(c, h)` values, each `batch×n`, carried between windows.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnState<R> {
    pub layers: Vec<(Tensor<R>, Tensor<R>)>,
}

impl<R: Real> RnnState<R> {
    pub fn zeros(config: &ModelConfig, batch: usize) -> Self {
        let z = Tensor::zeros(&[batch, config.hidden_size]);
        RnnState { layers: vec![(z.clone(), z); config.depth] }
    }
}

/// Inverted-dropout masks for one window. `None` means the site is off.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks<R> {
    /// `batch×e`, on embedded tokens.
    pub input: Option<Tensor<R>>,
    /// `batch×n` per layer boundary (`depth − 1` entries).
    pub inter_layer: Vec<Option<Tensor<R>>>,
    /// `batch×n` per layer, on the recurrent `h`.
    pub state: Vec<Option<Tensor<R>>>,
    /// `batch×n`, on the last cell output.
    pub output: Option<Tensor<R>>,
}

fn bernoulli_mask<R: Real>(rng: &mut Rng, rows: usize, cols: usize, rate: f64) -> Option<Tensor<R>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = R::from_f64_lossy(1.0 / (1.0 - rate));
    let data = (0..rows * cols).map(|_| if rng.bernoulli(rate) { R::zero() } else { keep }).collect();
    Some(Tensor::matrix(rows, cols, data).expect("mask shape"))
}

impl<R: Real> DropoutMasks<R> {
    /// Every site off.
    pub fn none(config: &ModelConfig) -> Self {
        DropoutMasks {
            input: None,
            inter_layer: vec![None; config.depth - 1],
            state: vec![None; config.depth],
            output: None,
        }
    }

    /// Fresh masks at the configured rates. Each entry is `0` with
    /// probability `rate` and `1/(1−rate)` otherwise.
    pub fn sample(config: &ModelConfig, batch: usize, rng: &mut Rng) -> Self {
        let (n, e) = (config.hidden_size, config.embedding_size());
        DropoutMasks {
            input: bernoulli_mask(rng, batch, e, config.input_dropout),
            inter_layer: (1..config.depth).map(|_| bernoulli_mask(rng, batch, n, config.inter_layer_dropout)).collect(),
            state: (0..config.depth).map(|_| bernoulli_mask(rng, batch, n, config.state_dropout)).collect(),
            output: bernoulli_mask(rng, batch, n, config.output_dropout),
        }
    }

    fn check(&self, model: &Model, batch: usize) -> Result<()> {
        let cfg = model.config();
        let (n, e) = (cfg.hidden_size, cfg.embedding_size());
        if self.inter_layer.len() + 1 != cfg.depth || self.state.len() != cfg.depth {
            return Err(Error::dim(format!("dropout masks do not match depth {}", cfg.depth)));
        }
        let expect = |m: &Option<Tensor<R>>, cols: usize| match m {
            Some(t) if t.shape() != [batch, cols] => {
                Err(Error::dim(format!("mask {:?} where {batch}×{cols} is needed", t.shape())))
            }
            _ => Ok(()),
        };
        expect(&self.input, e)?;
        expect(&self.output, n)?;
        for m in self.inter_layer.iter().chain(&self.state) {
            expect(m, n)?;
        }
        Ok(())
    }
}

/// Perplexity and bits per character of a cross-entropy in nats.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub nats: f64,
    pub perplexity: f64,
    pub bits_per_character: f64,
}

pub fn metrics(nats: f64) -> Result<Metrics> {
    if !(nats >= 0.0) {
        return Err(Error::Numeric(format!("cross-entropy must be non-negative, got {nats}")));
    }
    Ok(Metrics { nats, perplexity: nats.exp(), bits_per_character: nats / std::f64::consts::LN_2 })
}

/// Number of scalars in a model built from `config`.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    Ok(Model::new(config.clone())?.parameter_count())
}

/// Largest hidden size whose model has at most `budget` parameters.
pub fn size_to_budget(budget: usize, config: &ModelConfig) -> Result<usize> {
    size_to_budget_with(budget, |n| parameter_count(&ModelConfig { hidden_size: n, ..config.clone() }))
}

/// Largest `n ≥ 1` with `count(n) ≤ budget`, for a `count` increasing in `n`.
pub fn size_to_budget_with(budget: usize, count: impl Fn(usize) -> Result<usize>) -> Result<usize> {
    if budget == 0 {
        return Err(Error::config("params", "budget must be positive"));
    }
    let smallest = count(1)?;
    if smallest > budget {
        return Err(Error::config("params", format!("budget {budget} is below the smallest model ({smallest})")));
    }
    let (mut lo, mut hi) = (1usize, 2usize);
    while count(hi)? <= budget {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if count(mid)? <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
