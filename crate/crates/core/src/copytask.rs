//! Encoder-decoder model for the reverse-copy task.
//!
//! The encoder reads the payload followed by the end marker. The decoder
//! starts from the encoder's final `(c, h)` in every layer and is teacher
//! forced: its first input is a begin token, then the previous target.
//! With `decoder_sees_marker` it first reads the marker itself in an extra,
//! unscored step. No dropout is used.

use crate::cells::{Cell, CellKind, CellState};
use crate::data::CopyExample;
use crate::error::{Error, Result};
use crate::model::size_to_budget_with;
use crate::numerics::{Gradients, Init, ParamId, ParamRegistry, ParameterSet, Real, Rng, Tape, Tensor, Var};
use crate::training::{optimize, OptState, OptimConfig, TrainOutcome, TrainSchedule};

#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqConfig {
    /// Payload vocabulary; the marker and begin tokens come on top.
    pub vocab: usize,
    pub hidden_size: usize,
    pub depth: usize,
    pub cell: CellKind,
    pub mogrifier_rounds: i64,
    pub mogrifier_rank: i64,
    /// 0 means the hidden size.
    pub encoder_embedding_size: usize,
    /// 0 means the hidden size.
    pub decoder_embedding_size: usize,
    pub decoder_sees_marker: bool,
}

impl Seq2SeqConfig {
    fn embedding_sizes(&self) -> (usize, usize) {
        let pick = |e: usize| if e == 0 { self.hidden_size } else { e };
        (pick(self.encoder_embedding_size), pick(self.decoder_embedding_size))
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::config("vocab", "must be positive"));
        }
        if self.hidden_size == 0 {
            return Err(Error::config("hidden_size", "must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::config("depth", "must be positive"));
        }
        Ok(())
    }
}

pub struct Seq2Seq {
    config: Seq2SeqConfig,
    registry: ParamRegistry,
    encoder_embedding: ParamId,
    decoder_embedding: ParamId,
    encoder: Vec<Cell>,
    decoder: Vec<Cell>,
    output: ParamId,
    output_bias: ParamId,
}

impl Seq2Seq {
    pub fn new(config: Seq2SeqConfig) -> Result<Self> {
        config.validate()?;
        let (v, n) = (config.vocab, config.hidden_size);
        let (ee, de) = config.embedding_sizes();
        let mut reg = ParamRegistry::new();
        let stack = |reg: &mut ParamRegistry, side: &str, e: usize| -> Result<Vec<Cell>> {
            (0..config.depth)
                .map(|l| {
                    let m = if l == 0 { e } else { n };
                    Cell::declare(reg, &format!("{side}.layer{l}"), config.cell, m, n, config.mogrifier_rounds, config.mogrifier_rank)
                })
                .collect()
        };
        let encoder_embedding = reg.declare("encoder.embedding", &[v + 1, ee], Init::Uniform((1.0 / ee as f64).sqrt()));
        let encoder = stack(&mut reg, "encoder", ee)?;
        let decoder_embedding = reg.declare("decoder.embedding", &[v + 2, de], Init::Uniform((1.0 / de as f64).sqrt()));
        let decoder = stack(&mut reg, "decoder", de)?;
        let output = reg.declare("output", &[v, n], Init::Uniform((1.0 / n as f64).sqrt()));
        let output_bias = reg.declare("output_bias", &[v], Init::Zeros);
        Ok(Seq2Seq { config, registry: reg, encoder_embedding, decoder_embedding, encoder, decoder, output, output_bias })
    }

    pub fn config(&self) -> &Seq2SeqConfig {
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

    pub fn marker(&self) -> u32 {
        self.config.vocab as u32
    }

    pub fn begin(&self) -> u32 {
        self.config.vocab as u32 + 1
    }

    /// Decoder inputs for one example and the number of leading unscored steps.
    pub fn decoder_inputs(&self, target: &[u32]) -> (Vec<u32>, usize) {
        let mut inputs = Vec::with_capacity(target.len() + 1);
        let skip = usize::from(self.config.decoder_sees_marker);
        if self.config.decoder_sees_marker {
            inputs.push(self.marker());
        }
        inputs.push(self.begin());
        inputs.extend_from_slice(&target[..target.len().saturating_sub(1)]);
        (inputs, skip)
    }

    fn run<R: Real>(
        tape: &mut Tape<'_, R>,
        table: Var,
        cells: &[Cell],
        tokens: &[u32],
        batch: usize,
        states: &mut [CellState],
    ) -> Result<Vec<Var>> {
        let mut tops = Vec::with_capacity(tokens.len() / batch);
        for ids in tokens.chunks(batch) {
            let mut x = tape.gather(table, ids)?;
            for (cell, s) in cells.iter().zip(states.iter_mut()) {
                *s = cell.step(tape, x, *s)?;
                x = s.h;
            }
            tops.push(x);
        }
        Ok(tops)
    }

    /// Logits for every scored decoder step, plus the time-major targets.
    pub fn forward<R: Real>(&self, tape: &mut Tape<'_, R>, examples: &[CopyExample]) -> Result<(Vec<Var>, Vec<u32>)> {
        let batch = examples.len();
        let first = examples.first().ok_or_else(|| Error::dim("empty batch"))?;
        let (in_len, out_len) = (first.input.len(), first.target.len());
        if out_len == 0 || examples.iter().any(|e| e.input.len() != in_len || e.target.len() != out_len) {
            return Err(Error::dim("examples in a batch must share a non-zero payload length"));
        }
        let v = self.config.vocab as u32;
        if examples.iter().any(|e| e.target.iter().any(|&t| t >= v) || e.input[..in_len - 1].iter().any(|&t| t >= v)) {
            return Err(Error::Data(format!("copy tokens must be below the vocabulary size {v}")));
        }
        let time_major = |rows: Vec<Vec<u32>>| -> Vec<u32> {
            let len = rows[0].len();
            (0..len).flat_map(|t| rows.iter().map(move |r| r[t])).collect()
        };
        let enc_in = time_major(examples.iter().map(|e| e.input.clone()).collect());
        let mut skip = 0;
        let dec_in = time_major(
            examples
                .iter()
                .map(|e| {
                    let (inputs, s) = self.decoder_inputs(&e.target);
                    skip = s;
                    inputs
                })
                .collect(),
        );
        let targets = time_major(examples.iter().map(|e| e.target.clone()).collect());

        let n = self.config.hidden_size;
        let zero = tape.constant(Tensor::zeros(&[batch, n]));
        let mut states = vec![CellState { c: zero, h: zero }; self.config.depth];
        let enc_table = tape.param(self.encoder_embedding);
        Self::run(tape, enc_table, &self.encoder, &enc_in, batch, &mut states)?;
        let dec_table = tape.param(self.decoder_embedding);
        let tops = Self::run(tape, dec_table, &self.decoder, &dec_in, batch, &mut states)?;
        let w = tape.param(self.output);
        let b = tape.param(self.output_bias);
        let logits = tops[skip..].iter().map(|&h| tape.affine(w, h, Some(b))).collect::<Result<Vec<_>>>()?;
        Ok((logits, targets))
    }

    /// Mean cross-entropy per target token, as a tape scalar.
    pub fn loss<R: Real>(&self, tape: &mut Tape<'_, R>, examples: &[CopyExample]) -> Result<Var> {
        let (logits, targets) = self.forward(tape, examples)?;
        let batch = examples.len();
        let steps = logits.len();
        let mut total: Option<Var> = None;
        for (t, &z) in logits.iter().enumerate() {
            let l = tape.cross_entropy(z, &targets[t * batch..(t + 1) * batch], 1.0)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        Ok(tape.scale(total.expect("at least one step"), R::from_f64_lossy(1.0 / steps as f64)))
    }

    /// Mean nats per target token over `examples`, in batches of `batch`.
    pub fn evaluate<R: Real>(&self, params: &ParameterSet<R>, examples: &[CopyExample], batch: usize) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Data("no examples to evaluate".to_string()));
        }
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in examples.chunks(batch.max(1)) {
            let mut tape = Tape::new(params);
            let loss = self.loss(&mut tape, chunk)?;
            sum += tape.value(loss).data()[0].to_f64_lossless() * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(sum / count as f64)
    }
}

/// Parameter count of a configuration without building it.
pub fn copy_parameter_count(config: &Seq2SeqConfig) -> Result<usize> {
    Ok(Seq2Seq::new(config.clone())?.parameter_count())
}

/// `config` with the largest hidden size whose parameter count fits `budget`.
pub fn size_copy_model(budget: usize, config: &Seq2SeqConfig) -> Result<Seq2SeqConfig> {
    let n = size_to_budget_with(budget, |n| copy_parameter_count(&Seq2SeqConfig { hidden_size: n, ..config.clone() }))?;
    Ok(Seq2SeqConfig { hidden_size: n, ..config.clone() })
}

/// Minibatch training with Adam. Each pass visits the training set in a
/// fresh order drawn from `rng`; validation reports mean nats per token.
#[allow(clippy::too_many_arguments)]
pub fn train_copy<R: Real>(
    model: &Seq2Seq,
    params: ParameterSet<R>,
    train: &[CopyExample],
    valid: &[CopyExample],
    batch: usize,
    schedule: &TrainSchedule,
    optim: &OptimConfig,
    opt: Option<OptState<R>>,
    record_wall_time: bool,
    rng: &mut Rng,
) -> Result<TrainOutcome<R>> {
    if batch == 0 || train.len() < batch {
        return Err(Error::config("batch_size", format!("needs between 1 and {} (the training set size)", train.len())));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut chunk = Vec::with_capacity(batch);
    let step = |theta: &ParameterSet<R>, _i: usize| -> Result<(Gradients<R>, f64)> {
        if cursor + batch > order.len() {
            rng.shuffle(&mut order);
            cursor = 0;
        }
        chunk.clear();
        chunk.extend(order[cursor..cursor + batch].iter().map(|&k| train[k].clone()));
        cursor += batch;
        let mut tape = Tape::new(theta);
        let loss = model.loss(&mut tape, &chunk)?;
        let grads = tape.backward(loss, R::one())?;
        Ok((grads, tape.value(loss).data()[0].to_f64_lossless()))
    };
    let validate = |theta: &ParameterSet<R>| model.evaluate(theta, valid, batch);
    optimize(params, schedule, optim, opt, record_wall_time, step, validate)
}
