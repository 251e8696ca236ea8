//! The full run configuration.
//!
//! Every field has a name (also its command-line flag and its key in
//! `key = value` config files), a default and a one-line description. Reals
//! are written with Rust's shortest round-trip formatting, so a rendered
//! config parses back to identical bits.

use std::str::FromStr;

use crate::cells::CellKind;
use crate::data::Level;
use crate::error::{Error, Result};
use crate::evaluation::{DynevalConfig, EvalConfig, EvalMode};
use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::training::{AdamConfig, OptimConfig, TrainSchedule};

/// Conversion between a field value and its text form.
pub trait FieldValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! via_from_str {
    ($($t:ty),*) => {$(
        impl FieldValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                <$t as FromStr>::from_str(s.trim()).map_err(|e| e.to_string())
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_from_str!(usize, u64, i64, bool, CellKind, Level, EvalMode, Precision);

impl FieldValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.trim().parse::<f64>().map_err(|e| e.to_string())
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl FieldValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.trim().to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

/// Comma-separated list of reals.
impl FieldValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').filter(|p| !p.trim().is_empty()).map(f64::parse_value).collect()
    }
    fn render(&self) -> String {
        self.iter().map(FieldValue::render).collect::<Vec<_>>().join(",")
    }
}

/// Name, group and description of one field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FieldInfo {
    pub name: &'static str,
    pub group: &'static str,
    pub help: &'static str,
}

macro_rules! run_config {
    ($( $group:literal { $( $name:ident : $ty:ty = $default:expr, $help:literal; )* } )*) => {
        /// Complete, flat record of a run's settings.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $($( pub $name: $ty, )*)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($( $name: $default, )*)* }
            }
        }

        impl RunConfig {
            pub const FIELDS: &'static [FieldInfo] = &[
                $($( FieldInfo { name: stringify!($name), group: $group, help: $help }, )*)*
            ];

            /// Text form of field `name`.
            pub fn get(&self, name: &str) -> Option<String> {
                match name {
                    $($( stringify!($name) => Some(FieldValue::render(&self.$name)), )*)*
                    _ => None,
                }
            }

            /// Parses `value` into field `name`.
            pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
                match name {
                    $($( stringify!($name) => {
                        self.$name = <$ty as FieldValue>::parse_value(value)
                            .map_err(|e| Error::config(name, format!("cannot parse `{}`: {}", value.trim(), e)))?;
                        Ok(())
                    } )*)*
                    _ => Err(Error::Usage(format!(
                        "unknown setting `{name}`; valid settings: {}",
                        Self::FIELDS.iter().map(|f| f.name).collect::<Vec<_>>().join(", ")
                    ))),
                }
            }
        }
    };
}

run_config! {
    "model" {
        cell: CellKind = CellKind::Mogrifier, "cell kind: lstm, mogrifier, mogrifier_no_zigzag or mlstm";
        depth: usize = 1, "number of stacked recurrent layers";
        hidden_size: usize = 256, "hidden units per layer (ignored when `params` is set)";
        params: usize = 0, "parameter budget; when positive the hidden size is the largest that fits";
        input_embedding_ratio: f64 = 1.0, "embedding size as a fraction of the hidden size; >= 1 means equal";
        tie_embeddings: bool = true, "share the input embedding with the output layer";
        mogrifier_rounds: i64 = 5, "number of gating rounds r";
        mogrifier_rank: i64 = 0, "rank k of the gating matrices; <= 0 is full rank";
        input_dropout: f64 = 0.0, "dropout on embedded inputs";
        inter_layer_dropout: f64 = 0.0, "dropout between layers";
        state_dropout: f64 = 0.0, "dropout on the recurrent state";
        output_dropout: f64 = 0.0, "dropout on the top layer's output";
    }
    "training" {
        learning_rate: f64 = 0.002, "Adam learning rate";
        l2_penalty: f64 = 1e-4, "coupled L2 penalty";
        max_grad_norm: f64 = 10.0, "global gradient norm clipping threshold";
        adam_beta2: f64 = 0.999, "Adam second-moment decay";
        adam_epsilon: f64 = 1e-8, "Adam denominator epsilon";
        batch_size: usize = 64, "training rows processed in parallel";
        max_time_steps: usize = 70, "BPTT window length, also the dynamic evaluation segment length";
        steps: usize = 2000, "optimizer steps";
        checkpoint_interval: usize = 100, "steps between validations";
        patience: usize = 30, "validations without improvement before averaging starts";
        averaging_fraction: f64 = 0.8, "fraction of the step budget after which averaging starts at the latest";
    }
    "evaluation" {
        eval_mode: EvalMode = EvalMode::Deterministic, "deterministic or mc";
        mc_samples: usize = 200, "dropout masks averaged in mc mode";
        mc_rate_scale: f64 = 1.0, "factor applied to dropout rates in mc mode";
        temperature: f64 = 1.0, "softmax temperature; 0 tunes it on the validation set";
        temperature_grid: Vec<f64> = vec![0.8, 0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15, 1.2], "temperatures tried when tuning";
        eval_batch_size: usize = 1, "evaluation rows processed in parallel";
        eval_window: usize = 70, "evaluation window length";
    }
    "dyneval" {
        dyneval_learning_rate: f64 = 1e-4, "dynamic evaluation step size";
        dyneval_decay_rate: f64 = 1e-4, "pull towards the trained weights";
        dyneval_epsilon: f64 = 1e-4, "denominator epsilon of the dynamic evaluation step";
        ms_batch_size: usize = 1024, "rows used to estimate mean squared gradients";
        ms_max_windows: usize = 0, "cap on windows used for mean squared gradients; 0 uses all";
    }
    "copytask" {
        vocab: usize = 1000, "payload vocabulary size";
        payload_len: usize = 20, "tokens per payload";
        train_examples: usize = 20000, "training examples";
        eval_examples: usize = 1000, "validation and test examples each";
        decoder_sees_marker: bool = false, "also feed the end marker to the decoder as its first input";
        encoder_embedding_size: usize = 0, "encoder embedding size; 0 uses the hidden size";
        decoder_embedding_size: usize = 0, "decoder embedding size; 0 uses the hidden size";
    }
    "data" {
        data: String = String::new(), "single corpus file split 90/5/5";
        train_file: String = String::new(), "training split file";
        valid_file: String = String::new(), "validation split file";
        test_file: String = String::new(), "test split file";
        level: Level = Level::Word, "tokenization: word, char or byte";
        checkpoint: String = String::new(), "checkpoint path to write (train) or read (evaluate, dyneval)";
        log: String = String::new(), "TSV log path";
    }
    "tuner" {
        trials: usize = 10, "random search trials";
        tune_task: String = "word".to_string(), "range set: word, char, enwik8 or dyneval";
        ranges: String = String::new(), "range file overriding the built-in ranges";
    }
    "run" {
        seed: u64 = 1, "master random seed";
        threads: usize = 0, "worker threads; 1 is the fully reproducible mode, 0 picks automatically";
        precision: Precision = Precision::F32, "f32 or f64 arithmetic";
    }
}

impl RunConfig {
    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every field as `key = value`, one per line, in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in Self::FIELDS {
            out.push_str(f.name);
            out.push_str(" = ");
            out.push_str(&self.get(f.name).expect("declared field"));
            out.push('\n');
        }
        out
    }

    /// Like [`RunConfig::to_text`] without file paths, so a run stored in a
    /// checkpoint does not depend on where its inputs and outputs lived.
    pub fn settings_text(&self) -> String {
        const PATHS: [&str; 7] = ["data", "train_file", "valid_file", "test_file", "checkpoint", "log", "ranges"];
        let mut out = String::new();
        for f in Self::FIELDS.iter().filter(|f| !PATHS.contains(&f.name)) {
            out.push_str(&format!("{} = {}\n", f.name, self.get(f.name).expect("declared field")));
        }
        out
    }

    /// Checks ranges that the individual conversions do not cover.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("max_time_steps", self.max_time_steps),
            ("checkpoint_interval", self.checkpoint_interval),
            ("eval_batch_size", self.eval_batch_size),
            ("eval_window", self.eval_window),
            ("ms_batch_size", self.ms_batch_size),
            ("mc_samples", self.mc_samples),
            ("depth", self.depth),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be non-negative"));
        }
        if !(self.l2_penalty >= 0.0) {
            return Err(Error::config("l2_penalty", "must be non-negative"));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::config("max_grad_norm", "must be positive"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::config("temperature", "must be positive, or 0 to tune"));
        }
        if self.temperature_grid.is_empty() || self.temperature_grid.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::config("temperature_grid", "needs at least one positive temperature"));
        }
        self.schedule().validate()?;
        self.dyneval_config(1.0).validate()?;
        Ok(())
    }

    /// Model settings for a vocabulary of `vocab_size` tokens, hidden size as configured.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            depth: self.depth,
            hidden_size: self.hidden_size,
            vocab_size,
            input_embedding_ratio: self.input_embedding_ratio,
            tie_embeddings: self.tie_embeddings,
            cell: self.cell,
            mogrifier_rounds: self.mogrifier_rounds,
            mogrifier_rank: self.mogrifier_rank,
            input_dropout: self.input_dropout,
            inter_layer_dropout: self.inter_layer_dropout,
            state_dropout: self.state_dropout,
            output_dropout: self.output_dropout,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            steps: self.steps,
            checkpoint_interval: self.checkpoint_interval,
            patience: self.patience,
            averaging_fraction: self.averaging_fraction,
        }
    }

    pub fn optim(&self) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            l2_penalty: self.l2_penalty,
            max_grad_norm: self.max_grad_norm,
            adam: AdamConfig { beta2: self.adam_beta2, epsilon: self.adam_epsilon },
        }
    }

    pub fn eval_config(&self, temperature: f64) -> EvalConfig {
        EvalConfig {
            mode: self.eval_mode,
            mc_samples: self.mc_samples,
            temperature,
            mc_rate_scale: self.mc_rate_scale,
            batch_size: self.eval_batch_size,
            window: self.eval_window,
        }
    }

    pub fn dyneval_config(&self, temperature: f64) -> DynevalConfig {
        DynevalConfig {
            max_time_steps: self.max_time_steps,
            learning_rate: self.dyneval_learning_rate,
            decay_rate: self.dyneval_decay_rate,
            epsilon: self.dyneval_epsilon,
            ms_batch_size: self.ms_batch_size,
            batch_size: self.eval_batch_size,
            temperature,
        }
    }

    /// Whether wall-clock time may enter logs.
    pub fn records_wall_time(&self) -> bool {
        self.threads != 1
    }
}
