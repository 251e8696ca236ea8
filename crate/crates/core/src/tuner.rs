//! Random-search hyperparameter tuning.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::Level;
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Linear,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Real,
    Integer,
}

/// Sampling range of one setting.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamRange {
    pub name: String,
    pub low: f64,
    pub high: f64,
    pub spacing: Spacing,
    pub kind: Kind,
}

impl ParamRange {
    pub fn new(name: &str, low: f64, high: f64, spacing: Spacing, kind: Kind) -> Result<Self> {
        let r = ParamRange { name: name.to_string(), low, high, spacing, kind };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.low <= self.high) {
            return Err(Error::config(&self.name, format!("range low {} exceeds high {}", self.low, self.high)));
        }
        if self.spacing == Spacing::Log && !(self.low > 0.0) {
            return Err(Error::config(&self.name, "log spacing needs a positive lower bound"));
        }
        if RunConfig::default().get(&self.name).is_none() {
            return Err(Error::config(&self.name, "not a tunable setting"));
        }
        Ok(())
    }

    /// One draw. Integers are drawn on `[low − ½, high + ½)` and rounded so
    /// that the end points are as likely as interior values.
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        let (lo, hi) = match self.kind {
            Kind::Real => (self.low, self.high),
            Kind::Integer => (self.low - 0.5, self.high + 0.5),
        };
        let v = match self.spacing {
            Spacing::Linear => lo + (hi - lo) * rng.uniform(),
            Spacing::Log => {
                let (a, b) = (lo.max(f64::MIN_POSITIVE).ln(), hi.ln());
                (a + (b - a) * rng.uniform()).exp()
            }
        };
        let v = match self.kind {
            Kind::Real => v,
            Kind::Integer => v.round(),
        };
        v.clamp(self.low, self.high)
    }

    fn render(&self, v: f64) -> String {
        match self.kind {
            Kind::Real => format!("{v:?}"),
            Kind::Integer => format!("{}", v as i64),
        }
    }
}

impl fmt::Display for ParamRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let spacing = match self.spacing {
            Spacing::Linear => "linear",
            Spacing::Log => "log",
        };
        let kind = match self.kind {
            Kind::Real => "real",
            Kind::Integer => "integer",
        };
        write!(f, "{} {:?} {:?} {} {}", self.name, self.low, self.high, spacing, kind)
    }
}

/// Which built-in range table to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TuneTask {
    Word,
    Char,
    Enwik8,
    Dyneval,
}

impl FromStr for TuneTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(TuneTask::Word),
            "char" => Ok(TuneTask::Char),
            "enwik8" => Ok(TuneTask::Enwik8),
            "dyneval" => Ok(TuneTask::Dyneval),
            other => Err(Error::config("tune_task", format!("unknown task `{other}` (word, char, enwik8 or dyneval)"))),
        }
    }
}

/// The published tuning ranges. For dynamic evaluation `level` sets the cap
/// on `max_time_steps`: 20 at word level, 50 otherwise.
pub fn default_ranges(task: TuneTask, level: Level) -> Vec<ParamRange> {
    use Kind::*;
    use Spacing::*;
    let r = |name: &str, low: f64, high: f64, spacing, kind| ParamRange {
        name: name.to_string(),
        low,
        high,
        spacing,
        kind,
    };
    match task {
        TuneTask::Word | TuneTask::Char => vec![
            r("learning_rate", 0.001, 0.004, Log, Real),
            r("input_embedding_ratio", 0.0, 2.0, Linear, Real),
            r("l2_penalty", 5e-6, 1e-3, Log, Real),
            r("input_dropout", 0.0, 0.9, Linear, Real),
            r("inter_layer_dropout", 0.0, 0.95, Linear, Real),
            r("state_dropout", 0.0, 0.8, Linear, Real),
            r("output_dropout", 0.0, 0.95, Linear, Real),
            r("mogrifier_rounds", 0.0, 6.0, Linear, Integer),
            r("mogrifier_rank", -20.0, 100.0, Linear, Integer),
        ],
        TuneTask::Enwik8 => vec![
            r("learning_rate", 0.001, 0.004, Log, Real),
            r("l2_penalty", 5e-6, 1e-3, Log, Real),
            r("input_dropout", 0.0, 0.2, Linear, Real),
            r("inter_layer_dropout", 0.0, 0.2, Linear, Real),
            r("state_dropout", 0.0, 0.25, Linear, Real),
            r("output_dropout", 0.0, 0.25, Linear, Real),
            r("mogrifier_rounds", 0.0, 6.0, Linear, Integer),
            r("mogrifier_rank", -20.0, 100.0, Linear, Integer),
        ],
        TuneTask::Dyneval => vec![
            r("max_time_steps", 1.0, if level == Level::Word { 20.0 } else { 50.0 }, Linear, Integer),
            r("dyneval_learning_rate", 1e-6, 1e-3, Log, Real),
            r("dyneval_decay_rate", 1e-6, 1e-2, Log, Real),
            r("dyneval_epsilon", 1e-8, 1e-2, Log, Real),
        ],
    }
}

/// Parses a range file: `name low high spacing kind` per line, `#` comments allowed.
pub fn parse_ranges(text: &str) -> Result<Vec<ParamRange>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| Error::Format(format!("range file line {}: {what}", n + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, low, high, spacing, kind] = parts[..] else {
            return Err(bad("expected `name low high spacing kind`"));
        };
        let low = low.parse::<f64>().map_err(|_| bad("low is not a number"))?;
        let high = high.parse::<f64>().map_err(|_| bad("high is not a number"))?;
        let spacing = match spacing {
            "linear" => Spacing::Linear,
            "log" => Spacing::Log,
            _ => return Err(bad("spacing must be linear or log")),
        };
        let kind = match kind {
            "real" => Kind::Real,
            "integer" => Kind::Integer,
            _ => return Err(bad("kind must be real or integer")),
        };
        out.push(ParamRange::new(name, low, high, spacing, kind)?);
    }
    if out.is_empty() {
        return Err(Error::Format("range file lists no ranges".to_string()));
    }
    Ok(out)
}

pub fn write_ranges(ranges: &[ParamRange]) -> String {
    ranges.iter().map(|r| format!("{r}\n")).collect()
}

/// `base` with every ranged setting replaced by an independent draw.
pub fn sample_config(ranges: &[ParamRange], base: &RunConfig, rng: &mut Rng) -> Result<RunConfig> {
    let mut c = base.clone();
    for r in ranges {
        r.validate()?;
        c.set(&r.name, &r.render(r.sample(rng)))?;
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrialStatus {
    Ok,
    Diverged,
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialStatus::Ok => "ok",
            TrialStatus::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub index: usize,
    pub config: RunConfig,
    pub val_nats: f64,
    pub status: TrialStatus,
    pub wall_seconds: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

/// Runs `trials` sampled configurations through `objective` and keeps the
/// lowest validation loss.
///
/// Trial `i` samples from substream `trial{i}` of `rng` and trains with seed
/// `base.seed + i`. Numeric errors and non-finite results mark a trial as
/// diverged; any other error aborts the search.
pub fn random_search<F>(
    ranges: &[ParamRange],
    base: &RunConfig,
    trials: usize,
    rng: &Rng,
    record_wall_time: bool,
    mut objective: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&RunConfig) -> Result<f64>,
{
    if trials < 1 {
        return Err(Error::config("trials", "must be at least 1"));
    }
    let mut records = Vec::with_capacity(trials);
    for index in 0..trials {
        let mut config = sample_config(ranges, base, &mut rng.substream(&format!("trial{index}")))?;
        config.seed = base.seed.wrapping_add(index as u64);
        let started = Instant::now();
        let (val_nats, status) = match objective(&config) {
            Ok(v) if v.is_finite() => (v, TrialStatus::Ok),
            Ok(v) => (v, TrialStatus::Diverged),
            Err(Error::Numeric(_)) => (f64::NAN, TrialStatus::Diverged),
            Err(e) => return Err(e),
        };
        let wall_seconds = if record_wall_time { started.elapsed().as_secs_f64() } else { 0.0 };
        records.push(TrialRecord { index, seed: config.seed, config, val_nats, status, wall_seconds });
    }
    let best = records
        .iter()
        .filter(|r| r.status == TrialStatus::Ok)
        .min_by(|a, b| a.val_nats.total_cmp(&b.val_nats))
        .cloned()
        .ok_or_else(|| Error::Numeric(format!("all {trials} trials diverged")))?;
    Ok(SearchOutcome { best, trials: records })
}

/// Trial log with one column per ranged setting.
pub fn format_trials(ranges: &[ParamRange], trials: &[TrialRecord]) -> String {
    let mut out = String::from("trial\tstatus\tval_nats\twall_seconds\tseed");
    for r in ranges {
        out.push('\t');
        out.push_str(&r.name);
    }
    out.push('\n');
    for t in trials {
        out.push_str(&format!("{}\t{}\t{:.8}\t{:.3}\t{}", t.index, t.status, t.val_nats, t.wall_seconds, t.seed));
        for r in ranges {
            out.push('\t');
            out.push_str(&t.config.get(&r.name).unwrap_or_default());
        }
        out.push('\n');
    }
    out
}
