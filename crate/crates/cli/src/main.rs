//! `mogrifier` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use mogrifier::cells::{unrolled_gradient_check, GRADIENT_SUITE};
use mogrifier::checkpoint::Checkpoint;
use mogrifier::config::RunConfig;
use mogrifier::copytask::{size_copy_model, train_copy, Seq2Seq, Seq2SeqConfig};
use mogrifier::data::{batchify, copy_splits, load_ninety_five, load_split_files, tokenize, Corpus, Vocabulary};
use mogrifier::evaluation::{
    dynamic_eval, estimate_ms_gradients, evaluate, evaluate_deterministic, tune_temperature,
};
use mogrifier::model::{metrics, size_to_budget, Model};
use mogrifier::numerics::{ParameterSet, Precision, Real, Rng};
use mogrifier::training::{format_log, train_lm, LmTrainOptions, TrainOutcome};
use mogrifier::tuner::{default_ranges, format_trials, parse_ranges, random_search, TuneTask};
use mogrifier::Error;

const COMMANDS: [(&str, &str); 7] = [
    ("train", "train a language model"),
    ("evaluate", "score a trained language model on its validation and test splits"),
    ("dyneval", "dynamic evaluation of a trained language model"),
    ("copytask", "train and test an encoder-decoder on the reverse-copy task"),
    ("tune", "random search over hyperparameter ranges"),
    ("gradcheck", "finite-difference check of every cell kind"),
    ("inspect", "describe a checkpoint file"),
];

fn cli() -> Command {
    let mut root = Command::new("mogrifier")
        .about("Mogrifier LSTM language modelling")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name).about(about).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("file of `key = value` lines applied before command-line flags"),
        );
        for f in RunConfig::FIELDS {
            sub = sub.arg(
                Arg::new(f.name)
                    .long(f.name)
                    .value_name("VALUE")
                    .action(ArgAction::Set)
                    .allow_negative_numbers(true)
                    .help(f.help)
                    .help_heading(f.group),
            );
        }
        root = root.subcommand(sub);
    }
    root
}

/// Defaults, then the `--config` file, then flags.
fn resolve(m: &ArgMatches) -> mogrifier::Result<RunConfig> {
    let mut config = RunConfig::default();
    if let Some(path) = m.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {path}: {e}")))?;
        config.apply_text(&text)?;
    }
    for f in RunConfig::FIELDS {
        if let Some(v) = m.get_one::<String>(f.name) {
            config.set(f.name, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn echo(command: &str, config: &RunConfig) {
    println!("# mogrifier {command}");
    for line in config.to_text().lines() {
        println!("# {line}");
    }
}

fn path_of(field: &str, value: &str) -> mogrifier::Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::config(field, "a path is required for this command"));
    }
    Ok(PathBuf::from(value))
}

fn dataset_name(config: &RunConfig) -> String {
    let p = if config.data.is_empty() { &config.train_file } else { &config.data };
    Path::new(p).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".to_string())
}

fn load_data(config: &RunConfig) -> mogrifier::Result<Corpus> {
    if !config.data.is_empty() {
        return load_ninety_five(Path::new(&config.data), config.level);
    }
    load_split_files(
        &path_of("train_file", &config.train_file)?,
        &path_of("valid_file", &config.valid_file)?,
        &path_of("test_file", &config.test_file)?,
        config.level,
    )
}

/// The corpus re-encoded with a stored vocabulary.
fn load_with_vocab(config: &RunConfig, vocab: &Vocabulary) -> mogrifier::Result<Corpus> {
    let corpus = load_data(config)?;
    let recode = |ids: &[u32]| -> mogrifier::Result<Vec<u32>> {
        let bytes = corpus.vocab.decode(ids)?;
        vocab.encode(&tokenize(&bytes, vocab.level())?)
    };
    Ok(Corpus { train: recode(&corpus.train)?, valid: recode(&corpus.valid)?, test: recode(&corpus.test)?, vocab: vocab.clone() })
}

/// Hidden size after applying the parameter budget, if any.
fn sized(config: &RunConfig, vocab: usize) -> mogrifier::Result<RunConfig> {
    let mut c = config.clone();
    if c.params > 0 {
        c.hidden_size = size_to_budget(c.params, &c.model_config(vocab))?;
    }
    Ok(c)
}

fn report_header() {
    println!("dataset\tsplit\tmode\ttemperature\tnats\tppl\tbpc");
}

fn report_row(dataset: &str, split: &str, mode: &str, temperature: f64, nats: f64) -> mogrifier::Result<()> {
    let m = metrics(nats)?;
    println!("{dataset}\t{split}\t{mode}\t{temperature}\t{:.6}\t{:.3}\t{:.5}", m.nats, m.perplexity, m.bits_per_character);
    Ok(())
}

fn write_file(field: &str, path: &str, text: &[u8]) -> mogrifier::Result<()> {
    if !path.is_empty() {
        std::fs::write(path, text).map_err(|e| Error::config(field, format!("cannot write {path}: {e}")))?;
    }
    Ok(())
}

fn lm_options(config: &RunConfig) -> LmTrainOptions {
    LmTrainOptions {
        schedule: config.schedule(),
        optim: config.optim(),
        eval_batch_size: config.eval_batch_size,
        eval_window: config.eval_window,
        record_wall_time: config.records_wall_time(),
    }
}

fn train_model<R: Real>(config: &RunConfig, corpus: &Corpus) -> mogrifier::Result<(Model, TrainOutcome<R>, Rng)> {
    let model = Model::new(config.model_config(corpus.vocab.len()))?;
    let rng = Rng::new(config.seed);
    let init = model.initialize::<R>(&mut rng.substream("init"));
    let data = batchify(&corpus.train, config.batch_size, config.max_time_steps)?;
    let mut train_rng = rng.substream("train");
    let outcome = train_lm(&model, init, &data, &corpus.valid, &lm_options(config), None, &mut train_rng)?;
    Ok((model, outcome, train_rng))
}

fn cmd_train<R: Real>(config: &RunConfig) -> mogrifier::Result<()> {
    let corpus = load_data(config)?;
    let config = sized(config, corpus.vocab.len())?;
    echo("train", &config);
    let (model, outcome, rng) = train_model::<R>(&config, &corpus)?;
    println!("# parameter count: {}", model.parameter_count());
    let log = format_log(&outcome.log);
    print!("{log}");
    write_file("log", &config.log, log.as_bytes())?;
    if !config.checkpoint.is_empty() {
        let ck = Checkpoint {
            config: config.settings_text(),
            vocab: Some(corpus.vocab.clone()),
            params: outcome.final_params.clone(),
            rng: Some(rng.state()),
            opt: Some(outcome.opt.clone()),
        };
        ck.save(Path::new(&config.checkpoint))?;
    }
    let name = dataset_name(&config);
    report_header();
    for (split, stream) in [("valid", &corpus.valid), ("test", &corpus.test)] {
        let nats = evaluate_deterministic(&model, &outcome.final_params, stream, config.eval_batch_size, config.eval_window, 1.0)?;
        report_row(&name, split, "deterministic", 1.0, nats)?;
    }
    Ok(())
}

/// Settings stored in a checkpoint, with everything that does not change
/// the architecture taken from `config`.
fn restore<R: Real>(config: &RunConfig) -> mogrifier::Result<(RunConfig, Model, ParameterSet<R>, Vocabulary)> {
    let ck = Checkpoint::<R>::load(&path_of("checkpoint", &config.checkpoint)?)?;
    let stored = RunConfig::from_text(&ck.config)?;
    let mut c = config.clone();
    for key in [
        "cell",
        "depth",
        "hidden_size",
        "input_embedding_ratio",
        "tie_embeddings",
        "mogrifier_rounds",
        "mogrifier_rank",
        "input_dropout",
        "inter_layer_dropout",
        "state_dropout",
        "output_dropout",
        "level",
    ] {
        c.set(key, &stored.get(key).expect("declared field"))?;
    }
    c.params = 0;
    let vocab = ck.vocab.clone().ok_or_else(|| Error::Format("checkpoint has no vocabulary".to_string()))?;
    let model = Model::new(c.model_config(vocab.len()))?;
    let params = ck.params_for(&model)?;
    Ok((c, model, params, vocab))
}

fn cmd_evaluate<R: Real>(config: &RunConfig) -> mogrifier::Result<()> {
    let (config, model, params, vocab) = restore::<R>(config)?;
    echo("evaluate", &config);
    let corpus = load_with_vocab(&config, &vocab)?;
    let temperature = if config.temperature == 0.0 {
        tune_temperature(&model, &params, &corpus.valid, config.eval_batch_size, config.eval_window, &config.temperature_grid)?.0
    } else {
        config.temperature
    };
    let name = dataset_name(&config);
    let rng = Rng::new(config.seed).substream("eval");
    report_header();
    for (split, stream) in [("valid", &corpus.valid), ("test", &corpus.test)] {
        let nats = evaluate(&model, &params, stream, &config.eval_config(temperature), &rng)?;
        report_row(&name, split, &config.eval_mode.to_string(), temperature, nats)?;
    }
    Ok(())
}

fn dyneval_nats<R: Real>(
    config: &RunConfig,
    model: &Model,
    params: &ParameterSet<R>,
    corpus: &Corpus,
    stream: &[u32],
) -> mogrifier::Result<f64> {
    let temperature = if config.temperature == 0.0 { 1.0 } else { config.temperature };
    let dcfg = config.dyneval_config(temperature);
    let ms = estimate_ms_gradients(model, params, &corpus.train, &dcfg, config.ms_max_windows)?;
    Ok(dynamic_eval(model, params, &ms, stream, &dcfg)?.nats)
}

fn cmd_dyneval<R: Real>(config: &RunConfig) -> mogrifier::Result<()> {
    let (config, model, params, vocab) = restore::<R>(config)?;
    echo("dyneval", &config);
    let corpus = load_with_vocab(&config, &vocab)?;
    let temperature = if config.temperature == 0.0 { 1.0 } else { config.temperature };
    let name = dataset_name(&config);
    report_header();
    for (split, stream) in [("valid", &corpus.valid), ("test", &corpus.test)] {
        let stat = evaluate_deterministic(&model, &params, stream, config.eval_batch_size, config.max_time_steps, temperature)?;
        report_row(&name, split, "static", temperature, stat)?;
        let nats = dyneval_nats(&config, &model, &params, &corpus, stream)?;
        report_row(&name, split, "dynamic", temperature, nats)?;
    }
    Ok(())
}

fn copy_model_config(config: &RunConfig) -> mogrifier::Result<Seq2SeqConfig> {
    let base = Seq2SeqConfig {
        vocab: config.vocab,
        hidden_size: config.hidden_size,
        depth: config.depth,
        cell: config.cell,
        mogrifier_rounds: config.mogrifier_rounds,
        mogrifier_rank: config.mogrifier_rank,
        encoder_embedding_size: config.encoder_embedding_size,
        decoder_embedding_size: config.decoder_embedding_size,
        decoder_sees_marker: config.decoder_sees_marker,
    };
    if config.params > 0 {
        size_copy_model(config.params, &base)
    } else {
        Ok(base)
    }
}

fn cmd_copytask<R: Real>(config: &RunConfig) -> mogrifier::Result<()> {
    let mut config = config.clone();
    // The task needs no regularization by dropout.
    for key in ["input_dropout", "inter_layer_dropout", "state_dropout", "output_dropout"] {
        config.set(key, "0.0")?;
    }
    let mcfg = copy_model_config(&config)?;
    config.hidden_size = mcfg.hidden_size;
    config.params = 0;
    echo("copytask", &config);
    let model = Seq2Seq::new(mcfg)?;
    let rng = Rng::new(config.seed);
    let splits = copy_splits(config.train_examples, config.eval_examples, config.vocab, config.payload_len, &rng)?;
    let init = model.initialize::<R>(&mut rng.substream("init"));
    let mut train_rng = rng.substream("train");
    let outcome = train_copy(
        &model,
        init,
        &splits.train,
        &splits.valid,
        config.batch_size,
        &config.schedule(),
        &config.optim(),
        None,
        config.records_wall_time(),
        &mut train_rng,
    )?;
    let log = format_log(&outcome.log);
    print!("{log}");
    write_file("log", &config.log, log.as_bytes())?;
    if !config.checkpoint.is_empty() {
        let ck = Checkpoint {
            config: config.settings_text(),
            vocab: None,
            params: outcome.final_params.clone(),
            rng: Some(train_rng.state()),
            opt: Some(outcome.opt.clone()),
        };
        ck.save(Path::new(&config.checkpoint))?;
    }
    let test = model.evaluate(&outcome.final_params, &splits.test, config.eval_batch_size.max(config.batch_size))?;
    println!("payload_len\tcell\tparams\ttest_nats");
    println!("{}\t{}\t{}\t{:.6}", config.payload_len, config.cell, model.parameter_count(), test);
    Ok(())
}

fn cmd_tune<R: Real>(config: &RunConfig) -> mogrifier::Result<()> {
    let task: TuneTask = config.tune_task.parse()?;
    let ranges = if config.ranges.is_empty() {
        default_ranges(task, config.level)
    } else {
        let text = std::fs::read_to_string(&config.ranges)
            .map_err(|e| Error::config("ranges", format!("cannot read {}: {e}", config.ranges)))?;
        parse_ranges(&text)?
    };
    echo("tune", config);
    let rng = Rng::new(config.seed).substream("tune");
    let outcome = if task == TuneTask::Dyneval {
        let (base, model, params, vocab) = restore::<R>(config)?;
        let corpus = load_with_vocab(&base, &vocab)?;
        random_search(&ranges, &base, config.trials, &rng, config.records_wall_time(), |c| {
            dyneval_nats(c, &model, &params, &corpus, &corpus.valid)
        })?
    } else {
        let corpus = load_data(config)?;
        random_search(&ranges, config, config.trials, &rng, config.records_wall_time(), |c| {
            let c = sized(c, corpus.vocab.len())?;
            Ok(train_model::<R>(&c, &corpus)?.1.best_val)
        })?
    };
    let log = format_trials(&ranges, &outcome.trials);
    print!("{log}");
    write_file("log", &config.log, log.as_bytes())?;
    println!("# best trial {} with validation nats {:.6}", outcome.best.index, outcome.best.val_nats);
    for line in outcome.best.config.to_text().lines() {
        println!("# best {line}");
    }
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig) -> anyhow::Result<()> {
    echo("gradcheck", config);
    println!("cell\tinput\thidden\trounds\trank\tmax_rel_error");
    let mut worst: f64 = 0.0;
    for case in GRADIENT_SUITE {
        let report = unrolled_gradient_check(case, 5, config.seed)?;
        let (kind, m, n, r, k) = case;
        println!("{kind}\t{m}\t{n}\t{r}\t{k}\t{:.3e}", report.max_rel_error);
        worst = worst.max(report.max_rel_error);
    }
    println!("# max relative error {worst:.3e}");
    if worst.is_nan() || worst >= 1e-5 {
        bail!("gradient check failed: max relative error {worst:.3e} is not below 1e-5");
    }
    Ok(())
}

fn cmd_inspect<R: Real>(config: &RunConfig) -> mogrifier::Result<()> {
    let ck = Checkpoint::<R>::load(&path_of("checkpoint", &config.checkpoint)?)?;
    println!("# precision = {}", R::PRECISION);
    for line in ck.config.lines() {
        println!("# {line}");
    }
    match &ck.vocab {
        Some(v) => println!("vocabulary\t{} tokens ({} level)", v.len(), v.level()),
        None => println!("vocabulary\tnone"),
    }
    println!("rng state\t{}", if ck.rng.is_some() { "present" } else { "absent" });
    match &ck.opt {
        Some(o) => println!("optimizer\tstep {}", o.t),
        None => println!("optimizer\tabsent"),
    }
    println!("tensor\tshape\tvalues");
    for (_, name, t) in ck.params.iter() {
        println!("{name}\t{:?}\t{}", t.shape(), t.len());
    }
    println!("total\t\t{}", ck.params.count());
    Ok(())
}

/// Reads the precision byte of a checkpoint so `inspect` works on either kind.
fn stored_precision(path: &str) -> anyhow::Result<Precision> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {path}"))?;
    match bytes.get(12) {
        Some(4) => Ok(Precision::F32),
        Some(8) => Ok(Precision::F64),
        _ => Ok(Precision::F64),
    }
}

fn dispatch(command: &str, config: &RunConfig) -> anyhow::Result<()> {
    macro_rules! with_precision {
        ($f:ident, $p:expr) => {
            match $p {
                Precision::F32 => $f::<f32>(config)?,
                Precision::F64 => $f::<f64>(config)?,
            }
        };
    }
    match command {
        "train" => with_precision!(cmd_train, config.precision),
        "evaluate" => with_precision!(cmd_evaluate, config.precision),
        "dyneval" => with_precision!(cmd_dyneval, config.precision),
        "copytask" => with_precision!(cmd_copytask, config.precision),
        "tune" => with_precision!(cmd_tune, config.precision),
        "gradcheck" => cmd_gradcheck(config)?,
        "inspect" => {
            let p = stored_precision(&path_of("checkpoint", &config.checkpoint)?.to_string_lossy())?;
            with_precision!(cmd_inspect, p)
        }
        other => bail!("unknown command `{other}`"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                return ExitCode::SUCCESS;
            }
            if kind == ErrorKind::UnknownArgument {
                let flags: Vec<String> = RunConfig::FIELDS.iter().map(|f| format!("--{}", f.name)).collect();
                eprintln!("valid flags: --config {}", flags.join(" "));
            }
            return ExitCode::from(2);
        }
    };
    let (command, sub) = matches.subcommand().expect("a subcommand is required");
    let config = match resolve(sub) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match dispatch(command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
