use mogrifier::config::RunConfig;
use mogrifier::data::Level;
use mogrifier::model::Model;
use mogrifier::numerics::Rng;
use mogrifier::tuner::{
    default_ranges, format_trials, parse_ranges, random_search, sample_config, write_ranges, Kind, ParamRange, Spacing,
    TrialStatus, TuneTask,
};
use mogrifier::Error;

fn range<'a>(ranges: &'a [ParamRange], name: &str) -> Option<&'a ParamRange> {
    ranges.iter().find(|r| r.name == name)
}

#[test]
fn published_ranges() {
    let word = default_ranges(TuneTask::Word, Level::Word);
    let d = range(&word, "input_dropout").unwrap();
    assert_eq!((d.low, d.high, d.spacing), (0.0, 0.9, Spacing::Linear));
    let lr = range(&word, "learning_rate").unwrap();
    assert_eq!((lr.low, lr.high, lr.spacing), (0.001, 0.004, Spacing::Log));
    let k = range(&word, "mogrifier_rank").unwrap();
    assert_eq!((k.low, k.high, k.kind), (-20.0, 100.0, Kind::Integer));
    assert_eq!(range(&word, "mogrifier_rounds").unwrap().high, 6.0);

    let enwik = default_ranges(TuneTask::Enwik8, Level::Byte);
    assert_eq!(range(&enwik, "state_dropout").map(|r| (r.low, r.high)), Some((0.0, 0.25)));
    assert!(range(&enwik, "input_embedding_ratio").is_none());

    let dy = default_ranges(TuneTask::Dyneval, Level::Word);
    let lr = range(&dy, "dyneval_learning_rate").unwrap();
    assert_eq!((lr.low, lr.high, lr.spacing), (1e-6, 1e-3, Spacing::Log));
    assert_eq!(range(&dy, "max_time_steps").unwrap().high, 20.0);
    assert_eq!(range(&default_ranges(TuneTask::Dyneval, Level::Char), "max_time_steps").unwrap().high, 50.0);

    assert!(matches!("wiki".parse::<TuneTask>(), Err(Error::Config { .. })));
    for task in [TuneTask::Word, TuneTask::Char, TuneTask::Enwik8, TuneTask::Dyneval] {
        for r in default_ranges(task, Level::Char) {
            r.validate().unwrap();
        }
    }
}

#[test]
fn samples_stay_in_range_and_repeat_per_seed() {
    let ranges = default_ranges(TuneTask::Word, Level::Word);
    let base = RunConfig::default();
    let mut a = Rng::new(3);
    let mut b = Rng::new(3);
    let mut seen_ranks = std::collections::BTreeSet::new();
    for _ in 0..2000 {
        let c = sample_config(&ranges, &base, &mut a).unwrap();
        assert_eq!(c, sample_config(&ranges, &base, &mut b).unwrap());
        for r in &ranges {
            let v: f64 = c.get(&r.name).unwrap().parse().unwrap();
            assert!(v >= r.low && v <= r.high, "{} = {v}", r.name);
        }
        seen_ranks.insert(c.mogrifier_rank);
    }
    assert!(seen_ranks.contains(&-20) && seen_ranks.contains(&100));
}

#[test]
fn degenerate_range_is_constant() {
    let ranges = vec![ParamRange::new("l2_penalty", 3e-4, 3e-4, Spacing::Log, Kind::Real).unwrap()];
    let mut rng = Rng::new(1);
    for _ in 0..20 {
        assert_eq!(sample_config(&ranges, &RunConfig::default(), &mut rng).unwrap().l2_penalty, 3e-4);
    }
}

#[test]
fn log_spacing_median() {
    let r = ParamRange::new("learning_rate", 1e-6, 1e-2, Spacing::Log, Kind::Real).unwrap();
    let mut rng = Rng::new(5);
    let mut draws: Vec<f64> = (0..100_000).map(|_| r.sample(&mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let median = draws[draws.len() / 2];
    assert!(median > 1e-4 / 1.3 && median < 1e-4 * 1.3, "{median}");
}

#[test]
fn non_positive_rank_builds_full_rank_gates() {
    let ranges = vec![ParamRange::new("mogrifier_rank", -20.0, 0.0, Spacing::Linear, Kind::Integer).unwrap()];
    let base = RunConfig { hidden_size: 4, depth: 1, mogrifier_rounds: 3, ..RunConfig::default() };
    let mut rng = Rng::new(2);
    for _ in 0..10 {
        let c = sample_config(&ranges, &base, &mut rng).unwrap();
        assert!(c.mogrifier_rank <= 0);
        let model = Model::new(c.model_config(6)).unwrap();
        let names: Vec<_> = model.registry().specs().iter().map(|s| s.name.clone()).collect();
        assert!(names.iter().any(|n| n == "layer0.Q1"));
        assert!(!names.iter().any(|n| n.ends_with("_left")));
    }
}

#[test]
fn invalid_ranges_are_rejected() {
    assert!(ParamRange::new("learning_rate", 0.0, 1.0, Spacing::Log, Kind::Real).is_err());
    assert!(ParamRange::new("learning_rate", 2.0, 1.0, Spacing::Linear, Kind::Real).is_err());
    assert!(ParamRange::new("speed", 0.0, 1.0, Spacing::Linear, Kind::Real).is_err());
}

#[test]
fn range_files_round_trip() {
    let ranges = default_ranges(TuneTask::Enwik8, Level::Byte);
    assert_eq!(parse_ranges(&write_ranges(&ranges)).unwrap(), ranges);
    assert!(matches!(parse_ranges("learning_rate 0.1 0.2 log"), Err(Error::Format(_))));
    assert!(matches!(parse_ranges("learning_rate 0.1 0.2 cubic real"), Err(Error::Format(_))));
}

#[test]
fn search_finds_the_synthetic_optimum() {
    let ranges = vec![
        ParamRange::new("learning_rate", 1e-4, 1e-1, Spacing::Log, Kind::Real).unwrap(),
        ParamRange::new("input_dropout", 0.0, 1.0, Spacing::Linear, Kind::Real).unwrap(),
    ];
    let objective = |c: &RunConfig| Ok((c.learning_rate.ln() - 3e-3f64.ln()).powi(2) + (c.input_dropout - 0.3).powi(2));
    let mut previous = f64::INFINITY;
    for budget in [1usize, 10, 100, 1000] {
        let out = random_search(&ranges, &RunConfig::default(), budget, &Rng::new(7), false, objective).unwrap();
        assert_eq!(out.trials.len(), budget);
        assert!(out.best.val_nats <= previous);
        assert!(out.trials.iter().all(|t| t.val_nats >= out.best.val_nats));
        previous = out.best.val_nats;
        let log = format_trials(&ranges, &out.trials);
        assert_eq!(log.lines().count(), budget + 1);
        assert!(log.lines().next().unwrap().ends_with("learning_rate\tinput_dropout"));
    }
    assert!(previous < 0.01, "{previous}");
    let one = random_search(&ranges, &RunConfig::default(), 1, &Rng::new(7), false, objective).unwrap();
    assert_eq!(one.best, one.trials[0]);
}

#[test]
fn diverged_trials_are_never_best() {
    let ranges = vec![ParamRange::new("input_dropout", 0.0, 1.0, Spacing::Linear, Kind::Real).unwrap()];
    let out = random_search(&ranges, &RunConfig::default(), 30, &Rng::new(1), false, |c| {
        if c.input_dropout < 0.5 {
            Err(Error::Numeric("nan".to_string()))
        } else {
            Ok(c.input_dropout)
        }
    })
    .unwrap();
    assert!(out.best.config.input_dropout >= 0.5);
    assert!(out.trials.iter().any(|t| t.status == TrialStatus::Diverged));
    let all = random_search(&ranges, &RunConfig::default(), 3, &Rng::new(1), false, |_| Ok(f64::NAN));
    assert!(matches!(all, Err(Error::Numeric(_))));
}
