use mogrifier::cells::CellKind;
use mogrifier::checkpoint::Checkpoint;
use mogrifier::data::{batchify, Level, Vocabulary};
use mogrifier::model::{DropoutMasks, Model, ModelConfig, RnnState};
use mogrifier::numerics::{Gradients, ParameterSet, Rng, Tape, Tensor};
use mogrifier::training::{
    adam_step, clip_gradients, format_log, optimize, train_lm, AdamConfig, AverageState, LmTrainOptions, OptState,
    OptimConfig, TrainSchedule,
};
use mogrifier::Error;
use proptest::prelude::*;

fn toy_config(cell: CellKind) -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden_size: 6,
        vocab_size: 7,
        cell,
        mogrifier_rounds: 3,
        mogrifier_rank: 2,
        input_dropout: 0.2,
        inter_layer_dropout: 0.2,
        state_dropout: 0.2,
        output_dropout: 0.2,
        ..ModelConfig::default()
    }
}

fn toy_stream(len: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..len).map(|i| if i % 3 == 0 { rng.below(7) as u32 } else { (i % 7) as u32 }).collect()
}

fn options(steps: usize, lr: f64) -> LmTrainOptions {
    LmTrainOptions {
        schedule: TrainSchedule { steps, checkpoint_interval: 4, patience: 30, averaging_fraction: 0.8 },
        optim: OptimConfig { learning_rate: lr, l2_penalty: 1e-4, ..OptimConfig::default() },
        eval_batch_size: 2,
        eval_window: 8,
        record_wall_time: false,
    }
}

fn run(cfg: &ModelConfig, steps: usize, lr: f64, seed: u64) -> (ParameterSet<f64>, mogrifier::training::TrainOutcome<f64>) {
    let model = Model::new(cfg.clone()).unwrap();
    let rng = Rng::new(seed);
    let init = model.initialize::<f64>(&mut rng.substream("init"));
    let data = batchify(&toy_stream(400, 1), 4, 10).unwrap();
    let valid = toy_stream(80, 2);
    let out = train_lm(&model, init.clone(), &data, &valid, &options(steps, lr), None, &mut rng.substream("train")).unwrap();
    (init, out)
}

#[test]
fn zero_learning_rate_is_an_exact_no_op() {
    let (init, out) = run(&toy_config(CellKind::Mogrifier), 12, 0.0, 3);
    assert_eq!(out.last, init);
    assert_eq!(out.final_params, init);
    assert_eq!(out.log.len(), 3);
}

#[test]
fn zero_steps_return_the_initial_weights() {
    let (init, out) = run(&toy_config(CellKind::Lstm), 0, 0.01, 3);
    assert_eq!(out.final_params, init);
    assert!(out.log.is_empty());
    assert_eq!(format_log(&out.log).lines().count(), 1);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = toy_config(CellKind::Mogrifier);
    let (_, a) = run(&cfg, 40, 0.01, 5);
    let (_, b) = run(&cfg, 40, 0.01, 5);
    assert_eq!(format_log(&a.log), format_log(&b.log));
    assert_eq!(a.final_params, b.final_params);
    assert!(a.log.iter().all(|r| r.wall_seconds == 0.0));
    let first = a.log.first().unwrap().train_nats;
    let last = a.log.last().unwrap().train_nats;
    assert!(last < first, "train nats {first} -> {last}");
    let (_, c) = run(&cfg, 40, 0.01, 6);
    assert_ne!(a.final_params, c.final_params);
}

#[test]
fn averaging_starts_no_later_than_the_latest_step() {
    for steps in [1usize, 5, 10, 37, 100] {
        let schedule = TrainSchedule { steps, checkpoint_interval: 7, patience: 1000, averaging_fraction: 0.8 };
        let p = scalar(1.0);
        let out = optimize(
            p,
            &schedule,
            &OptimConfig { learning_rate: 0.01, ..OptimConfig::default() },
            None,
            false,
            |_, _| Ok((grad(0.5), 1.0)),
            |_| Ok(1.0),
        )
        .unwrap();
        let started = out.averaging_started.unwrap();
        assert!(started as f64 <= 0.8 * steps as f64, "steps {steps} started {started}");
        assert!(out.log.last().unwrap().averaged);
    }
}

#[test]
fn patience_triggers_averaging_early() {
    let schedule = TrainSchedule { steps: 100, checkpoint_interval: 5, patience: 2, averaging_fraction: 0.8 };
    let out = optimize(scalar(1.0), &schedule, &OptimConfig::default(), None, false, |_, _| Ok((grad(0.1), 1.0)), |_| Ok(2.0))
        .unwrap();
    // Step 5 sets the best; steps 10 and 15 are stale, so the checkpoint at
    // step 20 is the first one taken from the average.
    assert_eq!(out.averaging_started, Some(20));
    assert!(!out.log[2].averaged && out.log[3].averaged);
}

#[test]
fn divergent_validation_aborts() {
    let schedule = TrainSchedule { steps: 10, checkpoint_interval: 5, patience: 30, averaging_fraction: 0.8 };
    let r = optimize(scalar(1.0), &schedule, &OptimConfig::default(), None, false, |_, _| Ok((grad(0.1), 1.0)), |_| Ok(f64::NAN));
    assert!(matches!(r, Err(Error::Numeric(_))));
}

fn scalar(v: f64) -> ParameterSet<f64> {
    let mut p = ParameterSet::new();
    p.push("w", Tensor::vector(vec![v]).unwrap()).unwrap();
    p
}

fn grad(g: f64) -> Gradients<f64> {
    let mut out = Gradients::empty(1);
    out.set(scalar(0.0).ids().next().unwrap(), Tensor::vector(vec![g]).unwrap());
    out
}

#[test]
fn l2_alone_shrinks_the_norm_monotonically() {
    let mut p = ParameterSet::<f64>::new();
    p.push("a", Tensor::vector(vec![0.8, -1.5, 0.3]).unwrap()).unwrap();
    let mut opt = OptState::new(&p, AdamConfig::default());
    let norm = |p: &ParameterSet<f64>| p.tensors()[0].data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut last = norm(&p);
    for _ in 0..200 {
        adam_step(&mut p, &Gradients::empty(1), &mut opt, 1e-3, 1e-2).unwrap();
        let now = norm(&p);
        assert!(now < last);
        last = now;
    }
}

#[test]
fn incremental_average_matches_batch_mean() {
    let mut rng = Rng::new(17);
    let snaps: Vec<Vec<f64>> = (0..25).map(|_| (0..6).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).collect();
    let mut avg = AverageState::<f64>::default();
    for s in &snaps {
        let mut p = ParameterSet::new();
        p.push("x", Tensor::vector(s.clone()).unwrap()).unwrap();
        avg.update(&p);
    }
    let mean = avg.mean.unwrap();
    for k in 0..6 {
        let batch: f64 = snaps.iter().map(|s| s[k]).sum::<f64>() / snaps.len() as f64;
        assert!((mean.tensors()[0].data()[k] - batch).abs() < 1e-12);
    }
    assert_eq!(avg.count, 25);
}

proptest! {
    #[test]
    fn clipped_norm_never_exceeds_the_limit(values in proptest::collection::vec(-1e4f64..1e4, 1..20), limit in 0.1f64..20.0) {
        let mut p = ParameterSet::<f64>::new();
        let id = p.push("g", Tensor::vector(vec![0.0; values.len()]).unwrap()).unwrap();
        let mut g = Gradients::empty(1);
        g.set(id, Tensor::vector(values.clone()).unwrap());
        let before = g.global_norm();
        clip_gradients(&mut g, limit).unwrap();
        prop_assert!(g.global_norm() <= limit);
        if before <= limit {
            prop_assert_eq!(g.get(id).unwrap().data(), &values[..]);
        }
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = toy_config(CellKind::Mogrifier);
    let (_, out) = run(&cfg, 8, 0.01, 9);
    let model = Model::new(cfg.clone()).unwrap();
    let vocab = Vocabulary::build(Level::Char, [b"a".as_slice(), b"b".as_slice()]);
    let mut rng = Rng::new(4);
    rng.below(10);
    let ck = Checkpoint {
        config: "depth = 2\n".to_string(),
        vocab: Some(vocab),
        params: out.final_params.clone(),
        rng: Some(rng.state()),
        opt: Some(out.opt.clone()),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes(), ck.to_bytes());
    let mut restored = Rng::from_state(back.rng.unwrap());
    let mut original = Rng::from_state(ck.rng.unwrap());
    assert_eq!(restored.below(1 << 30), original.below(1 << 30));

    let logits = |params: &ParameterSet<f64>| {
        let mut tape = Tape::new(params);
        let out = model
            .forward_window(&mut tape, &[1, 2, 3, 4, 5, 6], 2, &RnnState::zeros(&cfg, 2), &DropoutMasks::none(&cfg))
            .unwrap();
        out.logits.iter().flat_map(|&v| tape.value(v).data().to_vec()).map(f64::to_bits).collect::<Vec<_>>()
    };
    assert_eq!(logits(&back.params_for(&model).unwrap()), logits(&out.final_params));

    let bytes = ck.to_bytes();
    for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
    }
    assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Format(_))));

    let shallow = Model::new(ModelConfig { depth: 1, ..cfg.clone() }).unwrap();
    match back.params_for(&shallow) {
        Err(Error::Format(msg)) => assert!(msg.contains("layer1"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
    let deeper = Model::new(ModelConfig { depth: 3, ..cfg }).unwrap();
    match back.params_for(&deeper) {
        Err(Error::Format(msg)) => assert!(msg.contains("layer2"), "{msg}"),
        other => panic!("expected a format error, got {other:?}"),
    }
}
