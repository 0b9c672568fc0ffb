use westar::experiment::{CorruptionChoice, DataConfig, Splits};
use westar::grad::{Tape, Tensor};
use westar::losses::weak_loss;
use westar::model::{NetConfig, ParamKind, StudentNet};
use westar::normalize::{normalize_phi, stats_of, DEFAULT_EPSILON};
use westar::synth::CorruptionKind;
use westar::train::*;

fn tiny_net() -> StudentNet {
    let cfg = NetConfig {
        height: 32,
        width: 32,
        embed_dim: 16,
        blocks: 1,
        mlp_hidden: 32,
        decoder_hidden: 16,
        lora_rank: 2,
        lora_alpha: 4.0,
        ..NetConfig::default()
    };
    StudentNet::new(cfg, 3).unwrap()
}

fn tiny_splits() -> Splits {
    Splits::build(&DataConfig {
        height: 32,
        width: 32,
        n_train: 0,
        n_val: 3,
        n_adapt: 6,
        n_test: 2,
        corruption: CorruptionChoice::Single(CorruptionKind::Fog),
        ..DataConfig::default()
    })
    .unwrap()
}

fn tiny_cfg(components: &str) -> AdaptConfig {
    AdaptConfig {
        batch_size: 3,
        base_lr: 5.0,
        epochs_max: 3,
        patience: 3,
        lora_rank: 2,
        lora_alpha: 4.0,
        min_instance_size: 4,
        components: Components::parse(components).unwrap(),
        ..AdaptConfig::default()
    }
}

/// A few epochs of supervised pretraining on clean scenes disjoint from the
/// adaptation splits; a random network's near-constant output makes the
/// normalized ranking loss badly conditioned.
fn tiny_pretrained() -> StudentNet {
    let data = DataConfig {
        height: 32,
        width: 32,
        n_train: 12,
        corruption: CorruptionChoice::None,
        ..DataConfig::default()
    };
    let scenes: Vec<_> = data
        .split(westar::experiment::Split::Train)
        .unwrap()
        .into_iter()
        .map(|r| r.clean)
        .collect();
    let cfg = PretrainConfig {
        net: tiny_net().config.clone(),
        epochs: 20,
        batch_size: 4,
        ..PretrainConfig::default()
    };
    pretrain_on(&scenes, &cfg).unwrap().0.student
}

fn base_weights(net: &StudentNet) -> Vec<Tensor> {
    net.store
        .iter()
        .filter(|(_, p)| p.kind != ParamKind::Lora)
        .map(|(_, p)| p.value.clone())
        .collect()
}

#[test]
fn disabled_components_leave_parameters_untouched() {
    let net = tiny_net();
    let splits = tiny_splits();
    let cfg = tiny_cfg("baseline");
    let mut state = AdaptState::new(&net, &cfg, 2).unwrap();
    let before = state.clone();
    let stats = adapt_epoch(&mut state, &splits.adapt, &cfg, 1).unwrap();
    assert_eq!(stats.steps, 0);
    assert_eq!(state, before);
}

#[test]
fn lora_adaptation_keeps_base_weights_and_is_deterministic() {
    let net = tiny_net();
    let splits = tiny_splits();
    let cfg = tiny_cfg("st+ws+wr");
    let a = run_adaptation(&net, &splits.adapt, &splits.val, &cfg).unwrap();
    let b = run_adaptation(&net, &splits.adapt, &splits.val, &cfg).unwrap();
    assert_eq!(a.trajectory, b.trajectory);
    assert_eq!(a.best, b.best);

    assert_eq!(base_weights(&a.best.student), base_weights(&net));
    let teacher = a.best.teacher.as_ref().unwrap();
    assert_eq!(base_weights(teacher.net()), base_weights(&net));

    for (i, row) in a.trajectory.iter().enumerate() {
        assert_eq!(row.epoch, i + 1);
        assert!(a.best_val.delta1 >= row.val_delta1);
    }
    let other = run_adaptation(&net, &splits.adapt, &splits.val, &AdaptConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.trajectory, other.trajectory);
}

#[test]
fn zero_patience_stops_one_epoch_after_the_best() {
    let net = tiny_net();
    let splits = tiny_splits();
    let cfg = AdaptConfig {
        epochs_max: 8,
        patience: 0,
        ..tiny_cfg("st")
    };
    let out = run_adaptation(&net, &splits.adapt, &splits.val, &cfg).unwrap();
    let n = out.trajectory.len();
    assert!(n == cfg.epochs_max || n == out.best_epoch + 1, "{n} rows, best {}", out.best_epoch);
}

#[test]
fn overlapping_splits_are_rejected() {
    let net = tiny_net();
    let splits = tiny_splits();
    let val: Vec<EvalSample> = splits
        .adapt
        .iter()
        .take(1)
        .map(|s| EvalSample {
            id: s.id,
            rgb: s.rgb.clone(),
            depth: Tensor::full(&[32, 32], 1.0),
            valid: s.valid.clone(),
        })
        .collect();
    assert!(run_adaptation(&net, &splits.adapt, &val, &tiny_cfg("st")).is_err());
}

#[test]
fn ema_teacher_tracks_after_each_step() {
    let net = tiny_net();
    let splits = tiny_splits();
    let cfg = tiny_cfg("st+wr");
    let mut state = AdaptState::new(&net, &cfg, 2).unwrap();
    let teacher0 = state.teacher.clone();
    let stats = adapt_epoch(&mut state, &splits.adapt, &cfg, 1).unwrap();
    assert_eq!(stats.steps, 2);
    // The adapters moved and so did the teacher, but only part of the way.
    let lora = |n: &StudentNet| -> Vec<Tensor> {
        n.store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Lora)
            .map(|(_, p)| p.value.clone())
            .collect()
    };
    let (s, t, t0) = (lora(&state.student), lora(state.teacher.net()), lora(teacher0.net()));
    assert_ne!(s, t0);
    assert_ne!(t, t0);
    assert_ne!(t, s);
}

#[test]
fn weak_only_training_reduces_the_rank_loss() {
    let net = tiny_pretrained();
    let splits = tiny_splits();
    let cfg = AdaptConfig {
        batch_size: 6,
        base_lr: 0.01,
        epochs_max: 6,
        scope: westar::model::TuneScope::All,
        ..tiny_cfg("ws")
    };
    // Scored on the un-augmented images so only the weights change between
    // measurements.
    let rank_loss = |n: &StudentNet| -> f64 {
        let mut total = 0.0;
        for s in &splits.adapt {
            let mut tape = Tape::new();
            let pred = tape.constant(n.predict(&s.rgb).unwrap());
            let vals = tape.gather(pred, &s.valid.indices()).unwrap();
            let stats = stats_of(&mut tape, vals, DEFAULT_EPSILON).unwrap();
            let phi = normalize_phi(&mut tape, pred, &stats).unwrap();
            let l = weak_loss(&mut tape, phi, &s.labels, cfg.weights.margin_delta).unwrap();
            total += tape.value(l).item();
        }
        total
    };
    let mut state = AdaptState::new(&net, &cfg, 1).unwrap();
    let mut losses = vec![rank_loss(&state.student)];
    for epoch in 1..=5 {
        adapt_epoch(&mut state, &splits.adapt, &cfg, epoch).unwrap();
        losses.push(rank_loss(&state.student));
    }
    assert!(losses[0] > 0.0);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn regularizer_alone_shrinks_adapters() {
    let net = tiny_net();
    let splits = tiny_splits();
    let cfg = tiny_cfg("wr");
    let mut state = AdaptState::new(&net, &cfg, 2).unwrap();
    // Adapters start with a zero factor; give both factors some mass.
    for (_, p) in state.student.store.iter_mut() {
        if p.kind == ParamKind::Lora {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = 0.1 * ((i % 7) as f64 - 3.0);
            }
        }
    }
    let mut reg = Vec::new();
    for epoch in 1..=6 {
        reg.push(adapt_epoch(&mut state, &splits.adapt, &cfg, epoch).unwrap().loss_reg);
    }
    assert!(reg[0] > 0.0);
    for w in reg.windows(2) {
        assert!(w[1] <= w[0], "{reg:?}");
    }
}

#[test]
fn trajectory_csv_round_trip() {
    let rows = vec![
        TrajectoryRow {
            epoch: 1,
            lr: 0.0015625,
            loss_st: 0.25,
            loss_weak: 0.1,
            loss_reg: 1e-7,
            val_delta1: 88.125,
            val_absrel: 9.5,
        },
        TrajectoryRow {
            epoch: 2,
            lr: 0.0,
            loss_st: 1.0 / 3.0,
            loss_weak: 0.0,
            loss_reg: 0.0,
            val_delta1: 90.0,
            val_absrel: 8.0,
        },
    ];
    let text = trajectory_csv(&rows);
    assert!(text.starts_with(TRAJECTORY_HEADER));
    assert_eq!(parse_trajectory_csv(&text).unwrap(), rows);
    assert!(parse_trajectory_csv("epoch\n1\n").is_err());
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let data = DataConfig {
        height: 32,
        width: 32,
        n_train: 6,
        corruption: CorruptionChoice::None,
        ..DataConfig::default()
    };
    let scenes: Vec<_> = data
        .split(westar::experiment::Split::Train)
        .unwrap()
        .into_iter()
        .map(|r| r.clean)
        .collect();
    let cfg = PretrainConfig {
        net: tiny_net().config.clone(),
        epochs: 6,
        batch_size: 3,
        ..PretrainConfig::default()
    };
    let (a, losses) = pretrain_on(&scenes, &cfg).unwrap();
    let (b, _) = pretrain_on(&scenes, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.teacher.is_none());
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
}
