use super::*;
use crate::data::{synth_generate, ClassRef, EpisodeConfig, SourceDataset, SynthSpec};
use crate::model::{weight_index, BackboneConfig, HEAD_WEIGHT, STAGES};
use crate::replay::pq_decode;
use crate::tensor::Tensor;

fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        channels: vec![4, 4, 4, 4, 8],
        ..BackboneConfig::default()
    }
}

fn scenario(episodes: usize, epochs: usize) -> Scenario {
    let (train, test) = synth_generate(&SynthSpec {
        classes: 2 * episodes,
        per_class: 8,
        test_per_class: 4,
        difficulty: 1.0,
        seed: 3,
    })
    .unwrap();
    let eps: Vec<EpisodeConfig> = (0..episodes as u16)
        .map(|e| EpisodeConfig {
            dataset: "s".into(),
            classes: Some(vec![ClassRef::Index(2 * e), ClassRef::Index(2 * e + 1)]),
            epochs,
        })
        .collect();
    let ds = SourceDataset {
        stem: "s".into(),
        train,
        test,
    };
    Scenario::from_datasets("t", 0, vec![ds], &eps, &[]).unwrap()
}

fn opt() -> SgdConfig {
    SgdConfig {
        batch_size: 6,
        ..SgdConfig::default()
    }
}

struct Trace {
    model: Model,
    state: TrainState,
    losses: Vec<EpochLoss>,
}

fn train(cfg: &StrategyConfig, opt: &SgdConfig, s: &Scenario, seed: u64) -> Trace {
    let mut model = Model::build(tiny_backbone(), seed).unwrap();
    let mut state = TrainState::new(cfg, seed);
    let mut losses = Vec::new();
    for e in 0..s.episodes.len() {
        losses.extend(train_episode(cfg, opt, &mut model, &mut state, s, e, seed).unwrap());
    }
    Trace {
        model,
        state,
        losses,
    }
}

fn same_trajectory(a: &Trace, b: &Trace) {
    assert_eq!(a.model.checksum(), b.model.checksum());
    let la: Vec<u64> = a.losses.iter().map(|l| l.loss.to_bits()).collect();
    let lb: Vec<u64> = b.losses.iter().map(|l| l.loss.to_bits()).collect();
    assert_eq!(la, lb);
}

#[test]
fn zero_learning_rate_leaves_model_unchanged() {
    let s = scenario(2, 2);
    let frozen = SgdConfig {
        learning_rate: 0.0,
        ..opt()
    };
    for variant in Variant::ALL {
        if variant == Variant::Joint {
            continue;
        }
        let mut cfg = StrategyConfig::for_variant(variant);
        cfg.remind = RemindConfig {
            k: 4,
            ..RemindConfig::default()
        };
        cfg.nispa.rewire_fraction = 0.0;
        let t = train(&cfg, &frozen, &s, 1);
        let mut fresh = Model::build(tiny_backbone(), 1).unwrap();
        register_classes(&mut fresh, &[0, 1, 2, 3]).unwrap();
        if variant == Variant::Nispa {
            NispaState::init(&mut fresh, &cfg.nispa, &mut stream_rng(1, stream::NISPA, 0));
        }
        let same = fresh
            .params()
            .iter()
            .zip(t.model.params())
            .all(|(a, b)| a.tensor.data() == b.tensor.data());
        assert!(same, "{variant:?}");
        assert_eq!(t.losses.len(), 4, "{variant:?}");
        assert!(t.losses.iter().all(|l| l.loss.is_finite()));
    }
}

#[test]
fn importance_of_a_linear_unit_matches_hand_gradient() {
    let w = 1.5f32;
    let xs = [1.0f32, 2.0];
    let omega = mean_abs_grad(xs.len(), |s, tape| {
        let wv = tape.leaf(
            Tensor::new(vec![1, 1], vec![w])
                .unwrap()
                .with_requires_grad(true),
        );
        let b = tape.constant(Tensor::zeros(vec![1]));
        let x = tape.constant(Tensor::new(vec![1, 1], vec![xs[s]]).unwrap());
        let y = tape.linear(x, wv, b)?;
        let out = tape.sum_squares(y)?;
        Ok((vec![wv], out))
    })
    .unwrap();
    assert!((omega[0][0] - (2.0 * w).abs() * 2.5).abs() < 1e-6);

    let twice = mean_abs_grad(4, |s, tape| {
        let wv = tape.leaf(
            Tensor::new(vec![1, 1], vec![w])
                .unwrap()
                .with_requires_grad(true),
        );
        let b = tape.constant(Tensor::zeros(vec![1]));
        let x = tape.constant(Tensor::new(vec![1, 1], vec![xs[s % 2]]).unwrap());
        let y = tape.linear(x, wv, b)?;
        Ok((vec![wv], tape.sum_squares(y)?))
    })
    .unwrap();
    assert_eq!(omega, twice);
    assert!(matches!(
        mean_abs_grad(0, |_, _| unreachable!()),
        Err(StrategyError::EmptyStream)
    ));
}

#[test]
fn penalty_matches_hand_arithmetic() {
    let mut tape = Tape::new();
    let theta = tape.leaf(
        Tensor::new(vec![2], vec![2.0, 0.0])
            .unwrap()
            .with_requires_grad(true),
    );
    let anchor = vec![vec![1.0, 1.0]];
    let pen = penalty_terms(&mut tape, &[theta], &[vec![1.0, 2.0]], &anchor)
        .unwrap()
        .unwrap();
    let pen = tape.scale(pen, 0.5).unwrap();
    assert!((tape.value(pen).item() - 1.5).abs() < 1e-6);
    let at_anchor = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
    let zero = penalty_terms(&mut tape, &[at_anchor], &[vec![1.0, 2.0]], &anchor)
        .unwrap()
        .unwrap();
    assert_eq!(tape.value(zero).item(), 0.0);
    assert!(
        penalty_terms(&mut tape, &[theta], &[vec![0.0, 0.0]], &anchor)
            .unwrap()
            .is_none()
    );
}

#[test]
fn zero_weights_have_zero_importance() {
    let s = scenario(1, 1);
    let mut m = Model::build(tiny_backbone(), 0).unwrap();
    register_classes(&mut m, &[0, 1]).unwrap();
    for p in m.params_mut() {
        p.tensor.data_mut().fill(0.0);
    }
    let omega = mas_importance(&m, &s, 0).unwrap();
    assert!(omega.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn importance_is_nonnegative_and_accumulates() {
    let s = scenario(3, 1);
    let cfg = StrategyConfig::for_variant(Variant::Mas);
    let mut model = Model::build(tiny_backbone(), 2).unwrap();
    let mut state = TrainState::new(&cfg, 2);
    let mut prev: Option<Vec<Vec<f32>>> = None;
    for e in 0..3 {
        train_episode(&cfg, &opt(), &mut model, &mut state, &s, e, 2).unwrap();
        for (w, p) in state.omega.iter().zip(model.params()) {
            assert_eq!(w.len(), p.tensor.numel());
            assert!(w.iter().all(|&v| v >= 0.0));
        }
        if let Some(prev) = &prev {
            for (old, new) in prev.iter().zip(&state.omega) {
                assert!(old.iter().zip(new).all(|(a, b)| b >= a));
            }
        }
        assert_eq!(
            state.anchor[HEAD_WEIGHT],
            model.params()[HEAD_WEIGHT].tensor.data()
        );
        prev = Some(state.omega.clone());
    }

    let mut drifted = state.clone();
    drifted.omega[0].push(0.0);
    drifted.anchor[0].push(0.0);
    assert!(matches!(
        mas::align(&model, &mut drifted),
        Err(StrategyError::ShapeDrift { .. })
    ));
}

#[test]
fn equivalence_reductions() {
    let s = scenario(2, 2);
    let naive = train(&StrategyConfig::default(), &opt(), &s, 5);
    let zeroed = |variant| StrategyConfig {
        variant,
        buffer_capacity: 0,
        der_alpha: 0.0,
        der_beta: 0.0,
        mas_lambda: 0.0,
        ..StrategyConfig::default()
    };
    for v in [Variant::Mas, Variant::MasR, Variant::Der, Variant::DerPp] {
        same_trajectory(&naive, &train(&zeroed(v), &opt(), &s, 5));
    }
    let der_pp = StrategyConfig {
        variant: Variant::DerPp,
        der_beta: 0.0,
        ..StrategyConfig::default()
    };
    let der = StrategyConfig {
        variant: Variant::Der,
        ..StrategyConfig::default()
    };
    let a = train(&der_pp, &opt(), &s, 5);
    let b = train(&der, &opt(), &s, 5);
    same_trajectory(&a, &b);
    assert_eq!(a.state.buffer, b.state.buffer);

    let mas = train(&StrategyConfig::for_variant(Variant::Mas), &opt(), &s, 5);
    let mas_r_empty = StrategyConfig {
        variant: Variant::MasR,
        buffer_capacity: 0,
        ..StrategyConfig::default()
    };
    same_trajectory(&mas, &train(&mas_r_empty, &opt(), &s, 5));
    let mas_r = train(&StrategyConfig::for_variant(Variant::MasR), &opt(), &s, 5);
    assert_ne!(mas.model.checksum(), mas_r.model.checksum());
}

#[test]
fn replay_buffers_respect_capacity() {
    let s = scenario(3, 1);
    for v in [Variant::Der, Variant::DerPp, Variant::MasR] {
        let cfg = StrategyConfig {
            variant: v,
            buffer_capacity: 5,
            ..StrategyConfig::default()
        };
        let t = train(&cfg, &opt(), &s, 0);
        assert_eq!(t.state.buffer.len(), 5);
        assert_eq!(t.state.buffer.seen(), 48);
        let with_logits = t.state.buffer.items().iter().all(|it| it.logits.is_some());
        assert_eq!(with_logits, v != Variant::MasR);
    }
    assert_eq!(replay_count(&StrategyConfig::default(), 64), 64);
    let half = StrategyConfig {
        replay_ratio: 0.5,
        ..StrategyConfig::default()
    };
    assert_eq!(replay_count(&half, 7), 4);
}

#[test]
fn der_loss_matches_hand_arithmetic() {
    let s = scenario(1, 1);
    let cfg = StrategyConfig {
        variant: Variant::Der,
        der_alpha: 0.3,
        ..StrategyConfig::default()
    };
    let mut model = Model::build(tiny_backbone(), 4).unwrap();
    register_classes(&mut model, &[0, 1]).unwrap();
    let samples = scenario_train(&s);
    let mut state = TrainState::new(&cfg, 4);
    let z = [0.7f32, -0.2];
    let stored = ReplayItem {
        payload: Payload::Raw(s.image(&samples[1]).to_vec()),
        label: samples[1].label,
        logits: Some(LogitSnapshot {
            classes: vec![0, 1],
            values: z.to_vec(),
        }),
        episode: 0,
        source: samples[1].index,
    };
    state.buffer.offer(stored, 0.0, &mut state.reservoir_rng);

    let batch = s.batch(&samples[..1]);
    let h = model.forward(&batch.images, Mode::Eval).unwrap();
    let ce = cross_entropy(h.data(), batch.labels[0]);
    let replayed = model
        .forward(&s.batch(&samples[1..2]).images, Mode::Eval)
        .unwrap();
    let mse = replayed
        .data()
        .iter()
        .zip(z)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f32>()
        / 2.0;

    let frozen = SgdConfig {
        learning_rate: 0.0,
        ..opt()
    };
    let mut sgd = Sgd::new(frozen);
    let terms = StepTerms::for_config(&cfg);
    let got = raw_step(&cfg, terms, &mut model, &mut state, &mut sgd, &s, batch, 0).unwrap();
    let want = ce + 0.3 * mse as f64;
    assert!((got - want).abs() < 1e-5, "{got} vs {want}");

    let mut empty = TrainState::new(&cfg, 4);
    let batch = s.batch(&samples[..1]);
    let plain = raw_step(&cfg, terms, &mut model, &mut empty, &mut sgd, &s, batch, 0).unwrap();
    assert!((plain - ce).abs() < 1e-6);
}

fn scenario_train(s: &Scenario) -> Vec<Sample> {
    s.samples(0, Split::Train)
}

fn cross_entropy(logits: &[f32], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let z: f64 = logits.iter().map(|&v| (v as f64 - m).exp()).sum();
    -(logits[target] as f64 - m - z.ln())
}

#[test]
fn snapshots_only_cover_classes_that_existed() {
    let mut model = Model::build(tiny_backbone(), 0).unwrap();
    register_classes(&mut model, &[0, 1, 2]).unwrap();
    let item = ReplayItem {
        payload: Payload::Raw(vec![]),
        label: 0,
        logits: Some(LogitSnapshot {
            classes: vec![1, 0],
            values: vec![5.0, 6.0],
        }),
        episode: 0,
        source: 0,
    };
    let (target, mask) = snapshot_targets(&model, &[&item]);
    assert_eq!(target, vec![6.0, 5.0, 0.0]);
    assert_eq!(mask, vec![true, true, false]);
}

fn remind_config() -> StrategyConfig {
    StrategyConfig {
        variant: Variant::Remind,
        buffer_capacity: 10,
        remind: RemindConfig {
            split: 3,
            m: 32,
            k: 4,
            iterations: 5,
            max_codebook_samples: 1000,
        },
        ..StrategyConfig::default()
    }
}

#[test]
fn remind_freezes_prefix_and_stores_codes() {
    let s = scenario(2, 1);
    let cfg = remind_config();
    let mut model = Model::build(tiny_backbone(), 6).unwrap();
    let mut state = TrainState::new(&cfg, 6);
    train_episode(&cfg, &opt(), &mut model, &mut state, &s, 0, 6).unwrap();
    assert_eq!(model.frozen_prefix(), Some(3));
    let prefix = |m: &Model| -> Vec<Vec<f32>> {
        m.params()[..weight_index(4)]
            .iter()
            .map(|p| p.tensor.data().to_vec())
            .collect()
    };
    let before = prefix(&model);
    let book = state.codebook.clone().unwrap();
    let report = state.codebook_report.clone().unwrap();
    let samples = s.samples(0, Split::Train);
    assert_eq!(state.buffer.len(), 10);
    for it in state.buffer.items() {
        assert_eq!(it.payload.bytes().len(), 32);
        assert!(matches!(it.payload, Payload::Latent(_)));
        let pos = samples.iter().position(|x| x.index == it.source).unwrap();
        let feats = model
            .extract_features(&s.batch(&samples[pos..pos + 1]).images, 3)
            .unwrap();
        let rec = pq_decode(&book, it.payload.bytes()).unwrap();
        let err: f64 = rec
            .iter()
            .zip(feats.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        assert!((err - report.point_errors[pos]).abs() <= 1e-6 * err.max(1.0));
    }
    let head_before = model.params()[HEAD_WEIGHT].tensor.data().to_vec();
    train_episode(&cfg, &opt(), &mut model, &mut state, &s, 1, 6).unwrap();
    assert_eq!(prefix(&model), before);
    assert_ne!(
        model.params()[HEAD_WEIGHT].tensor.data()[..head_before.len()],
        head_before[..]
    );
    assert_eq!(state.buffer.seen(), 32);

    let mut lost = TrainState::new(&cfg, 6);
    lost.episodes_completed = 1;
    assert!(matches!(
        train_episode(&cfg, &opt(), &mut model, &mut lost, &s, 1, 6),
        Err(StrategyError::StateMismatch(_))
    ));
}

fn nispa_config(rewire_fraction: f32) -> StrategyConfig {
    StrategyConfig {
        variant: Variant::Nispa,
        nispa: NispaConfig {
            rewire_fraction,
            ..NispaConfig::default()
        },
        ..StrategyConfig::default()
    }
}

#[test]
fn nispa_rewire_preserves_counts_and_locks_frozen_units() {
    let s = scenario(2, 1);
    let cfg = nispa_config(0.2);
    let mut model = Model::build(tiny_backbone(), 7).unwrap();
    let mut state = TrainState::new(&cfg, 7);
    train_episode(&cfg, &opt(), &mut model, &mut state, &s, 0, 7).unwrap();
    let nispa = state.nispa.clone().unwrap();
    let total: usize = (1..=STAGES)
        .map(|st| model.params()[weight_index(st)].tensor.numel())
        .sum();
    let expected_active: usize = (1..=STAGES)
        .map(|st| {
            let n = model.params()[weight_index(st)].tensor.numel();
            n - (0.5 * n as f64).round() as usize
        })
        .sum();
    assert_eq!(nispa.active_connections(), expected_active);
    assert!(nispa.active_connections() < total);
    let frozen_rows = |m: &Model| -> Vec<Vec<f32>> {
        let mut rows = Vec::new();
        for st in 1..=STAGES {
            let w = &m.params()[weight_index(st)].tensor;
            let per = w.numel() / w.shape()[0];
            for (u, &f) in nispa.frozen_units(st).iter().enumerate() {
                if f {
                    rows.push(w.data()[u * per..(u + 1) * per].to_vec());
                }
            }
        }
        rows
    };
    let locked = frozen_rows(&model);
    assert!(!locked.is_empty());
    train_episode(&cfg, &opt(), &mut model, &mut state, &s, 1, 7).unwrap();
    assert_eq!(frozen_rows(&model), locked);
    assert_eq!(
        state.nispa.as_ref().unwrap().active_connections(),
        expected_active
    );
    for st in 1..=STAGES {
        let mask = state.nispa.as_ref().unwrap().mask(st);
        let w = model.params()[weight_index(st)].tensor.data();
        assert!(mask.iter().zip(w).all(|(&on, &v)| on || v == 0.0));
    }
}

#[test]
fn nispa_without_rewiring_keeps_masks() {
    let s = scenario(1, 1);
    let cfg = nispa_config(0.0);
    let mut model = Model::build(tiny_backbone(), 8).unwrap();
    let mut state = TrainState::new(&cfg, 8);
    let reference = NispaState::init(
        &mut model.clone(),
        &cfg.nispa,
        &mut stream_rng(8, stream::NISPA, 0),
    );
    train_episode(&cfg, &opt(), &mut model, &mut state, &s, 0, 8).unwrap();
    let got = state.nispa.unwrap();
    for st in 1..=STAGES {
        assert_eq!(got.mask(st), reference.mask(st));
    }
}

#[test]
fn nispa_rewire_needs_free_slots() {
    let mut model = Model::build(tiny_backbone(), 0).unwrap();
    let dense = NispaConfig {
        sparsity: 0.0,
        ..NispaConfig::default()
    };
    let mut rng = stream_rng(0, stream::NISPA, 0);
    let mut state = NispaState::init(&mut model, &dense, &mut rng);
    assert!(matches!(
        state.rewire(&mut model, 0.5, 0.01, &mut rng),
        Err(StrategyError::Rewire(_))
    ));
}

#[test]
fn joint_with_one_episode_is_naive() {
    let s = scenario(1, 2);
    let cfg = StrategyConfig::for_variant(Variant::Joint);
    let mut joint = Model::build(tiny_backbone(), 9).unwrap();
    let jl = joint_train(&cfg, &opt(), &mut joint, &s, 9).unwrap();
    let naive = train(&StrategyConfig::default(), &opt(), &s, 9);
    assert_eq!(joint.checksum(), naive.model.checksum());
    assert_eq!(jl, naive.losses);

    let three = scenario(3, 1);
    let mut m = Model::build(tiny_backbone(), 9).unwrap();
    joint_train(&cfg, &opt(), &mut m, &three, 9).unwrap();
    assert_eq!(m.head_classes(), &[0, 1, 2, 3, 4, 5]);
    let mut m = Model::build(tiny_backbone(), 9).unwrap();
    let mut st = TrainState::new(&cfg, 9);
    assert!(train_episode(&cfg, &opt(), &mut m, &mut st, &three, 0, 9).is_err());
}

#[test]
fn config_defaults_and_validation() {
    let cfg: StrategyConfig = serde_json::from_str(r#"{"variant": "der_pp"}"#).unwrap();
    assert_eq!(cfg.variant, Variant::DerPp);
    assert_eq!(cfg.buffer_capacity, 200);
    assert_eq!(
        (cfg.der_alpha, cfg.der_beta, cfg.replay_ratio),
        (0.5, 0.5, 1.0)
    );
    assert_eq!(cfg.selection, Selection::Reservoir);
    let echo = serde_json::to_value(&cfg).unwrap();
    assert_eq!(echo["remind"]["m"], 32);
    assert_eq!(echo["nispa"]["sparsity"], 0.5);
    assert!(serde_json::from_str::<StrategyConfig>(r#"{"alpha": 1}"#).is_err());
    for v in Variant::ALL {
        assert_eq!(Variant::parse(v.name()), Some(v));
        let json = serde_json::to_value(v).unwrap();
        assert_eq!(json, v.name());
    }
    let bad = StrategyConfig {
        der_alpha: -1.0,
        ..StrategyConfig::default()
    };
    assert!(matches!(bad.validate(), Err(StrategyError::Config(_))));
    let bad = StrategyConfig {
        remind: RemindConfig {
            k: 300,
            ..RemindConfig::default()
        },
        ..StrategyConfig::default()
    };
    assert!(bad.validate().is_err());
    assert!(StrategyConfig::default().validate().is_ok());
}

#[test]
fn unstable_penalty_is_reported_as_divergence() {
    let s = scenario(2, 2);
    let cfg = StrategyConfig {
        variant: Variant::Mas,
        mas_lambda: 1e20,
        ..StrategyConfig::default()
    };
    let mut model = Model::build(tiny_backbone(), 1).unwrap();
    let mut state = TrainState::new(&cfg, 1);
    train_episode(&cfg, &opt(), &mut model, &mut state, &s, 0, 1).unwrap();
    let err = train_episode(&cfg, &opt(), &mut model, &mut state, &s, 1, 1).unwrap_err();
    assert!(
        matches!(err, StrategyError::Diverged { episode: 2, .. }),
        "{err}"
    );
}
