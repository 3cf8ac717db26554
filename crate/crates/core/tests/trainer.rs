use evtplus::events::{
    synth_depth_scene, synth_gesture_stream, DepthSceneConfig, Event, EventStream, Polarity,
    SensorGeometry,
};
use evtplus::model::{window_inputs, Model, ModelConfig};
use evtplus::nn::{GradStore, ParamStore, Tensor};
use evtplus::objectives::DepthLossConfig;
use evtplus::tokenizer::TokenizerConfig;
use evtplus::trainer::{
    augment_stream, clip_gradients, decode_checkpoint, drop_tokens, encode_checkpoint,
    evaluate_clf, evaluate_depth_constant, history_csv, sample_spatial_crop, sample_temporal_crop,
    split_indices, AdamW, AdamWConfig, AugmentConfig, ClfDataset, ClfExample, DepthDataset,
    DepthExample, EpochRecord, TrainConfig, TrainError, Trainer,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn clf_tokenizer() -> TokenizerConfig {
    TokenizerConfig::classification(SensorGeometry::new(40, 40))
}

fn clf_data(n: usize, classes: u32, seed: u64) -> ClfDataset {
    let tok = clf_tokenizer();
    let examples = (0..n)
        .map(|i| {
            let label = i as u32 % classes;
            let stream =
                synth_gesture_stream(label, seed + i as u64, tok.geometry, 120_000, 3.0).unwrap();
            ClfExample {
                stream,
                label: label as usize,
            }
        })
        .collect();
    ClfDataset {
        tokenizer: tok,
        t_start: 0,
        t_stop: 120_000,
        examples,
    }
}

fn tiny_clf_model(classes: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        dim: 16,
        latents: 4,
        heads: 2,
        heads_pre_dec: 2,
        dropout: 0.1,
        ..ModelConfig::classification(&clf_tokenizer(), classes)
    };
    Model::new(cfg, seed).unwrap()
}

fn depth_tokenizer() -> TokenizerConfig {
    TokenizerConfig {
        patch_size: 8,
        ..TokenizerConfig::depth(SensorGeometry::new(24, 32))
    }
}

fn depth_data(with_images: bool) -> DepthDataset {
    let tok = depth_tokenizer();
    let scene = DepthSceneConfig::default();
    let stream = synth_depth_scene(3, tok.geometry, 1_000_000, &scene).unwrap();
    let loss = DepthLossConfig {
        max_depth: 20.0,
        ..DepthLossConfig::default()
    };
    let mut d = DepthDataset::from_streams(&[stream], &tok, 200_000, with_images, &loss).unwrap();
    d.examples.truncate(4);
    d
}

fn tiny_depth_model(with_images: bool) -> Model {
    let cfg = ModelConfig {
        dim: 16,
        latents: 4,
        heads: 2,
        heads_pre_dec: 2,
        n1: 1,
        dropout: 0.0,
        ..ModelConfig::depth(&depth_tokenizer(), with_images)
    };
    Model::new(cfg, 1).unwrap()
}

fn store_with(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[values.len()], values.to_vec()).unwrap());
    s
}

fn grads_with(store: &ParamStore, g: &[f64]) -> GradStore {
    let mut gs = GradStore::zeros_like(store);
    let id = store.id("w").unwrap();
    gs.get_mut(id).copy_from_slice(g);
    gs
}

#[test]
fn adamw_zero_gradient_only_decays() {
    let mut s = store_with(&[2.0, -3.0]);
    let cfg = AdamWConfig {
        weight_decay: 0.01,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(&s, cfg);
    let g = grads_with(&s, &[0.0, 0.0]);
    opt.update(&mut s, &g).unwrap();
    let f = 1.0 - 1e-3 * 0.01;
    assert_eq!(s.get(s.id("w").unwrap()).data(), &[2.0 * f, -3.0 * f]);
    assert_eq!(opt.step, 1);
}

#[test]
fn adamw_first_step_matches_hand_formula() {
    let w0 = [0.3, -0.7];
    let g = [0.5, -2.0];
    let mut s = store_with(&w0);
    let mut opt = AdamW::new(
        &s,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    let gs = grads_with(&s, &g);
    opt.update(&mut s, &gs).unwrap();
    // m = 0.1 g, v = 0.001 g², bias corrections 0.1 and 0.001 give back g and |g|.
    let expected = [
        0.3 - 1e-3 * 0.5 / (0.5 + 1e-8),
        -0.7 + 1e-3 * 2.0 / (2.0 + 1e-8),
    ];
    let got = s.get(s.id("w").unwrap()).data();
    for (a, b) in got.iter().zip(expected) {
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }
}

#[test]
fn adamw_matches_scalar_simulation() {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    let w0 = [1.0, -0.25];
    let g = [0.2, 0.05];
    let mut s = store_with(&w0);
    let mut opt = AdamW::new(
        &s,
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
    );
    for _ in 0..2 {
        let gs = grads_with(&s, &g);
        opt.update(&mut s, &gs).unwrap();
    }
    for j in 0..2 {
        let (mut w, mut m, mut v) = (w0[j], 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g[j];
            v = b2 * v + (1.0 - b2) * g[j] * g[j];
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let got = s.get(s.id("w").unwrap()).data()[j];
        assert!((got - w).abs() <= 1e-12, "{got} vs {w}");
    }
}

#[test]
fn adamw_rejects_non_finite_gradient_without_touching_params() {
    let mut s = store_with(&[1.0, 2.0]);
    let before = s.clone();
    let mut opt = AdamW::new(&s, AdamWConfig::default());
    let gs = grads_with(&s, &[0.1, f64::NAN]);
    let err = opt.update(&mut s, &gs).unwrap_err();
    assert!(
        matches!(
            err,
            TrainError::NonFiniteGradient {
                index: 1,
                step: 0,
                ..
            }
        ),
        "{err}"
    );
    assert!(s.bit_equal(&before));
    assert_eq!(opt.step, 0);
}

#[test]
fn clipping_cases() {
    let s = store_with(&[0.0, 0.0]);
    let mut g = grads_with(&s, &[0.3, 0.4]);
    assert_eq!(clip_gradients(&mut g, 1.0), 0.5);
    assert_eq!(g.get(s.id("w").unwrap()), &[0.3, 0.4]);
    let mut g = grads_with(&s, &[6.0, 8.0]);
    assert_eq!(clip_gradients(&mut g, 1.0), 10.0);
    assert!((g.global_norm() - 1.0).abs() < 1e-12);
    let w = g.get(s.id("w").unwrap());
    assert!((w[0] - 0.6).abs() < 1e-15 && (w[1] - 0.8).abs() < 1e-15);
}

proptest! {
    #[test]
    fn clipping_never_exceeds_bound_or_increases_norm(
        vals in prop::collection::vec(-1e3f64..1e3, 1..20),
        max in 1e-3f64..10.0,
    ) {
        let s = store_with(&vals);
        let mut g = grads_with(&s, &vals);
        let before = clip_gradients(&mut g, max);
        let after = g.global_norm();
        prop_assert!(after <= max + 1e-9);
        prop_assert!(after <= before + 1e-12);
    }

    #[test]
    fn spatial_crop_keeps_relative_offsets(seed in 0u64..500, frac in 0.01f64..0.9) {
        let geo = SensorGeometry::new(40, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crop = sample_spatial_crop(geo, 10, frac, &mut rng);
        prop_assert!(crop.width % 10 == 0 && crop.height % 10 == 0);
        prop_assert!(crop.src.0 + crop.width <= geo.width && crop.dst.1 + crop.height <= geo.height);
        let events: Vec<Event> = (0..200u16)
            .map(|i| Event::new(i * 7 % 50, i * 13 % 40, i as i64, Polarity::Positive))
            .collect();
        let stream = EventStream::new(geo, events.clone()).unwrap().with_label(2);
        let out = crop.apply(&stream);
        prop_assert_eq!(out.label, Some(2));
        let kept: Vec<&Event> = events
            .iter()
            .filter(|e| {
                e.x >= crop.src.0 && e.x < crop.src.0 + crop.width && e.y >= crop.src.1 && e.y < crop.src.1 + crop.height
            })
            .collect();
        prop_assert_eq!(kept.len(), out.events.len());
        for (a, b) in kept.iter().zip(&out.events) {
            prop_assert!(geo.contains(b.x, b.y));
            prop_assert_eq!(b.x as i32 - a.x as i32, crop.dst.0 as i32 - crop.src.0 as i32);
            prop_assert_eq!(b.y as i32 - a.y as i32, crop.dst.1 as i32 - crop.src.1 as i32);
            prop_assert_eq!((b.t, b.p), (a.t, a.p));
        }
    }

    #[test]
    fn temporal_crop_is_contiguous_and_long_enough(n in 1usize..40, frac in 0.0f64..0.99, seed in 0u64..100) {
        let span = sample_temporal_crop(n, frac, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(span.end <= n && span.start < span.end);
        prop_assert!(span.len() as f64 >= ((1.0 - frac) * n as f64).ceil().max(1.0));
    }
}

#[test]
fn zero_rate_augmentation_is_identity() {
    let data = clf_data(2, 4, 7);
    let ex = &data.examples[1];
    let plain = window_inputs(&ex.stream, &data.tokenizer, 0, 120_000, false).unwrap();
    let aug = AugmentConfig {
        repetitions: 2,
        ..AugmentConfig::none()
    };
    let got = augment_stream(
        &ex.stream,
        &data.tokenizer,
        (0, 120_000),
        false,
        &aug,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    assert_eq!(got, plain);
}

#[test]
fn full_drop_rate_removes_every_token() {
    let data = clf_data(1, 4, 3);
    let mut w = data.windows(0).unwrap();
    assert!(w.iter().any(|w| !w.events.is_empty()));
    drop_tokens(&mut w, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(w.iter().all(|w| w.events.is_empty()));
}

#[test]
fn empty_crop_falls_back_to_unaugmented() {
    // One event in the top-left corner: most crops lose it.
    let geo = SensorGeometry::new(40, 40);
    let tok = TokenizerConfig {
        activation_pct: 1.0,
        ..TokenizerConfig::classification(geo)
    };
    let stream = EventStream::new(geo, vec![Event::new(0, 0, 10, Polarity::Positive)]).unwrap();
    let aug = AugmentConfig {
        spatial_crop: 0.9,
        ..AugmentConfig::none()
    };
    let plain = window_inputs(&stream, &tok, 0, 48_000, false).unwrap();
    for seed in 0..50 {
        let got = augment_stream(
            &stream,
            &tok,
            (0, 48_000),
            false,
            &aug,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap();
        assert!(got.iter().any(|w| !w.events.is_empty()), "seed {seed}");
        assert!(got.len() == plain.len());
    }
}

#[test]
fn classifier_smoke_one_epoch() {
    let data = clf_data(4, 4, 11);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(tiny_clf_model(4, 0), cfg).unwrap();
    let mut seen = Vec::new();
    let hist = t
        .fit_clf(&data, Some(&data), &mut |r| seen.push(r.clone()))
        .unwrap();
    assert_eq!(hist.len(), 1);
    assert_eq!(hist, seen);
    assert_eq!(hist[0].step, 2);
    assert!(hist[0].train_loss.is_finite());
    let acc = hist[0].val_metric.unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let csv = history_csv(&hist, "val_accuracy");
    assert!(csv.starts_with("epoch,step,train_loss,val_accuracy\n1,2,"));
}

#[test]
fn classifier_overfits_fixed_batch() {
    let data = clf_data(4, 2, 21);
    let cfg = TrainConfig {
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(tiny_clf_model(2, 4), cfg).unwrap();
    let idx = [0, 1, 2, 3];
    let losses: Vec<f64> = (0..50).map(|_| t.clf_step(&data, &idx).unwrap()).collect();
    let tail = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(
        tail < 0.6 * losses[0],
        "first {} last five {tail}",
        losses[0]
    );
    assert_eq!(evaluate_clf(&t.model, &data).unwrap(), 1.0);
}

#[test]
fn depth_smoke_and_overfit() {
    let data = depth_data(true);
    assert_eq!(data.len(), 4);
    assert!(data.examples.iter().all(|e| e.windows.len() == 4));
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        depth_loss: DepthLossConfig {
            max_depth: 20.0,
            ..DepthLossConfig::default()
        },
        augment: AugmentConfig {
            spatial_crop: 0.0,
            temporal_crop: 0.0,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(tiny_depth_model(true), cfg.clone()).unwrap();
    let hist = t.fit_depth(&data, Some(&data), &mut |_| {}).unwrap();
    assert!(hist[0].train_loss.is_finite() && hist[0].val_metric.unwrap().is_finite());

    let cfg = TrainConfig {
        augment: AugmentConfig::none(),
        ..cfg
    };
    let mut t = Trainer::new(tiny_depth_model(true), cfg).unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|_| t.depth_step(&data, &[0, 1, 2, 3]).unwrap())
        .collect();
    let tail = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(
        tail < 0.6 * losses[0],
        "first {} last five {tail}",
        losses[0]
    );
}

#[test]
fn constant_class_model_scores_one_over_classes() {
    let data = clf_data(8, 4, 5);
    let mut m = tiny_clf_model(4, 2);
    let w = m.classifier.as_ref().unwrap().out.weight;
    let b = m.classifier.as_ref().unwrap().out.bias.unwrap();
    m.params.get_mut(w).data_mut().fill(0.0);
    m.params
        .get_mut(b)
        .data_mut()
        .copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
    assert_eq!(evaluate_clf(&m, &data).unwrap(), 0.25);
}

#[test]
fn accuracy_is_order_invariant() {
    let data = clf_data(8, 4, 9);
    let m = tiny_clf_model(4, 6);
    let acc = evaluate_clf(&m, &data).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let mut rev = data.clone();
    rev.examples.reverse();
    assert_eq!(evaluate_clf(&m, &rev).unwrap(), acc);
}

#[test]
fn depth_metric_closed_forms() {
    let n = 6;
    let mk = |d: f32| DepthExample {
        windows: vec![],
        depth: vec![d; n],
        target: vec![0.0; n],
        mask: vec![true; n],
    };
    let data = DepthDataset {
        height: 2,
        width: 3,
        examples: vec![mk(5.0)],
    };
    assert_eq!(
        evaluate_depth_constant(&data, 5.0, &[10.0, 30.0]),
        vec![Some(0.0), Some(0.0)]
    );
    assert_eq!(
        evaluate_depth_constant(&data, 7.5, &[10.0]),
        vec![Some(2.5)]
    );
    assert_eq!(
        evaluate_depth_constant(&data, 7.5, &[5.0, 4.0]),
        vec![None, None]
    );
    let two = DepthDataset {
        examples: vec![mk(5.0), mk(25.0)],
        ..data
    };
    assert_eq!(
        evaluate_depth_constant(&two, 10.0, &[10.0, 30.0]),
        vec![Some(5.0), Some(10.0)]
    );
    assert_eq!(two.mean_depth(), Some(15.0));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let data = clf_data(4, 4, 1);
    let mut t = Trainer::new(
        tiny_clf_model(4, 3),
        TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    t.clf_step(&data, &[0, 1]).unwrap();
    let bytes = encode_checkpoint(&t.model, Some(&t.optimizer));
    let (m, opt) = decode_checkpoint(&bytes).unwrap();
    assert!(m.params.bit_equal(&t.model.params));
    assert_eq!(opt.as_ref(), Some(&t.optimizer));
    let (_, none) = decode_checkpoint(&encode_checkpoint(&t.model, None)).unwrap();
    assert!(none.is_none());
    let mut bad = bytes.clone();
    bad[1] ^= 0xff;
    assert!(decode_checkpoint(&bad).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes;
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());
}

#[test]
fn resumed_training_is_bit_identical() {
    let data = clf_data(6, 4, 13);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let mut straight = Trainer::new(tiny_clf_model(4, 8), cfg.clone()).unwrap();
    straight.fit_clf(&data, None, &mut |_| {}).unwrap();
    assert_eq!(straight.optimizer.step, 4);

    let mut first = Trainer::new(
        tiny_clf_model(4, 8),
        TrainConfig {
            epochs: 1,
            ..cfg.clone()
        },
    )
    .unwrap();
    first.fit_clf(&data, None, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.evtc");
    evtplus::trainer::save_checkpoint(&path, &first.model, Some(&first.optimizer)).unwrap();
    let (m, opt) = evtplus::trainer::load_checkpoint(&path).unwrap();
    let mut resumed = Trainer::with_optimizer(m, opt.unwrap(), cfg).unwrap();
    resumed
        .clf_step(&data, &resumed.batch_indices(data.len(), 2))
        .unwrap();
    resumed.fit_clf(&data, None, &mut |_| {}).unwrap();
    assert_eq!(resumed.optimizer.step, 4);
    assert!(resumed.model.params.bit_equal(&straight.model.params));
    assert_eq!(resumed.optimizer, straight.optimizer);
}

#[test]
fn training_is_deterministic() {
    let data = clf_data(4, 4, 17);
    let run = || {
        let mut t = Trainer::new(
            tiny_clf_model(4, 5),
            TrainConfig {
                epochs: 1,
                batch_size: 2,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        t.fit_clf(&data, None, &mut |_| {}).unwrap();
        encode_checkpoint(&t.model, Some(&t.optimizer))
    };
    assert_eq!(run(), run());
}

#[test]
fn positional_table_is_trained() {
    let data = clf_data(4, 4, 2);
    let mut t = Trainer::new(
        tiny_clf_model(4, 1),
        TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let before = t.model.params.get(t.model.positions).clone();
    t.clf_step(&data, &[0, 1, 2, 3]).unwrap();
    assert_ne!(t.model.params.get(t.model.positions), &before);
}

#[test]
fn split_is_deterministic_partition() {
    let (a, b) = split_indices(10, 0.2, 4);
    assert_eq!((a.len(), b.len()), (8, 2));
    assert_eq!(split_indices(10, 0.2, 4), (a.clone(), b.clone()));
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
}

#[test]
fn wrong_task_is_rejected() {
    let data = depth_data(false);
    let mut t = Trainer::new(tiny_clf_model(4, 0), TrainConfig::default()).unwrap();
    assert!(t.depth_step(&data, &[0]).is_err());
    let rec = EpochRecord {
        epoch: 1,
        step: 3,
        train_loss: 0.5,
        val_metric: None,
    };
    assert_eq!(
        history_csv(&[rec], "val_mae"),
        "epoch,step,train_loss,val_mae\n1,3,0.5,\n"
    );
}
