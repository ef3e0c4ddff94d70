mod common;

use adhoc_se::attention::checkpoint;
use adhoc_se::attention::toy::{toy_dataset, ToyConfig};
use adhoc_se::attention::{
    assemble, context, estimate_sto, estimate_sto_frames, evaluate_loss, loss_and_gradient,
    similarities, similarity, train, AttnConfig, AttnHead, AttnInput, ContextValues, Dataset,
    TrainConfig,
};
use common::{gradient_error, random_dataset, random_head, toy_train_config, uniform};
use ndarray::{s, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn analytic_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = random_head(AttnConfig { window: 5, ..AttnConfig::default() }, 8, 2, &mut rng);
        let data = random_dataset(&mut rng, 5, 8, 2, 3);
        let err = gradient_error(&head, &data);
        prop_assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn similarity_rows_are_stochastic(seed in any::<u64>(), scale in 0.1f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = uniform(&mut rng, 9, 9) * scale - scale / 2.0;
        let s = similarity(&raw);
        for row in s.values().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }

    #[test]
    fn context_rows_stay_within_reference_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = uniform(&mut rng, 7, 5);
        let s = similarity(&(uniform(&mut rng, 7, 7) * 10.0));
        let p = context(&s, c1.view()).unwrap();
        for f in 0..5 {
            let col = c1.column(f);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.column(f).iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        }
    }
}

#[test]
fn gradient_is_exact_for_every_head_variant() {
    let variants = [
        AttnConfig {
            shared_w: false,
            ..AttnConfig::default()
        },
        AttnConfig {
            context_values: ContextValues::Reference,
            ..AttnConfig::default()
        },
        AttnConfig {
            attention: false,
            ..AttnConfig::default()
        },
    ];
    for (k, cfg) in variants.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let cfg = AttnConfig { window: 5, ..cfg };
        let head = random_head(cfg, 8, 2, &mut rng);
        let data = random_dataset(&mut rng, 5, 8, 2, 3);
        let err = gradient_error(&head, &data);
        assert!(err <= 1e-4, "{cfg:?}: {err}");
    }
}

#[test]
fn batch_gradient_is_sum_of_item_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let head = random_head(AttnConfig::default(), 6, 1, &mut rng);
    let data = random_dataset(&mut rng, 21, 6, 1, 40);
    let (_, total) = loss_and_gradient(&head, &data).unwrap();
    let mut sum = head.clone();
    for (_, b) in sum.blocks_mut() {
        b.fill(0.0);
    }
    for i in (0..data.len()).rev() {
        let single = Dataset {
            recordings: data.recordings.clone(),
            items: vec![data.items[i]],
            window: data.window,
        };
        let (_, g) = loss_and_gradient(&head, &single).unwrap();
        for ((_, acc), (_, gi)) in sum.blocks_mut().into_iter().zip(g.blocks()) {
            for (a, v) in acc.iter_mut().zip(gi) {
                *a += v / data.len() as f64;
            }
        }
    }
    for ((_, a), (_, b)) in total.blocks().iter().zip(sum.blocks()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1e-3));
        }
    }
}

#[test]
fn assembled_block_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = AttnHead::init(AttnConfig::default(), 257, 1, 0).unwrap();
    let (c1, c2) = (uniform(&mut rng, 21, 257), uniform(&mut rng, 21, 257));
    let input = AttnInput::new(vec![c1.view(), c2.view()]).unwrap();
    let feats = assemble(&input, &head).unwrap();
    assert_eq!(feats.slice(s![.., 257..]).dim(), (21, 514));
    assert_eq!(feats.slice(s![.., ..257]), c1);

    let alone = AttnInput::new(vec![c1.view()]).unwrap();
    assert_eq!(assemble(&alone, &head).unwrap(), c1);
}

#[test]
fn permuting_foreign_channels_permutes_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = 6;
    let head = random_head(AttnConfig::default(), f, 3, &mut rng);
    let ch: Vec<_> = (0..4).map(|_| uniform(&mut rng, 9, f)).collect();
    let a = assemble(
        &AttnInput::new(vec![ch[0].view(), ch[1].view(), ch[2].view(), ch[3].view()]).unwrap(),
        &head,
    )
    .unwrap();
    let b = assemble(
        &AttnInput::new(vec![ch[0].view(), ch[3].view(), ch[1].view(), ch[2].view()]).unwrap(),
        &head,
    )
    .unwrap();
    let block = |x: &Array2<f64>, j: usize| x.slice(s![.., f + 2 * f * j..f + 2 * f * (j + 1)]).to_owned();
    assert_eq!(block(&a, 0), block(&b, 1));
    assert_eq!(block(&a, 1), block(&b, 2));
    assert_eq!(block(&a, 2), block(&b, 0));
}

/// Frames normalized to unit `W`-norm: by Cauchy-Schwarz every frame scores
/// highest against itself, so an exact shift moves the read-out by the shift.
#[test]
fn read_out_follows_exact_shifts() {
    let (t, f) = (21, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = uniform(&mut rng, f, f);
    let w = a.t().dot(&a) + Array2::<f64>::eye(f);
    let mut head = AttnHead::zeros(AttnConfig::default(), f, 1).unwrap();
    head.w[0] = w.clone();
    let mut src = uniform(&mut rng, t + 20, f);
    for mut row in src.rows_mut() {
        let norm = row.dot(&w.dot(&row)).sqrt();
        row /= norm;
    }
    let c1 = src.slice(s![10..10 + t, ..]);
    let hop_ms = 16.0;
    let base = {
        let input = AttnInput::new(vec![c1, c1]).unwrap();
        estimate_sto(&similarities(&input, &head).unwrap()[0], hop_ms).unwrap()
    };
    assert_eq!(base, 0.0);
    for d in -8i64..=8 {
        let start = (10 - d) as usize;
        let cj = src.slice(s![start..start + t, ..]);
        let input = AttnInput::new(vec![c1, cj]).unwrap();
        let est = estimate_sto(&similarities(&input, &head).unwrap()[0], hop_ms).unwrap();
        assert_eq!(est, base + d as f64 * hop_ms, "shift {d}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = ToyConfig::default();
    let (data, _) = toy_dataset(&cfg, 50, 1).unwrap();
    let init = AttnHead::init(AttnConfig::default(), cfg.n_bins, 1, 2).unwrap();
    let tc = TrainConfig {
        learning_rate: 0.0,
        steps: 5,
        ..TrainConfig::default()
    };
    assert_eq!(train(init.clone(), &data, &data, &tc).unwrap().head, init);
    let tc = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let r = train(init.clone(), &data, &data, &tc).unwrap();
    assert_eq!(r.head, init);
    assert_eq!(r.curve.len(), 1);
}

#[test]
fn separable_task_is_learned() {
    let cfg = ToyConfig {
        separable: true,
        shifts: vec![0],
        ..ToyConfig::default()
    };
    let (train_set, _) = toy_dataset(&cfg, 500, 11).unwrap();
    let (val, _) = toy_dataset(&cfg, 200, 12).unwrap();
    let init = AttnHead::init(AttnConfig::default(), cfg.n_bins, 1, 13).unwrap();
    let r = train(init, &train_set, &val, &toy_train_config()).unwrap();
    let mse = evaluate_loss(&r.head, &val).unwrap();
    assert!(mse <= 0.02, "validation MSE {mse}");
}

#[test]
fn trained_alignment_beats_frozen_random_alignment() {
    // offsets of 0..=32 ms are 0..=2 frames
    let cfg = ToyConfig {
        shifts: vec![0, 1, 2],
        ..ToyConfig::default()
    };
    let (train_set, _) = toy_dataset(&cfg, 1000, 21).unwrap();
    let (val, _) = toy_dataset(&cfg, 300, 22).unwrap();
    let trained = train(
        AttnHead::init(AttnConfig::default(), cfg.n_bins, 1, 23).unwrap(),
        &train_set,
        &val,
        &toy_train_config(),
    )
    .unwrap();
    let mut frozen = AttnHead::zeros(AttnConfig::default(), cfg.n_bins, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    frozen.w[0] = uniform(&mut rng, cfg.n_bins, cfg.n_bins) * 2.0 - 1.0;
    let frozen = train(
        frozen,
        &train_set,
        &val,
        &TrainConfig {
            freeze_w: true,
            ..toy_train_config()
        },
    )
    .unwrap();
    let (a, b) = (
        evaluate_loss(&trained.head, &val).unwrap(),
        evaluate_loss(&frozen.head, &val).unwrap(),
    );
    assert!(a <= 0.8 * b, "trained {a} vs frozen {b}");
}

#[test]
fn training_is_deterministic_and_curve_non_increasing() {
    let cfg = ToyConfig::default();
    let (train_set, _) = toy_dataset(&cfg, 300, 31).unwrap();
    let (val, _) = toy_dataset(&cfg, 100, 32).unwrap();
    let init = AttnHead::init(AttnConfig::default(), cfg.n_bins, 1, 33).unwrap();
    let tc = TrainConfig {
        steps: 200,
        ..toy_train_config()
    };
    let a = train(init.clone(), &train_set, &val, &tc).unwrap();
    let b = train(init, &train_set, &val, &tc).unwrap();
    assert_eq!(a.head, b.head);
    assert_eq!(a.curve_csv(), b.curve_csv());
    assert!(a
        .curve
        .windows(2)
        .all(|p| p[1].best_val_loss <= p[0].best_val_loss));
    assert!(a.curve.last().unwrap().best_val_loss < a.curve[0].val_loss);
}

#[test]
fn trained_head_recovers_frame_offsets() {
    let cfg = ToyConfig::default();
    let (train_set, _) = toy_dataset(&cfg, 2000, 41).unwrap();
    let (val, _) = toy_dataset(&cfg, 300, 42).unwrap();
    let init = AttnHead::init(AttnConfig::default(), cfg.n_bins, 1, 43).unwrap();
    let head = train(init, &train_set, &val, &toy_train_config())
        .unwrap()
        .head;
    let held_out = ToyConfig {
        shifts: vec![0, 5, -5, 7, -7],
        ..cfg
    };
    let (test, shifts) = toy_dataset(&held_out, 200, 44).unwrap();
    let hits = (0..test.len())
        .filter(|&i| {
            let (input, _) = test.item(i).unwrap();
            let s = &similarities(&input, &head).unwrap()[0];
            estimate_sto_frames(s).is_some_and(|e| (e - shifts[i][0]).abs() <= 1)
        })
        .count();
    assert!(hits >= 160, "{hits} of 200");
}

#[test]
fn checkpoint_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.json");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let head = random_head(AttnConfig::default(), 10, 2, &mut rng);
    checkpoint::save(&head, &path).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let data = random_dataset(&mut rng, 21, 10, 2, 5);
    assert_eq!(
        evaluate_loss(&head, &data).unwrap(),
        evaluate_loss(&loaded, &data).unwrap()
    );
}

#[test]
fn similarity_csv_has_one_line_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let s = similarity(&Array2::zeros((4, 4)));
    s.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], "m,n0,n1,n2,n3");
    assert!(lines[1].starts_with("0,2.5"));
}
