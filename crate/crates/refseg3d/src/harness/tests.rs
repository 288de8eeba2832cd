use super::*;
use crate::geometry::{lift_views, spherical_inject};
use crate::model::ModelConfig;

fn micro_model_config() -> ModelConfig {
    // Matches SynthSpec::default feature widths.
    ModelConfig { radius: 0.3, ..ModelConfig::micro() }
}

// ── scene generation ────────────────────────────────────────────────

#[test]
fn spec_validation_rejects_degenerate_specs() {
    let bad = [
        SynthSpec { n_objects: 0, ..SynthSpec::default() },
        SynthSpec { points_per_object: 0, ..SynthSpec::default() },
        SynthSpec { noise_sigma: -1.0, ..SynthSpec::default() },
        SynthSpec { n_views: 1, image_size: (1, 8), ..SynthSpec::default() },
        SynthSpec { target_rule: TargetRule::Multi(0), ..SynthSpec::default() },
        SynthSpec { target_rule: TargetRule::Multi(9), ..SynthSpec::default() },
        SynthSpec { feature_dim: 0, ..SynthSpec::default() },
    ];
    for spec in bad {
        assert!(matches!(generate_scene(&spec), Err(HarnessError::Spec(_))));
    }
}

#[test]
fn same_seed_generates_byte_identical_fixtures() {
    let spec = SynthSpec { n_views: 2, seed: 9, ..SynthSpec::default() };
    let (s1, v1, t1) = generate_scene(&spec).unwrap();
    let (s2, v2, t2) = generate_scene(&spec).unwrap();
    assert_eq!(s1.points.data, s2.points.data);
    assert_eq!(s1.point_features.data, s2.point_features.data);
    assert_eq!(s1.superpoint_id, s2.superpoint_id);
    assert_eq!(s1.gt_instances, s2.gt_instances);
    assert_eq!(t1.data, t2.data);
    assert_eq!(v1.len(), v2.len());
    for (a, b) in v1.iter().zip(&v2) {
        assert_eq!(a.intrinsics, b.intrinsics);
        assert_eq!(a.rotation, b.rotation);
        assert_eq!(a.translation, b.translation);
        assert_eq!(a.depth.data, b.depth.data);
        assert_eq!(a.pixel_features.data, b.pixel_features.data);
    }

    let (s3, _, _) = generate_scene(&SynthSpec { seed: 10, ..spec }).unwrap();
    assert_ne!(s1.points.data, s3.points.data);
}

#[test]
fn zero_target_rule_generates_no_instances_but_text_remains() {
    let spec = SynthSpec { target_rule: TargetRule::Zero, seed: 3, ..SynthSpec::default() };
    let (scene, _, text) = generate_scene(&spec).unwrap();
    assert!(scene.gt_instances.is_empty());
    assert_eq!(text.rows, 2);
}

#[test]
fn multi_target_masks_are_disjoint_object_covers() {
    let spec = SynthSpec { target_rule: TargetRule::Multi(2), seed: 4, ..SynthSpec::default() };
    let (scene, _, text) = generate_scene(&spec).unwrap();
    assert_eq!(scene.gt_instances.len(), 2);
    assert_eq!(text.rows, 4);
    for mask in &scene.gt_instances {
        assert_eq!(
            mask.iter().filter(|&&b| b).count(),
            spec.points_per_object
        );
    }
    let overlap = (0..scene.num_points())
        .any(|p| scene.gt_instances[0][p] && scene.gt_instances[1][p]);
    assert!(!overlap);
}

#[test]
fn scenes_keep_enough_superpoints_for_query_seeding() {
    for seed in 0..20 {
        let (scene, _, _) = generate_scene(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
        assert!(
            scene.num_superpoints() >= 8,
            "seed {seed}: only {} superpoints",
            scene.num_superpoints()
        );
    }
}

#[test]
fn rendered_views_have_hits_and_features_only_under_hits() {
    let spec = SynthSpec { n_views: 2, seed: 5, ..SynthSpec::default() };
    let (_, views, _) = generate_scene(&spec).unwrap();
    assert_eq!(views.len(), 2);
    for view in &views {
        let mut hits = 0;
        for y in 0..view.depth.rows {
            for x in 0..view.depth.cols {
                let zero_feat = view.pixel_features.pixel(y, x).iter().all(|&v| v == 0.0);
                if view.depth.get(y, x) > 0.0 {
                    hits += 1;
                    assert!(!zero_feat, "hit pixel ({y},{x}) lost its feature");
                } else {
                    assert!(zero_feat, "miss pixel ({y},{x}) has a feature");
                }
            }
        }
        assert!(hits > 20, "only {hits} splatted pixels");
    }
}

#[test]
fn constant_pixel_features_inject_back_onto_covered_points() {
    let spec = SynthSpec {
        n_objects: 1,
        points_per_object: 64,
        n_views: 1,
        seed: 6,
        ..SynthSpec::default()
    };
    let (scene, views, _) = generate_scene(&spec).unwrap();
    // A single object means every rendered pixel carries the same feature.
    let (p3d, feats) = lift_views(&views).unwrap();
    let mut c: Option<Vec<f64>> = None;
    for r in 0..feats.rows {
        if feats.row(r).iter().any(|&v| v != 0.0) {
            let row = feats.row(r).to_vec();
            if let Some(prev) = &c {
                assert_eq!(&row, prev);
            } else {
                c = Some(row);
            }
        }
    }
    let c = c.expect("at least one lifted pixel");

    let injected = spherical_inject(&scene.points, &p3d, &feats, 0.3).unwrap();
    let mut covered = 0;
    for p in 0..scene.num_points() {
        let row = injected.row(p);
        if row.iter().any(|&v| v != 0.0) {
            covered += 1;
            for (got, want) in row.iter().zip(&c) {
                assert!((got - want).abs() < 1e-12, "{got} vs {want}");
            }
        }
    }
    assert!(covered > 10, "only {covered} covered points");
}

// ── metrics ─────────────────────────────────────────────────────────

#[test]
fn iou_handles_the_standard_and_zero_target_cases() {
    assert_eq!(iou(&[true, true], &[true, true]).unwrap(), 1.0);
    assert_eq!(iou(&[true, false], &[false, true]).unwrap(), 0.0);
    assert_eq!(iou(&[false, false], &[false, false]).unwrap(), 1.0);
    assert_eq!(iou(&[true, false, false], &[true, true, true]).unwrap(), 1.0 / 3.0);
    assert!(matches!(
        iou(&[true], &[true, false]),
        Err(HarnessError::MaskLength { pred: 1, gt: 2 })
    ));
}

#[test]
fn score_masks_matches_a_hand_computed_mixed_set() {
    let t = true;
    let f = false;
    let preds = vec![
        vec![t, t, f, f, f],  // == gt                      -> 1.0
        vec![t, f, f, f, f],  // inter 1, union 2           -> 0.5
        vec![t, f, f, f, f],  // inter 1, union 5           -> 0.2
        vec![f, f, f, f, f],  // both empty                 -> 1.0
    ];
    let gts = vec![
        vec![t, t, f, f, f],
        vec![t, t, f, f, f],
        vec![t, t, t, t, t],
        vec![f, f, f, f, f],
    ];
    let r = score_masks(&preds, &gts).unwrap();
    assert_eq!(r.per_sample_iou, vec![1.0, 0.5, 0.2, 1.0]);
    assert_eq!(r.miou, (1.0 + 0.5 + 0.2 + 1.0) / 4.0);
    // Strict thresholds: 0.5 counts for acc@0.25 but not acc@0.5.
    assert_eq!(r.acc_25, 0.75);
    assert_eq!(r.acc_50, 0.5);
    assert!(r.acc_50 <= r.acc_25);
}

#[test]
fn evaluate_is_invariant_to_dataset_order() {
    let cfg = micro_model_config();
    let store = ParamStore::init(&cfg, 50);
    let spec = SynthSpec { seed: 50, ..SynthSpec::default() };
    let mut samples = generate_dataset(&spec, 4).unwrap();

    let a = evaluate(&cfg, &store, &samples, InferMode::Res).unwrap();
    samples.reverse();
    let b = evaluate(&cfg, &store, &samples, InferMode::Res).unwrap();
    // Per-sample scores are exact; the means accumulate in dataset order, so
    // a reversed dataset may differ in the last bit.
    assert!((a.miou - b.miou).abs() < 1e-12);
    assert_eq!(a.acc_25, b.acc_25);
    assert_eq!(a.acc_50, b.acc_50);
    let mut rev = b.per_sample_iou.clone();
    rev.reverse();
    assert_eq!(a.per_sample_iou, rev);
    assert!(a.acc_50 <= a.acc_25);
    assert!((0.0..=1.0).contains(&a.miou));
}

// ── training ────────────────────────────────────────────────────────

#[test]
fn zero_learning_rate_changes_nothing() {
    let cfg = micro_model_config();
    let mut store = ParamStore::init(&cfg, 60);
    let before = store.to_flat();
    let spec = SynthSpec { seed: 60, ..SynthSpec::default() };
    let samples = generate_dataset(&spec, 1).unwrap();
    let opts = TrainOptions { steps: 5, lr: 0.0, ..TrainOptions::default() };
    let log = train_toy(&cfg, &mut store, &samples, &opts).unwrap();

    assert_eq!(store.to_flat(), before);
    assert!(log.windows(2).all(|w| w[0].total == w[1].total));
}

#[test]
fn same_seed_training_runs_are_bit_identical() {
    let cfg = micro_model_config();
    let spec = SynthSpec { seed: 61, ..SynthSpec::default() };
    let samples = generate_dataset(&spec, 3).unwrap();
    let opts = TrainOptions { steps: 12, lr: 0.05, seed: 7, ..TrainOptions::default() };

    let run = || {
        let mut store = ParamStore::init(&cfg, 61);
        let log = train_toy(&cfg, &mut store, &samples, &opts).unwrap();
        (serde_json::to_string(&log).unwrap(), store.to_flat())
    };
    let (log1, params1) = run();
    let (log2, params2) = run();
    assert_eq!(log1, log2);
    assert_eq!(params1, params2);
}

#[test]
fn poly_decay_reaches_zero_learning_rate() {
    let cfg = micro_model_config();
    let mut store = ParamStore::init(&cfg, 62);
    let spec = SynthSpec { seed: 62, ..SynthSpec::default() };
    let samples = generate_dataset(&spec, 1).unwrap();
    let opts = TrainOptions { steps: 8, lr: 0.1, poly_decay: true, power: 4.0, seed: 0 };
    let log = train_toy(&cfg, &mut store, &samples, &opts).unwrap();
    assert_eq!(log[0].lr, 0.1);
    for w in log.windows(2) {
        assert!(w[1].lr < w[0].lr);
    }
    let last = log.last().unwrap();
    assert!((last.lr - 0.1 * (1.0f64 - 7.0 / 8.0).powf(4.0)).abs() < 1e-15);
}

#[test]
fn training_loss_trends_down_on_the_overfit_task() {
    let cfg = micro_model_config();
    let mut store = ParamStore::init(&cfg, 63);
    let spec = SynthSpec { seed: 63, ..SynthSpec::default() };
    let samples = generate_dataset(&spec, 4).unwrap();
    let opts = TrainOptions { steps: 120, lr: 0.05, ..TrainOptions::default() };
    let log = train_toy(&cfg, &mut store, &samples, &opts).unwrap();

    // Whole-epoch windows (12 = 3 epochs of 4) keep the sample mix equal,
    // so the means reflect optimization progress rather than sampling.
    let window_means: Vec<f64> = log
        .chunks(12)
        .map(|w| w.iter().map(|s| s.total).sum::<f64>() / w.len() as f64)
        .collect();
    for (i, w) in window_means.windows(2).enumerate() {
        assert!(
            w[1] <= w[0] * 1.05,
            "window {i}: mean rose from {} to {}",
            w[0],
            w[1]
        );
    }
    let first = window_means.first().unwrap();
    let last = window_means.last().unwrap();
    assert!(last < &(first * 0.8), "no real progress: {first} -> {last}");
}

#[test]
fn poisoned_parameters_abort_with_a_step_diagnostic() {
    let cfg = micro_model_config();
    let mut store = ParamStore::init(&cfg, 64);
    let poison: Vec<f64> = store
        .get("text.w_t")
        .unwrap()
        .data
        .iter()
        .map(|_| f64::NAN)
        .collect();
    store.set("text.w_t", poison).unwrap();
    let spec = SynthSpec { seed: 64, ..SynthSpec::default() };
    let samples = generate_dataset(&spec, 1).unwrap();
    let opts = TrainOptions { steps: 3, lr: 0.01, ..TrainOptions::default() };
    let err = train_toy(&cfg, &mut store, &samples, &opts).unwrap_err();
    match err {
        HarnessError::Step { step, .. } => assert_eq!(step, 0),
        other => panic!("unexpected error {other}"),
    }
}

