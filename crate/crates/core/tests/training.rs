use uavdist_core::correction::InferenceMode;
use uavdist_core::eval::evaluate;
use uavdist_core::geometry::make_feature_tuple;
use uavdist_core::simdata::generate_dataset;
use uavdist_core::training::{train, Phase, TrainConfig};
use uavdist_core::{DeviationModel, SceneConfig};

fn scene(n: usize, seed: u64, deviation: DeviationModel) -> SceneConfig {
    SceneConfig {
        n_samples: n,
        seed,
        deviation,
        ..Default::default()
    }
}

#[test]
fn deviation_free_data_stays_exact() {
    let cfg = scene(300, 0, DeviationModel::none());
    let records = generate_dataset(&cfg).unwrap();
    let tc = TrainConfig {
        epochs: 8,
        stages: 1,
        ..Default::default()
    };
    let out = train(&cfg.rig, &records, None, &tc).unwrap();

    // non-increasing after warmup, within a 5% band
    let losses = out.log.offset_losses(1);
    assert_eq!(losses.len(), 8);
    for w in losses[1..].windows(2) {
        assert!(w[1] <= w[0] * 1.05 + 1e-12, "{losses:?}");
    }
    let report = evaluate(&out.stack, &records, InferenceMode::Gated, 20.0).unwrap();
    assert!(report.abs_rel < 1e-3, "{}", report.abs_rel);
}

#[test]
fn empty_hard_set_stops_early() {
    let cfg = scene(200, 0, DeviationModel::none());
    let records = generate_dataset(&cfg).unwrap();
    let tc = TrainConfig {
        epochs: 2,
        stages: 3,
        ..Default::default()
    };
    let out = train(&cfg.rig, &records, None, &tc).unwrap();
    assert_eq!(out.stopped_early, Some(1));
    assert_eq!(out.hard_counts, vec![0]);
    assert_eq!(out.stack.num_stages(), 1);
    assert!(out.stack.gates.is_empty());
    assert_eq!(out.log.notes.len(), 1);
}

#[test]
fn training_is_deterministic_and_logged() {
    let cfg = scene(256, 3, DeviationModel::default());
    let records = generate_dataset(&cfg).unwrap();
    let val = generate_dataset(&scene(64, 4, DeviationModel::default())).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        seed: 9,
        ..Default::default()
    };
    let a = train(&cfg.rig, &records, Some(&val), &tc).unwrap();
    let b = train(&cfg.rig, &records, Some(&val), &tc).unwrap();
    assert_eq!(a.stack.to_json().unwrap(), b.stack.to_json().unwrap());
    assert_eq!(a.log.to_csv(), b.log.to_csv());

    let other = train(&cfg.rig, &records, Some(&val), &TrainConfig { seed: 10, ..tc }).unwrap();
    assert_ne!(a.stack.to_json().unwrap(), other.stack.to_json().unwrap());

    let csv = a.log.to_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("stage,epoch,step,lr,mean_pcm_loss,mean_gate_loss,val_abs_rel")
    );
    // 2 offset phases and 1 gate phase of 3 epochs each
    assert_eq!(lines.count(), 9);
    let offset_rows: Vec<_> = a.log.rows.iter().filter(|r| r.phase == Phase::Offset).collect();
    assert!(offset_rows.iter().all(|r| r.val_abs_rel.is_some()));
    let gate_rows: Vec<_> = a.log.rows.iter().filter(|r| r.phase == Phase::Gate).collect();
    assert_eq!(gate_rows.len(), 3);
    assert!(gate_rows.iter().all(|r| r.stage == 1 && r.mean_loss.is_some()));
    // 256 samples in batches of 64: 4 steps per epoch
    assert_eq!(a.log.rows[2].step, 12);
}

/// Only the left camera is biased by +2 px. With weights shared between the
/// two views only `O_L - O_R` is observable, so that difference is what must
/// come out near -2 px.
#[test]
fn learns_constant_disparity_bias() {
    let dev = DeviationModel {
        alpha_l: 2.0,
        ..DeviationModel::none()
    };
    let cfg = scene(500, 0, dev);
    let records = generate_dataset(&cfg).unwrap();
    let tc = TrainConfig {
        stages: 1,
        ..Default::default()
    };
    let out = train(&cfg.rig, &records, None, &tc).unwrap();
    let pcm = &out.stack.stages[0];

    let test = generate_dataset(&scene(200, 5, dev)).unwrap();
    let mean_diff = test
        .iter()
        .map(|r| {
            pcm.predict_offset(&make_feature_tuple(&cfg.rig, &r.left))
                - pcm.predict_offset(&make_feature_tuple(&cfg.rig, &r.right))
        })
        .sum::<f64>()
        / test.len() as f64;
    assert!((mean_diff + 2.0).abs() <= 0.5, "mean O_L - O_R = {mean_diff}");
}
