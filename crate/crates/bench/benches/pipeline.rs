use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use uavdist_core::geometry::make_feature_tuple;
use uavdist_core::simdata::generate_dataset;
use uavdist_core::training::{train, TrainConfig};
use uavdist_core::{
    CorrectorStack, GradientBuffer, InferenceMode, MixerConfig, MixerModel, SceneConfig, StereoRig,
};

fn mixer(c: &mut Criterion) {
    let rig = StereoRig::reference();
    let scene = SceneConfig { n_samples: 1, ..SceneConfig::default() };
    let record = generate_dataset(&scene).unwrap().remove(0);
    let input = make_feature_tuple(&rig, &record.left).to_array();
    let model = MixerModel::init(MixerConfig::with_head(1), 0).unwrap();

    c.bench_function("mixer_forward", |b| b.iter(|| model.forward(black_box(&input))));
    c.bench_function("mixer_forward_backward", |b| {
        let mut grads = GradientBuffer::zeros(model.params().len());
        b.iter(|| {
            let (out, cache) = model.forward_cached(black_box(&input));
            model.backward_into(&cache, &[1.0], &mut grads, None);
            out
        })
    });
}

fn inference(c: &mut Criterion) {
    let rig = StereoRig::reference();
    let scene = SceneConfig { n_samples: 256, ..SceneConfig::default() };
    let records = generate_dataset(&scene).unwrap();
    let stack =
        CorrectorStack::init(rig, 2, MixerConfig::with_head(1), MixerConfig::with_head(2), 0.5, 0)
            .unwrap();
    for (name, mode) in [("estimate_gated", InferenceMode::Gated), ("estimate_forced", InferenceMode::Forced)] {
        c.bench_function(name, |b| {
            let mut i = 0;
            b.iter(|| {
                let r = &records[i % records.len()];
                i += 1;
                stack.estimate_with(black_box(&r.left), black_box(&r.right), mode).0
            })
        });
    }
}

fn data_and_training(c: &mut Criterion) {
    let scene = SceneConfig { n_samples: 1000, ..SceneConfig::default() };
    c.bench_function("generate_1000", |b| b.iter(|| generate_dataset(black_box(&scene)).unwrap()));

    let records = generate_dataset(&SceneConfig { n_samples: 256, ..scene }).unwrap();
    let config = TrainConfig { epochs: 1, stages: 1, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("one_epoch_256", |b| {
        b.iter_batched(
            || records.clone(),
            |r| train(&scene.rig, &r, None, &config).unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, mixer, inference, data_and_training);
criterion_main!(benches);
