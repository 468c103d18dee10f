//! Forward values frozen from `oracles/mixer_forward.py`.

use uavdist_core::nn::{MixerConfig, MixerModel, TOKENS};

fn config(d: usize, ht: usize, hc: usize, layers: usize, k: usize) -> MixerConfig {
    MixerConfig {
        tokens: TOKENS,
        embed_dim: d,
        token_hidden: ht,
        channel_hidden: hc,
        layers,
        head_outputs: k,
    }
}

fn sine_model(cfg: MixerConfig) -> MixerModel {
    let n = cfg.num_params();
    let params = (0..n).map(|j| 0.3 * (0.37 * j as f64 + 0.5).sin()).collect();
    MixerModel::from_params(cfg, params).unwrap()
}

fn assert_close(got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{got:?} vs {want:?}");
    }
}

#[test]
fn constant_weights() {
    let cfg = config(2, 2, 2, 2, 1);
    let mut model = MixerModel::init(cfg, 0).unwrap();
    let names: Vec<(String, bool, bool)> = model
        .layout()
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.name.ends_with("gamma"), t.name.ends_with("beta") || t.name.ends_with("bias")))
        .collect();
    for (name, gamma, zero) in names {
        let v = if gamma { 1.0 } else if zero { 0.0 } else { 0.1 };
        model.tensor_mut(&name).unwrap().fill(v);
    }
    assert_close(&model.forward(&[0.5; 4]), &[0.010000000000000002]);
}

#[test]
fn sine_weights() {
    let input = [0.3, -1.2, 0.7, 2.0];
    assert_close(
        &sine_model(config(2, 2, 2, 2, 1)).forward(&input),
        &[0.15247092009905397],
    );
    assert_close(
        &sine_model(config(3, 5, 4, 2, 2)).forward(&input),
        &[-0.4751741881714382, -0.2150533253225978],
    );
    assert_close(
        &sine_model(config(4, 3, 6, 1, 1)).forward(&[1.1, 0.25, -0.4, 0.05]),
        &[0.4384693407175415],
    );
}

#[test]
fn averaging_config() {
    let cfg = config(1, 1, 1, 0, 1);
    let mut model = MixerModel::init(cfg, 0).unwrap();
    model.tensor_mut("embed.weight").unwrap().fill(1.0);
    model.tensor_mut("embed.bias").unwrap().fill(0.0);
    model.tensor_mut("head.weight").unwrap().fill(1.0);
    let x = [0.2, -1.0, 3.5, 0.3];
    assert_eq!(model.forward(&x), vec![0.75]);

    let (_, cache) = model.forward_cached(&x);
    let mut grads = model.zero_grad();
    let mut din = [0.0; 4];
    model.backward_into(&cache, &[1.0], &mut grads, Some(&mut din));
    assert_eq!(din, [0.25; 4]);
}

#[test]
fn forward_is_pure() {
    let model = sine_model(config(3, 5, 4, 2, 2));
    let x = [0.1, 0.2, -0.3, 0.9];
    let a = model.forward(&x);
    let b = model.forward(&x);
    assert_eq!(a, b);
    assert_eq!(model.forward_cached(&x).0, a);
}
