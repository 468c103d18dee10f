//! A small MLP-Mixer over the four scalar tokens of a [`FeatureTuple`],
//! with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`; [`ParamLayout`] names the slices.
//! The flat order is also the order used by the weight file.
//!
//! [`FeatureTuple`]: crate::geometry::FeatureTuple

mod io;
mod mixer;

pub use io::{WeightDocument, WEIGHT_FORMAT_VERSION};
pub use mixer::{gelu, gelu_grad, ForwardCache};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of input tokens: theta, r, w, h.
pub const TOKENS: usize = 4;

/// Variance floor inside the per-token normalization.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixerConfig {
    pub tokens: usize,
    pub embed_dim: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub layers: usize,
    pub head_outputs: usize,
}

impl MixerConfig {
    /// 32-wide, 2-layer mixer with the given number of head outputs.
    pub fn with_head(head_outputs: usize) -> Self {
        Self {
            tokens: TOKENS,
            embed_dim: 32,
            token_hidden: 32,
            channel_hidden: 32,
            layers: 2,
            head_outputs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens != TOKENS {
            return Err(Error::InvalidConfig(format!(
                "mixer tokens must be {TOKENS}, got {}",
                self.tokens
            )));
        }
        if self.embed_dim == 0
            || self.token_hidden == 0
            || self.channel_hidden == 0
            || self.head_outputs == 0
        {
            return Err(Error::InvalidConfig(format!(
                "mixer dimensions must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        ParamLayout::new(self).len()
    }

    /// Floating point operations of one forward pass, counting a
    /// multiply-accumulate in the affine maps as two operations.
    pub fn forward_flops(&self) -> u64 {
        let t = TOKENS as u64;
        let d = self.embed_dim as u64;
        let ht = self.token_hidden as u64;
        let hc = self.channel_hidden as u64;
        let embed = 2 * t * d;
        let token_mix = d * (2 * ht * t + 2 * t * ht);
        let channel_mix = t * (2 * hc * d + 2 * d * hc);
        let head = 2 * d * self.head_outputs as u64 + t * d;
        embed + self.layers as u64 * (token_mix + channel_mix) + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
    /// Fan-in used for initialization; zero for head tensors.
    fan_in: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerOffsets {
    pub norm1_gamma: usize,
    pub norm1_beta: usize,
    pub tok_w1: usize,
    pub tok_b1: usize,
    pub tok_w2: usize,
    pub tok_b2: usize,
    pub norm2_gamma: usize,
    pub norm2_beta: usize,
    pub ch_w1: usize,
    pub ch_b1: usize,
    pub ch_w2: usize,
    pub ch_b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    pub(crate) embed_w: usize,
    pub(crate) embed_b: usize,
    pub(crate) layers: Vec<LayerOffsets>,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
    len: usize,
}

impl ParamLayout {
    pub fn new(config: &MixerConfig) -> Self {
        let d = config.embed_dim;
        let ht = config.token_hidden;
        let hc = config.channel_hidden;
        let k = config.head_outputs;
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: ParamKind, fan_in: usize| {
            let at = offset;
            offset += shape.iter().product::<usize>();
            tensors.push(TensorSpec {
                name,
                shape,
                offset: at,
                kind,
                fan_in,
            });
            at
        };
        use ParamKind::*;
        let embed_w = push("embed.weight".into(), vec![TOKENS, d], Weight, 1);
        let embed_b = push("embed.bias".into(), vec![TOKENS, d], Bias, 1);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("layers.{l}.");
            layers.push(LayerOffsets {
                norm1_gamma: push(format!("{p}norm1.gamma"), vec![d], Norm, 0),
                norm1_beta: push(format!("{p}norm1.beta"), vec![d], Norm, 0),
                tok_w1: push(format!("{p}token_mlp.fc1.weight"), vec![ht, TOKENS], Weight, TOKENS),
                tok_b1: push(format!("{p}token_mlp.fc1.bias"), vec![ht], Bias, TOKENS),
                tok_w2: push(format!("{p}token_mlp.fc2.weight"), vec![TOKENS, ht], Weight, ht),
                tok_b2: push(format!("{p}token_mlp.fc2.bias"), vec![TOKENS], Bias, ht),
                norm2_gamma: push(format!("{p}norm2.gamma"), vec![d], Norm, 0),
                norm2_beta: push(format!("{p}norm2.beta"), vec![d], Norm, 0),
                ch_w1: push(format!("{p}channel_mlp.fc1.weight"), vec![hc, d], Weight, d),
                ch_b1: push(format!("{p}channel_mlp.fc1.bias"), vec![hc], Bias, d),
                ch_w2: push(format!("{p}channel_mlp.fc2.weight"), vec![d, hc], Weight, hc),
                ch_b2: push(format!("{p}channel_mlp.fc2.bias"), vec![d], Bias, hc),
            });
        }
        let head_w = push("head.weight".into(), vec![k, d], Weight, 0);
        let head_b = push("head.bias".into(), vec![k], Bias, 0);
        Self {
            tensors,
            embed_w,
            embed_b,
            layers,
            head_w,
            head_b,
            len: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    /// `true` for entries that receive weight decay (weights only).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for t in &self.tensors {
            if t.kind == ParamKind::Weight {
                mask[t.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerModel {
    config: MixerConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl MixerModel {
    /// Uniform(-sqrt(1/fan_in), sqrt(1/fan_in)) weights, zero biases, unit
    /// norm gains, and an all-zero head.
    pub fn init(config: MixerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in layout.tensors() {
            let slot = &mut params[t.range()];
            match t.kind {
                ParamKind::Weight if t.fan_in > 0 => {
                    let bound = (1.0 / t.fan_in as f64).sqrt();
                    for v in slot {
                        *v = rng.random_range(-bound..=bound);
                    }
                }
                ParamKind::Norm if t.name.ends_with("gamma") => slot.fill(1.0),
                _ => slot.fill(0.0),
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: MixerConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.len() {
            return Err(Error::Shape {
                name: "parameters".into(),
                expected: layout.len(),
                found: params.len(),
            });
        }
        if let Some(i) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "parameter {i} is not finite"
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Named slice of the parameter vector.
    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .tensors()
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self
            .layout
            .tensors()
            .iter()
            .find(|t| t.name == name)?
            .range();
        Some(&mut self.params[range])
    }

    pub fn zero_grad(&self) -> GradientBuffer {
        GradientBuffer::zeros(self.layout.len())
    }

    /// Gradient of `upstream . outputs` w.r.t. every parameter at `input`.
    pub fn backward(&self, input: &[f64; TOKENS], upstream: &[f64]) -> GradientBuffer {
        let mut grads = self.zero_grad();
        let (_, cache) = self.forward_cached(input);
        self.backward_into(&cache, upstream, &mut grads, None);
        grads
    }
}

/// Accumulated `dL/dparam`, shape-congruent with a [`MixerModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    data: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(0.0);
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|g| *g *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }

    /// Rescales so the joint L2 norm does not exceed `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.l2_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Functional form of [`GradientBuffer::clip_global_norm`].
pub fn clip_global_norm(grads: &GradientBuffer, max_norm: f64) -> GradientBuffer {
    let mut out = grads.clone();
    out.clip_global_norm(max_norm);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_names_are_unique_and_contiguous() {
        let cfg = MixerConfig::with_head(2);
        let layout = ParamLayout::new(&cfg);
        let mut expected = 0;
        for t in layout.tensors() {
            assert_eq!(t.offset, expected, "{}", t.name);
            expected += t.len();
        }
        assert_eq!(expected, layout.len());
        let mut names: Vec<_> = layout.tensors().iter().map(|t| &t.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.tensors().len());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = MixerConfig::with_head(1);
        let a = MixerModel::init(cfg, 7).unwrap();
        let b = MixerModel::init(cfg, 7).unwrap();
        let c = MixerModel::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        for t in a.layout().tensors() {
            let vals = &a.params()[t.range()];
            match t.kind {
                ParamKind::Weight if t.name.starts_with("head") => {
                    assert!(vals.iter().all(|v| *v == 0.0))
                }
                ParamKind::Weight => {
                    let bound = (1.0 / t.fan_in as f64).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= bound), "{}", t.name);
                    assert!(vals.iter().any(|v| *v != 0.0), "{}", t.name);
                }
                ParamKind::Bias => assert!(vals.iter().all(|v| *v == 0.0)),
                ParamKind::Norm if t.name.ends_with("gamma") => {
                    assert!(vals.iter().all(|v| *v == 1.0))
                }
                ParamKind::Norm => assert!(vals.iter().all(|v| *v == 0.0)),
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = MixerConfig::with_head(1);
        cfg.tokens = 5;
        assert!(MixerModel::init(cfg, 0).is_err());
        let mut cfg = MixerConfig::with_head(1);
        cfg.embed_dim = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = MixerConfig::with_head(1);
        cfg.layers = 0;
        cfg.validate().unwrap();
    }

    #[test]
    fn decay_mask_covers_weights_only() {
        let layout = ParamLayout::new(&MixerConfig::with_head(1));
        let mask = layout.decay_mask();
        for t in layout.tensors() {
            let want = t.kind == ParamKind::Weight;
            assert!(mask[t.range()].iter().all(|m| *m == want), "{}", t.name);
        }
    }

    #[test]
    fn clip_examples() {
        // |g| = 0.5
        let g = GradientBuffer {
            data: vec![0.3, 0.4, 0.0],
        };
        assert_eq!(clip_global_norm(&g, 1.0), g);
        // |g| = 4
        let g = GradientBuffer {
            data: vec![0.0, 2.4, 3.2],
        };
        let c = clip_global_norm(&g, 1.0);
        for (a, b) in c.as_slice().iter().zip(g.as_slice()) {
            assert!((a - 0.25 * b).abs() < 1e-15);
        }
        assert!((c.l2_norm() - 1.0).abs() < 1e-15);
        let z = GradientBuffer::zeros(4);
        assert_eq!(clip_global_norm(&z, 1.0), z);
    }

    #[test]
    fn flops_of_default_pcm() {
        // embed 256, per layer 16384 token + 16384 channel, head 64 + 128 pooling
        assert_eq!(MixerConfig::with_head(1).forward_flops(), 256 + 2 * 32768 + 192);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clip_is_norm_bounding_and_idempotent(
                v in proptest::collection::vec(-100.0..100.0f64, 1..50),
                max in 1e-3..10.0f64,
            ) {
                let g = GradientBuffer { data: v };
                let once = clip_global_norm(&g, max);
                prop_assert!(once.l2_norm() <= max + 1e-12);
                let twice = clip_global_norm(&once, max);
                for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                }
            }
        }
    }
}
