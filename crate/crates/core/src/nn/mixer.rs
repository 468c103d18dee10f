//! Forward and reverse passes.
//!
//! Activations are stored token-major: `x[t * d + c]` is channel `c` of token `t`.

use super::{LayerOffsets, MixerModel, GradientBuffer, NORM_EPS, TOKENS};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

/// `(gelu(x), gelu'(x))` sharing one `erf` evaluation.
#[inline]
fn gelu_with_grad(x: f64) -> (f64, f64) {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    (x * cdf, cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp())
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    xhat1: Vec<f64>,
    inv_std1: [f64; TOKENS],
    /// Token-MLP activation and its slope, `[c * ht + j]`.
    tok_act: Vec<f64>,
    tok_slope: Vec<f64>,
    xhat2: Vec<f64>,
    inv_std2: [f64; TOKENS],
    /// Normalized input of the channel MLP, `[t * d + c]`.
    y2: Vec<f64>,
    /// Channel-MLP activation and its slope, `[t * hc + k]`.
    ch_act: Vec<f64>,
    ch_slope: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: [f64; TOKENS],
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
}

impl ForwardCache {
    pub fn input(&self) -> &[f64; TOKENS] {
        &self.input
    }
}

/// Per-token normalization over channels; writes `xhat` and returns `1/std`.
fn normalize_rows(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    xhat: &mut [f64],
    y: &mut [f64],
) -> [f64; TOKENS] {
    let mut inv = [0.0; TOKENS];
    for t in 0..TOKENS {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + NORM_EPS).sqrt();
        inv[t] = s;
        for c in 0..d {
            let n = (row[c] - mean) * s;
            xhat[t * d + c] = n;
            y[t * d + c] = gamma[c] * n + beta[c];
        }
    }
    inv
}

/// Backward of [`normalize_rows`] given `dy`; accumulates gain/shift grads
/// and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn normalize_rows_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64; TOKENS],
    gamma: &[f64],
    d: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for t in 0..TOKENS {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let g = dy[t * d + c];
            let n = xhat[t * d + c];
            dgamma[c] += g * n;
            dbeta[c] += g;
            dxhat[c] = g * gamma[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * n;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            dx[t * d + c] +=
                inv_std[t] * (dxhat[c] - mean_dxhat - xhat[t * d + c] * mean_dxhat_xhat);
        }
    }
}

impl MixerModel {
    pub fn forward(&self, input: &[f64; TOKENS]) -> Vec<f64> {
        self.run(input, false).0
    }

    pub fn forward_cached(&self, input: &[f64; TOKENS]) -> (Vec<f64>, ForwardCache) {
        self.run(input, true)
    }

    /// Slopes are only needed for a backward pass; skipping them halves
    /// the transcendental work of inference.
    fn run(&self, input: &[f64; TOKENS], slopes: bool) -> (Vec<f64>, ForwardCache) {
        let cfg = &self.config;
        let p = &self.params;
        let lay = &self.layout;
        let d = cfg.embed_dim;
        let ht = cfg.token_hidden;
        let hc = cfg.channel_hidden;

        let mut x = vec![0.0; TOKENS * d];
        for t in 0..TOKENS {
            for c in 0..d {
                let i = t * d + c;
                x[i] = input[t] * p[lay.embed_w + i] + p[lay.embed_b + i];
            }
        }

        let mut y = vec![0.0; TOKENS * d];
        let mut caches = Vec::with_capacity(cfg.layers);
        for o in &lay.layers {
            let mut lc = LayerCache {
                xhat1: vec![0.0; TOKENS * d],
                tok_act: vec![0.0; d * ht],
                tok_slope: if slopes { vec![0.0; d * ht] } else { Vec::new() },
                xhat2: vec![0.0; TOKENS * d],
                y2: vec![0.0; TOKENS * d],
                ch_act: vec![0.0; TOKENS * hc],
                ch_slope: if slopes { vec![0.0; TOKENS * hc] } else { Vec::new() },
                ..Default::default()
            };

            // token mixing: one MLP across the 4 tokens, shared by all channels
            lc.inv_std1 = normalize_rows(
                &x,
                d,
                &p[o.norm1_gamma..o.norm1_gamma + d],
                &p[o.norm1_beta..o.norm1_beta + d],
                &mut lc.xhat1,
                &mut y,
            );
            for c in 0..d {
                for j in 0..ht {
                    let mut a = p[o.tok_b1 + j];
                    for t in 0..TOKENS {
                        a += p[o.tok_w1 + j * TOKENS + t] * y[t * d + c];
                    }
                    if slopes {
                        let (h, s) = gelu_with_grad(a);
                        lc.tok_act[c * ht + j] = h;
                        lc.tok_slope[c * ht + j] = s;
                    } else {
                        lc.tok_act[c * ht + j] = gelu(a);
                    }
                }
                let hidden = &lc.tok_act[c * ht..(c + 1) * ht];
                for t in 0..TOKENS {
                    let w = &p[o.tok_w2 + t * ht..o.tok_w2 + (t + 1) * ht];
                    let z: f64 = w.iter().zip(hidden).map(|(w, h)| w * h).sum();
                    x[t * d + c] += z + p[o.tok_b2 + t];
                }
            }

            // channel mixing: one MLP across channels, shared by all tokens
            lc.inv_std2 = normalize_rows(
                &x,
                d,
                &p[o.norm2_gamma..o.norm2_gamma + d],
                &p[o.norm2_beta..o.norm2_beta + d],
                &mut lc.xhat2,
                &mut lc.y2,
            );
            for t in 0..TOKENS {
                let row = &lc.y2[t * d..(t + 1) * d];
                for k in 0..hc {
                    let w = &p[o.ch_w1 + k * d..o.ch_w1 + (k + 1) * d];
                    let a = p[o.ch_b1 + k] + w.iter().zip(row).map(|(w, v)| w * v).sum::<f64>();
                    if slopes {
                        let (h, s) = gelu_with_grad(a);
                        lc.ch_act[t * hc + k] = h;
                        lc.ch_slope[t * hc + k] = s;
                    } else {
                        lc.ch_act[t * hc + k] = gelu(a);
                    }
                }
                let hidden = &lc.ch_act[t * hc..(t + 1) * hc];
                for c in 0..d {
                    let w = &p[o.ch_w2 + c * hc..o.ch_w2 + (c + 1) * hc];
                    let z: f64 = w.iter().zip(hidden).map(|(w, h)| w * h).sum();
                    x[t * d + c] += z + p[o.ch_b2 + c];
                }
            }
            caches.push(lc);
        }

        let mut pooled = vec![0.0; d];
        for c in 0..d {
            pooled[c] = (0..TOKENS).map(|t| x[t * d + c]).sum::<f64>() / TOKENS as f64;
        }
        let out = (0..cfg.head_outputs)
            .map(|k| {
                let w = &p[lay.head_w + k * d..lay.head_w + (k + 1) * d];
                p[lay.head_b + k] + w.iter().zip(&pooled).map(|(w, m)| w * m).sum::<f64>()
            })
            .collect();

        (
            out,
            ForwardCache {
                input: *input,
                layers: caches,
                pooled,
            },
        )
    }

    /// Accumulates `d(upstream . outputs)/dparam` into `grads`. When
    /// `input_grad` is given, the gradient w.r.t. the four input scalars is
    /// added to it.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut GradientBuffer,
        input_grad: Option<&mut [f64; TOKENS]>,
    ) {
        assert_eq!(upstream.len(), self.config.head_outputs, "upstream length");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer shape");
        assert!(
            cache.layers.iter().all(|l| !l.tok_slope.is_empty()) || cache.layers.is_empty(),
            "cache from forward() cannot be differentiated; use forward_cached()"
        );
        let cfg = &self.config;
        let p = &self.params;
        let lay = &self.layout;
        let g = grads.as_mut_slice();
        let d = cfg.embed_dim;
        let ht = cfg.token_hidden;
        let hc = cfg.channel_hidden;

        // head
        let mut dpooled = vec![0.0; d];
        for (k, &u) in upstream.iter().enumerate() {
            g[lay.head_b + k] += u;
            for c in 0..d {
                g[lay.head_w + k * d + c] += u * cache.pooled[c];
                dpooled[c] += u * p[lay.head_w + k * d + c];
            }
        }
        // mean over tokens
        let mut dx = vec![0.0; TOKENS * d];
        for t in 0..TOKENS {
            for c in 0..d {
                dx[t * d + c] = dpooled[c] / TOKENS as f64;
            }
        }

        let mut dy = vec![0.0; TOKENS * d];
        for (o, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            self.channel_mix_backward(o, lc, &dx, &mut dy, g, d, hc);
            debug_assert_eq!(o.norm2_beta, o.norm2_gamma + d);
            let (dgamma, dbeta) = g[o.norm2_gamma..o.norm2_gamma + 2 * d].split_at_mut(d);
            normalize_rows_backward(
                &dy,
                &lc.xhat2,
                &lc.inv_std2,
                &p[o.norm2_gamma..o.norm2_gamma + d],
                d,
                dgamma,
                dbeta,
                &mut dx,
            );

            self.token_mix_backward(o, lc, &dx, &mut dy, g, d, ht);
            debug_assert_eq!(o.norm1_beta, o.norm1_gamma + d);
            let (dgamma, dbeta) = g[o.norm1_gamma..o.norm1_gamma + 2 * d].split_at_mut(d);
            normalize_rows_backward(
                &dy,
                &lc.xhat1,
                &lc.inv_std1,
                &p[o.norm1_gamma..o.norm1_gamma + d],
                d,
                dgamma,
                dbeta,
                &mut dx,
            );
        }

        // embedding
        let mut din = [0.0; TOKENS];
        for t in 0..TOKENS {
            for c in 0..d {
                let i = t * d + c;
                g[lay.embed_w + i] += dx[i] * cache.input[t];
                g[lay.embed_b + i] += dx[i];
                din[t] += dx[i] * p[lay.embed_w + i];
            }
        }
        if let Some(out) = input_grad {
            for t in 0..TOKENS {
                out[t] += din[t];
            }
        }
    }

    /// Given `dx` (gradient at the channel-mix output, which also flows
    /// through the skip), writes `dy` at the channel-MLP input.
    #[allow(clippy::too_many_arguments)]
    fn channel_mix_backward(
        &self,
        o: &LayerOffsets,
        lc: &LayerCache,
        dx: &[f64],
        dy: &mut [f64],
        g: &mut [f64],
        d: usize,
        hc: usize,
    ) {
        let p = &self.params;
        dy.fill(0.0);
        let mut dh = vec![0.0; hc];
        for t in 0..TOKENS {
            dh.fill(0.0);
            for c in 0..d {
                let up = dx[t * d + c];
                g[o.ch_b2 + c] += up;
                for k in 0..hc {
                    let h = lc.ch_act[t * hc + k];
                    g[o.ch_w2 + c * hc + k] += up * h;
                    dh[k] += up * p[o.ch_w2 + c * hc + k];
                }
            }
            for k in 0..hc {
                let da = dh[k] * lc.ch_slope[t * hc + k];
                g[o.ch_b1 + k] += da;
                for c in 0..d {
                    g[o.ch_w1 + k * d + c] += da * lc.y2[t * d + c];
                    dy[t * d + c] += da * p[o.ch_w1 + k * d + c];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn token_mix_backward(
        &self,
        o: &LayerOffsets,
        lc: &LayerCache,
        dx: &[f64],
        dy: &mut [f64],
        g: &mut [f64],
        d: usize,
        ht: usize,
    ) {
        let p = &self.params;
        dy.fill(0.0);
        let mut dh = vec![0.0; ht];
        for c in 0..d {
            dh.fill(0.0);
            for t in 0..TOKENS {
                let up = dx[t * d + c];
                g[o.tok_b2 + t] += up;
                for j in 0..ht {
                    let h = lc.tok_act[c * ht + j];
                    g[o.tok_w2 + t * ht + j] += up * h;
                    dh[j] += up * p[o.tok_w2 + t * ht + j];
                }
            }
            // token-MLP input is the norm1 output: y = gamma * xhat + beta
            for j in 0..ht {
                let da = dh[j] * lc.tok_slope[c * ht + j];
                g[o.tok_b1 + j] += da;
                for t in 0..TOKENS {
                    let yv = p[o.norm1_gamma + c] * lc.xhat1[t * d + c] + p[o.norm1_beta + c];
                    g[o.tok_w1 + j * TOKENS + t] += da * yv;
                    dy[t * d + c] += da * p[o.tok_w1 + j * TOKENS + t];
                }
            }
        }
    }
}
