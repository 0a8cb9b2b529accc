//! Task heads on top of the encoder: masked-token prediction over the
//! vocabulary, and two-way linear heads (next-sentence, classifier) on the
//! pooled output.
//!
//! Losses are returned as sums; gradients are multiplied by `scale` so the
//! caller can average across a batch without a second pass.

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_cross_entropy, softmax_in_place};
use super::{Float, ModelConfig, ParameterSet};

pub const NSP_PREFIX: &str = "nsp";
pub const CLASSIFIER_PREFIX: &str = "classifier";

/// Vocabulary logits of the MLM head at one hidden state.
pub fn mlm_logits<T: Float>(params: &ParameterSet<T>, config: &ModelConfig, hidden: &[T]) -> Vec<T> {
    let h = config.hidden_dim;
    let z = linear(hidden, params.data("mlm.transform.weight"), params.data("mlm.transform.bias"), 1, h, h);
    let g: Vec<T> = z.iter().map(|&v| gelu(v)).collect();
    let (u, _) = layer_norm(&g, params.data("mlm.ln.gamma"), params.data("mlm.ln.beta"), 1, h);
    linear(&u, params.data("mlm.decoder.weight"), params.data("mlm.decoder.bias"), 1, h, config.vocab_size)
}

/// Summed cross-entropy of the MLM head over `targets` (position, original
/// id). Accumulates `scale`-weighted head gradients into `grads` and returns
/// the matching gradient with respect to `hidden` (`seq_len × hidden_dim`).
pub fn mlm_loss<T: Float>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    hidden: &[T],
    targets: &[(usize, u32)],
    scale: T,
    grads: &mut ParameterSet<T>,
) -> (T, Vec<T>) {
    let (h, v) = (config.hidden_dim, config.vocab_size);
    let mut d_hidden = vec![T::zero(); hidden.len()];
    let mut total = T::zero();
    for &(pos, target) in targets {
        let x = &hidden[pos * h..(pos + 1) * h];
        let z = linear(x, params.data("mlm.transform.weight"), params.data("mlm.transform.bias"), 1, h, h);
        let g: Vec<T> = z.iter().map(|&a| gelu(a)).collect();
        let (u, cache) = layer_norm(&g, params.data("mlm.ln.gamma"), params.data("mlm.ln.beta"), 1, h);
        let logits = linear(&u, params.data("mlm.decoder.weight"), params.data("mlm.decoder.bias"), 1, h, v);
        let (loss, mut dlogits) = softmax_cross_entropy(&logits, target as usize);
        total += loss;
        dlogits.iter_mut().for_each(|d| *d *= scale);

        let mut du = vec![T::zero(); h];
        pair(grads, "mlm.decoder.weight", "mlm.decoder.bias", |dw, db| {
            linear_backward(&u, params.data("mlm.decoder.weight"), &dlogits, 1, h, v, dw, db, Some(&mut du))
        });
        let dg = pair(grads, "mlm.ln.gamma", "mlm.ln.beta", |dgam, dbet| {
            layer_norm_backward(&du, params.data("mlm.ln.gamma"), &cache, 1, h, dgam, dbet)
        });
        let dz: Vec<T> = dg.iter().zip(&z).map(|(&d, &a)| d * gelu_grad(a)).collect();
        pair(grads, "mlm.transform.weight", "mlm.transform.bias", |dw, db| {
            linear_backward(
                x,
                params.data("mlm.transform.weight"),
                &dz,
                1,
                h,
                h,
                dw,
                db,
                Some(&mut d_hidden[pos * h..(pos + 1) * h]),
            )
        });
    }
    (total, d_hidden)
}

/// Two-way logits of the head named `prefix` (`nsp` or `classifier`).
pub fn linear_logits<T: Float>(params: &ParameterSet<T>, prefix: &str, pooled: &[T]) -> Vec<T> {
    let h = pooled.len();
    linear(
        pooled,
        params.data(&format!("{prefix}.weight")),
        params.data(&format!("{prefix}.bias")),
        1,
        h,
        2,
    )
}

/// Probability of class 1 under the head named `prefix`.
pub fn positive_probability<T: Float>(params: &ParameterSet<T>, prefix: &str, pooled: &[T]) -> T {
    let mut p = linear_logits(params, prefix, pooled);
    softmax_in_place(&mut p);
    p[1]
}

/// Cross-entropy of a two-way head against `target`; accumulates
/// `scale`-weighted gradients and returns `(loss, d_pooled)`.
pub fn linear_loss<T: Float>(
    params: &ParameterSet<T>,
    prefix: &str,
    pooled: &[T],
    target: usize,
    scale: T,
    grads: &mut ParameterSet<T>,
) -> (T, Vec<T>) {
    let h = pooled.len();
    let (w, b) = (format!("{prefix}.weight"), format!("{prefix}.bias"));
    let logits = linear(pooled, params.data(&w), params.data(&b), 1, h, 2);
    let (loss, mut dlogits) = softmax_cross_entropy(&logits, target);
    dlogits.iter_mut().for_each(|d| *d *= scale);
    let mut d_pooled = vec![T::zero(); h];
    pair(grads, &w, &b, |dw, db| {
        linear_backward(pooled, params.data(&w), &dlogits, 1, h, 2, dw, db, Some(&mut d_pooled))
    });
    (loss, d_pooled)
}

fn pair<T: Float, R>(grads: &mut ParameterSet<T>, a: &str, b: &str, f: impl FnOnce(&mut [T], &mut [T]) -> R) -> R {
    let mut tb = grads.remove(b).unwrap_or_else(|| panic!("missing gradient `{b}`"));
    let r = f(grads.data_mut(a), &mut tb.data);
    grads.insert(b, tb);
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;

    fn small() -> ModelConfig {
        ModelConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 8,
            ff_dim: 16,
            vocab_size: 20,
            max_position: 16,
            dropout_rate: 0.0,
            init_std: 0.3,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zeroed_heads_give_uniform_losses() {
        let cfg = small();
        let mut p: ParameterSet<f64> = init_params(&cfg).unwrap();
        for name in ["mlm.decoder.weight", "nsp.weight"] {
            p.data_mut(name).iter_mut().for_each(|w| *w = 0.0);
        }
        let hidden: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let mut g = p.zeros_like();
        let (l, _) = mlm_loss(&p, &cfg, &hidden, &[(1, 4)], 1.0, &mut g);
        assert!((l - 20f64.ln()).abs() < 1e-12);
        let (l, _) = linear_loss(&p, NSP_PREFIX, &hidden[..8], 0, 1.0, &mut g);
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mlm_gradient_matches_finite_difference() {
        let cfg = small();
        let p: ParameterSet<f64> = init_params(&cfg).unwrap();
        let hidden: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).cos()).collect();
        let targets = [(0, 3), (2, 11)];
        let mut g = p.zeros_like();
        let (_, dh) = mlm_loss(&p, &cfg, &hidden, &targets, 1.0, &mut g);
        let f = |p: &ParameterSet<f64>, hd: &[f64]| {
            let mut scratch = p.zeros_like();
            mlm_loss(p, &cfg, hd, &targets, 1.0, &mut scratch).0
        };
        let eps = 1e-6;
        for i in [0, 5, 13, 21] {
            let (mut a, mut b) = (hidden.clone(), hidden.clone());
            a[i] += eps;
            b[i] -= eps;
            let num = (f(&p, &a) - f(&p, &b)) / (2.0 * eps);
            assert!((num - dh[i]).abs() < 1e-7, "hidden {i}: {num} vs {}", dh[i]);
        }
        for (name, idx) in [("mlm.transform.weight", 9), ("mlm.ln.gamma", 2), ("mlm.decoder.bias", 11)] {
            let (mut a, mut b) = (p.clone(), p.clone());
            a.data_mut(name)[idx] += eps;
            b.data_mut(name)[idx] -= eps;
            let num = (f(&a, &hidden) - f(&b, &hidden)) / (2.0 * eps);
            assert!((num - g.data(name)[idx]).abs() < 1e-7, "{name}: {num} vs {}", g.data(name)[idx]);
        }
    }
}
