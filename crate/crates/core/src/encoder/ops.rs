//! Dense kernels and their exact derivatives. Matrices are row-major slices.

use super::Float;

pub const LAYER_NORM_EPS: f64 = 1e-12;
/// Additive pre-softmax score for padding keys.
pub const MASK_VALUE: f64 = -1e9;

/// `y = x · w + b` for `x: rows×inp`, `w: inp×out`.
pub fn linear<T: Float>(x: &[T], w: &[T], b: &[T], rows: usize, inp: usize, out: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * inp);
    debug_assert_eq!(w.len(), inp * out);
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    for r in 0..rows {
        let yr = &mut y[r * out..(r + 1) * out];
        for (k, &xv) in x[r * inp..(r + 1) * inp].iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            for (yv, &wv) in yr.iter_mut().zip(&w[k * out..(k + 1) * out]) {
                *yv += xv * wv;
            }
        }
    }
    y
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ_rows dy` and, when given, `dx += dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Float>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    inp: usize,
    out: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    for r in 0..rows {
        let dyr = &dy[r * out..(r + 1) * out];
        for (d, &g) in db.iter_mut().zip(dyr) {
            *d += g;
        }
        for (k, &xv) in x[r * inp..(r + 1) * inp].iter().enumerate() {
            if xv == T::zero() {
                continue;
            }
            for (d, &g) in dw[k * out..(k + 1) * out].iter_mut().zip(dyr) {
                *d += xv * g;
            }
        }
    }
    if let Some(dx) = dx {
        for r in 0..rows {
            let dyr = &dy[r * out..(r + 1) * out];
            for k in 0..inp {
                let wk = &w[k * out..(k + 1) * out];
                dx[r * inp + k] += dyr.iter().zip(wk).map(|(&a, &b)| a * b).sum::<T>();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization to zero mean and unit (biased) variance, then
/// `gamma * xhat + beta`.
pub fn layer_norm<T: Float>(x: &[T], gamma: &[T], beta: &[T], rows: usize, dim: usize) -> (Vec<T>, LayerNormCache<T>) {
    let n = T::of(dim as f64);
    let eps = T::of(LAYER_NORM_EPS);
    let mut y = vec![T::zero(); rows * dim];
    let mut xhat = vec![T::zero(); rows * dim];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for c in 0..dim {
            let h = (xr[c] - mean) * is;
            xhat[r * dim + c] = h;
            y[r * dim + c] = gamma[c] * h + beta[c];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dgamma`, `dbeta`.
pub fn layer_norm_backward<T: Float>(
    dy: &[T],
    gamma: &[T],
    cache: &LayerNormCache<T>,
    rows: usize,
    dim: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let n = T::of(dim as f64);
    let mut dx = vec![T::zero(); rows * dim];
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let dyr = &dy[r * dim..(r + 1) * dim];
        let mut sum = T::zero();
        let mut sum_xh = T::zero();
        for c in 0..dim {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            dxhat[c] = dyr[c] * gamma[c];
            sum += dxhat[c];
            sum_xh += dxhat[c] * xh[c];
        }
        let scale = cache.inv_std[r] / n;
        for c in 0..dim {
            dx[r * dim + c] = scale * (n * dxhat[c] - sum - xh[c] * sum_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cross-entropy of one logit row against `target`; returns the loss and
/// `d loss / d logits`.
pub fn softmax_cross_entropy<T: Float>(logits: &[T], target: usize) -> (T, Vec<T>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    let loss = lse - logits[target];
    p[target] -= T::one();
    (loss, p)
}
