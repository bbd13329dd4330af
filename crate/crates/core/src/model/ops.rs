//! Shared numerical primitives for the encoder: layer norm, row softmax and
//! GELU, each with its backward pass.

use ndarray::{Array1, Array2, Axis};

use crate::scalar::Float;

pub const LN_EPS: f64 = 1e-5;

/// Cache of a layer-norm application over token rows.
#[derive(Debug, Clone)]
pub struct LnCache<F> {
    pub xhat: Array2<F>,
    pub inv_std: Array1<F>,
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta, per row.
pub fn layer_norm<F: Float>(
    x: &Array2<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array2<F>, LnCache<F>) {
    let (n, d) = x.dim();
    let eps = F::from_f64(LN_EPS);
    let dim = F::from_usize(d);
    let mut xhat = Array2::zeros((n, d));
    let mut inv_std = Array1::zeros(n);
    let mut y = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / dim;
        let mut var = F::zero();
        for &v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= dim;
        let is = (var + eps).sqrt().recip();
        inv_std[i] = is;
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat[[i, j]] = xh;
            y[[i, j]] = gamma[j] * xh + beta[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Backward of [`layer_norm`]; returns dx and accumulates dgamma/dbeta.
pub fn layer_norm_backward<F: Float>(
    dy: &Array2<F>,
    gamma: &Array1<F>,
    cache: &LnCache<F>,
    dgamma: &mut Array1<F>,
    dbeta: &mut Array1<F>,
) -> Array2<F> {
    let (n, d) = dy.dim();
    let dim = F::from_usize(d);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_g = F::zero();
        let mut mean_gx = F::zero();
        for j in 0..d {
            let g = dy[[i, j]] * gamma[j];
            mean_g += g;
            mean_gx += g * cache.xhat[[i, j]];
            dgamma[j] += dy[[i, j]] * cache.xhat[[i, j]];
            dbeta[j] += dy[[i, j]];
        }
        mean_g /= dim;
        mean_gx /= dim;
        for j in 0..d {
            let g = dy[[i, j]] * gamma[j];
            dx[[i, j]] = cache.inv_std[i] * (g - mean_g - cache.xhat[[i, j]] * mean_gx);
        }
    }
    dx
}

/// Row-wise softmax (numerically stabilized).
pub fn softmax_rows<F: Float>(scores: &Array2<F>) -> Array2<F> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of row softmax: dS = P * (dP - sum(dP * P)).
pub fn softmax_rows_backward<F: Float>(probs: &Array2<F>, dprobs: &Array2<F>) -> Array2<F> {
    let (n, m) = probs.dim();
    let mut ds = Array2::zeros((n, m));
    for i in 0..n {
        let mut dot = F::zero();
        for j in 0..m {
            dot += dprobs[[i, j]] * probs[[i, j]];
        }
        for j in 0..m {
            ds[[i, j]] = probs[[i, j]] * (dprobs[[i, j]] - dot);
        }
    }
    ds
}

/// GELU (tanh approximation).
pub fn gelu<F: Float>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

/// Column sums, used for bias gradients.
pub fn col_sum<F: Float>(m: &Array2<F>) -> Array1<F> {
    m.sum_axis(Axis(0))
}
