//! Joint spatio-temporal transformer encoder: L pre-norm blocks of
//! multi-head self-attention and a GELU MLP over all tubelet tokens.
//!
//! Stochastic depth drops each residual branch independently at train time
//! with inverted scaling (kept branches are multiplied by 1/(1-rate)), so
//! eval mode is the plain deterministic network.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ops::{
    col_sum, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows,
    softmax_rows_backward, LnCache,
};
use crate::model::{LayerParams, TokenGrid};
use crate::scalar::Float;

/// Train mode draws stochastic-depth masks from the provided RNG; eval mode
/// is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Eval,
}

pub struct AttnCache<F> {
    pub ln: LnCache<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Per-head softmax attention probabilities (N x N each).
    pub probs: Vec<Array2<F>>,
    /// Concatenated per-head context, before the output projection.
    pub ctx: Array2<F>,
}

pub struct MlpCache<F> {
    pub ln: LnCache<F>,
    pub pre: Array2<F>,
    pub act: Array2<F>,
}

/// Activations of one encoder block. Dropped branches store no cache.
pub struct LayerCache<F> {
    pub input: Array2<F>,
    pub attn: Option<AttnCache<F>>,
    pub attn_scale: F,
    pub z1: Array2<F>,
    pub mlp: Option<MlpCache<F>>,
    pub mlp_scale: F,
}

fn branch_scale<F: Float>(rate: F, mode: EncodeMode, rng: &mut Option<&mut ChaCha8Rng>) -> F {
    if mode == EncodeMode::Eval || rate == F::zero() {
        return F::one();
    }
    let rng = rng
        .as_deref_mut()
        .expect("train mode with stochastic depth needs an rng");
    let u: f64 = rng.random();
    if u < rate.to_f64() {
        F::zero()
    } else {
        F::one() / (F::one() - rate)
    }
}

fn attention_branch<F: Float>(z: &Array2<F>, params: &LayerParams<F>, num_heads: usize) -> (Array2<F>, AttnCache<F>) {
    let (n, d) = z.dim();
    let dh = d / num_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let (u, ln) = layer_norm(z, &params.ln1_gamma, &params.ln1_beta);
    let mut q = u.dot(&params.wq);
    let mut k = u.dot(&params.wk);
    let mut v = u.dot(&params.wv);
    for i in 0..n {
        for j in 0..d {
            q[[i, j]] += params.bq[j];
            k[[i, j]] += params.bk[j];
            v[[i, j]] += params.bv[j];
        }
    }
    let mut probs = Vec::with_capacity(num_heads);
    let mut ctx = Array2::zeros((n, d));
    for h in 0..num_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let scores = qh.dot(&kh.t()).mapv(|x| x * scale);
        let a = softmax_rows(&scores);
        let ctx_h = a.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        probs.push(a);
    }
    let mut out = ctx.dot(&params.wo);
    for mut row in out.rows_mut() {
        row += &params.bo;
    }
    (out, AttnCache { ln, q, k, v, probs, ctx })
}

fn mlp_branch<F: Float>(z1: &Array2<F>, params: &LayerParams<F>) -> (Array2<F>, MlpCache<F>) {
    let (u2, ln) = layer_norm(z1, &params.ln2_gamma, &params.ln2_beta);
    let mut pre = u2.dot(&params.w1);
    for mut row in pre.rows_mut() {
        row += &params.b1;
    }
    let act = pre.mapv(gelu);
    let mut out = act.dot(&params.w2);
    for mut row in out.rows_mut() {
        row += &params.b2;
    }
    (out, MlpCache { ln, pre, act })
}

/// Encode the token grid through all layers, recording activations.
pub fn encode_with_cache<F: Float>(
    tokens: TokenGrid<F>,
    layers: &[LayerParams<F>],
    num_heads: usize,
    stochastic_depth_rate: F,
    mode: EncodeMode,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(TokenGrid<F>, Vec<LayerCache<F>>)> {
    let (t, h, w) = (tokens.t, tokens.h, tokens.w);
    let mut z = tokens.tokens;
    let mut caches = Vec::with_capacity(layers.len());
    for params in layers {
        let input = z.clone();
        // Branch draw order is fixed: attention first, then MLP.
        let g1 = branch_scale(stochastic_depth_rate, mode, &mut rng);
        let (attn_out, attn_cache) = if g1 == F::zero() {
            (None, None)
        } else {
            let (o, c) = attention_branch(&z, params, num_heads);
            (Some(o), Some(c))
        };
        if let Some(o) = attn_out {
            z = &z + &o.mapv(|x| x * g1);
        }
        let z1 = z.clone();
        let g2 = branch_scale(stochastic_depth_rate, mode, &mut rng);
        let (mlp_out, mlp_cache) = if g2 == F::zero() {
            (None, None)
        } else {
            let (o, c) = mlp_branch(&z1, params);
            (Some(o), Some(c))
        };
        if let Some(o) = mlp_out {
            z = &z1 + &o.mapv(|x| x * g2);
        }
        caches.push(LayerCache {
            input,
            attn: attn_cache,
            attn_scale: g1,
            z1,
            mlp: mlp_cache,
            mlp_scale: g2,
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("encoder activations".into()));
    }
    Ok((TokenGrid::new(t, h, w, z)?, caches))
}

/// Encode without keeping activations.
pub fn encode<F: Float>(
    tokens: TokenGrid<F>,
    layers: &[LayerParams<F>],
    num_heads: usize,
    stochastic_depth_rate: F,
    mode: EncodeMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<TokenGrid<F>> {
    encode_with_cache(tokens, layers, num_heads, stochastic_depth_rate, mode, rng).map(|(g, _)| g)
}

fn attention_backward<F: Float>(
    cache: &AttnCache<F>,
    params: &LayerParams<F>,
    grads: &mut LayerParams<F>,
    num_heads: usize,
    dout: &Array2<F>,
) -> Array2<F> {
    let (n, d) = dout.dim();
    let dh = d / num_heads;
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    // out = ctx Wo + bo
    grads.wo += &cache.ctx.t().dot(dout);
    grads.bo += &col_sum(dout);
    let dctx = dout.dot(&params.wo.t());
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..num_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let a = &cache.probs[h];
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        let vh = cache.v.slice(cols);
        let dctx_h = dctx.slice(cols);
        // ctx_h = A vh
        let da = dctx_h.dot(&vh.t());
        let dvh = a.t().dot(&dctx_h);
        let ds = softmax_rows_backward(a, &da);
        // S = scale * qh kh^T
        let dqh = ds.dot(&kh).mapv(|x| x * scale);
        let dkh = ds.t().dot(&qh).mapv(|x| x * scale);
        dq.slice_mut(cols).assign(&dqh);
        dk.slice_mut(cols).assign(&dkh);
        dv.slice_mut(cols).assign(&dvh);
    }
    // q = u Wq + bq (and likewise k, v); u = LN1(z)
    let u = cache.ln.xhat.mapv(|x| x) * &params.ln1_gamma + &params.ln1_beta;
    grads.wq += &u.t().dot(&dq);
    grads.bq += &col_sum(&dq);
    grads.wk += &u.t().dot(&dk);
    grads.bk += &col_sum(&dk);
    grads.wv += &u.t().dot(&dv);
    grads.bv += &col_sum(&dv);
    let du = dq.dot(&params.wq.t()) + dk.dot(&params.wk.t()) + dv.dot(&params.wv.t());
    layer_norm_backward(
        &du,
        &params.ln1_gamma,
        &cache.ln,
        &mut grads.ln1_gamma,
        &mut grads.ln1_beta,
    )
}

fn mlp_backward<F: Float>(
    cache: &MlpCache<F>,
    params: &LayerParams<F>,
    grads: &mut LayerParams<F>,
    dout: &Array2<F>,
) -> Array2<F> {
    // out = act W2 + b2; act = gelu(pre); pre = u2 W1 + b1; u2 = LN2(z1)
    grads.w2 += &cache.act.t().dot(dout);
    grads.b2 += &col_sum(dout);
    let dact = dout.dot(&params.w2.t());
    let mut dpre = dact;
    ndarray::Zip::from(&mut dpre).and(&cache.pre).for_each(|g, &p| {
        *g *= gelu_grad(p);
    });
    let u2 = cache.ln.xhat.mapv(|x| x) * &params.ln2_gamma + &params.ln2_beta;
    grads.w1 += &u2.t().dot(&dpre);
    grads.b1 += &col_sum(&dpre);
    let du2 = dpre.dot(&params.w1.t());
    layer_norm_backward(
        &du2,
        &params.ln2_gamma,
        &cache.ln,
        &mut grads.ln2_gamma,
        &mut grads.ln2_beta,
    )
}

/// Backward through all encoder layers; returns the gradient at the token
/// grid that entered the encoder.
pub fn encode_backward<F: Float>(
    caches: &[LayerCache<F>],
    layers: &[LayerParams<F>],
    grads: &mut [LayerParams<F>],
    num_heads: usize,
    dz_top: Array2<F>,
) -> Array2<F> {
    let mut dz = dz_top;
    for i in (0..layers.len()).rev() {
        let cache = &caches[i];
        let params = &layers[i];
        // z2 = z1 + g2 * mlp(z1)
        if let Some(mlp) = &cache.mlp {
            let dout = dz.mapv(|x| x * cache.mlp_scale);
            let dz1 = mlp_backward(mlp, params, &mut grads[i], &dout);
            dz = &dz + &dz1;
        }
        // z1 = z + g1 * attn(z)
        if let Some(attn) = &cache.attn {
            let dout = dz.mapv(|x| x * cache.attn_scale);
            let dzin = attention_backward(attn, params, &mut grads[i], num_heads, &dout);
            dz = &dz + &dzin;
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::model::{HeadSpec, ModelConfig, ModelState};
    use crate::rng::derive_rng;

    fn cfg(layers: usize, rate: f64) -> ModelConfig {
        ModelConfig {
            input_t: 2,
            input_h: 8,
            input_w: 8,
            input_c: 1,
            tubelet: (1, 2, 2),
            hidden_dim: 8,
            num_layers: layers,
            num_heads: 2,
            mlp_hidden: 12,
            stochastic_depth_rate: rate,
            roi_grid: (2, 2),
            heads: vec![HeadSpec {
                task: TaskKind::Classification,
                num_classes: 3,
            }],
        }
    }

    fn random_grid(seed: u64, n: usize, d: usize) -> TokenGrid<f64> {
        let mut rng = derive_rng(seed, "grid", 0, 0);
        let tokens = Array2::from_shape_fn((n, d), |_| crate::rng::uniform(&mut rng, -1.0, 1.0));
        TokenGrid::new(2, 2, n / 4, tokens).unwrap()
    }

    #[test]
    fn zero_layers_is_identity() {
        let grid = random_grid(1, 8, 8);
        let out = encode(grid.clone(), &[], 2, 0.0, EncodeMode::Eval, None).unwrap();
        assert_eq!(grid.tokens, out.tokens);
    }

    #[test]
    fn rate_zero_train_equals_eval() {
        let cfg = cfg(2, 0.0);
        let state = ModelState::<f64>::init(cfg, 11).unwrap();
        let grid = random_grid(2, 8, 8);
        let mut rng = derive_rng(0, "sd", 0, 0);
        let train = encode(
            grid.clone(),
            &state.backbone.layers,
            2,
            0.0,
            EncodeMode::Train,
            Some(&mut rng),
        )
        .unwrap();
        let eval = encode(grid, &state.backbone.layers, 2, 0.0, EncodeMode::Eval, None).unwrap();
        assert_eq!(train.tokens, eval.tokens);
    }

    #[test]
    fn eval_matches_reference_implementation() {
        // Independent re-implementation: per-token loops, no ndarray dot.
        let cfg = cfg(1, 0.0);
        let state = ModelState::<f64>::init(cfg, 21).unwrap();
        let grid = random_grid(3, 8, 8);
        let got = encode(
            grid.clone(),
            &state.backbone.layers,
            2,
            0.0,
            EncodeMode::Eval,
            None,
        )
        .unwrap();

        let p = &state.backbone.layers[0];
        let (n, d) = (8usize, 8usize);
        let dh = 4usize;
        let ln = |z: &Array2<f64>, gamma: &ndarray::Array1<f64>, beta: &ndarray::Array1<f64>| {
            let mut out = Array2::<f64>::zeros((n, d));
            for i in 0..n {
                let mean: f64 = (0..d).map(|j| z[[i, j]]).sum::<f64>() / d as f64;
                let var: f64 = (0..d).map(|j| (z[[i, j]] - mean).powi(2)).sum::<f64>() / d as f64;
                for j in 0..d {
                    out[[i, j]] = gamma[j] * (z[[i, j]] - mean) / (var + 1e-5).sqrt() + beta[j];
                }
            }
            out
        };
        let matmul = |a: &Array2<f64>, b: &Array2<f64>| {
            let mut out = Array2::<f64>::zeros((a.nrows(), b.ncols()));
            for i in 0..a.nrows() {
                for k in 0..b.ncols() {
                    let mut acc = 0.0;
                    for j in 0..a.ncols() {
                        acc += a[[i, j]] * b[[j, k]];
                    }
                    out[[i, k]] = acc;
                }
            }
            out
        };
        let z = grid.tokens.clone();
        let u = ln(&z, &p.ln1_gamma, &p.ln1_beta);
        let mut q = matmul(&u, &p.wq);
        let mut k = matmul(&u, &p.wk);
        let mut v = matmul(&u, &p.wv);
        for i in 0..n {
            for j in 0..d {
                q[[i, j]] += p.bq[j];
                k[[i, j]] += p.bk[j];
                v[[i, j]] += p.bv[j];
            }
        }
        let mut ctx = Array2::<f64>::zeros((n, d));
        for h in 0..2 {
            for i in 0..n {
                let mut scores = vec![0.0f64; n];
                for j in 0..n {
                    let mut acc = 0.0;
                    for c in 0..dh {
                        acc += q[[i, h * dh + c]] * k[[j, h * dh + c]];
                    }
                    scores[j] = acc / (dh as f64).sqrt();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for c in 0..dh {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += exps[j] / sum * v[[j, h * dh + c]];
                    }
                    ctx[[i, h * dh + c]] = acc;
                }
            }
        }
        let mut z1 = matmul(&ctx, &p.wo);
        for i in 0..n {
            for j in 0..d {
                z1[[i, j]] += p.bo[j] + z[[i, j]];
            }
        }
        let u2 = ln(&z1, &p.ln2_gamma, &p.ln2_beta);
        let mut pre = matmul(&u2, &p.w1);
        for i in 0..n {
            for j in 0..12 {
                pre[[i, j]] += p.b1[j];
            }
        }
        let act = pre.mapv(crate::model::ops::gelu);
        let mut z2 = matmul(&act, &p.w2);
        for i in 0..n {
            for j in 0..d {
                z2[[i, j]] += p.b2[j] + z1[[i, j]];
            }
        }
        let max_err = got
            .tokens
            .iter()
            .zip(z2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-12, "max deviation {max_err}");
    }

    #[test]
    fn stochastic_depth_is_deterministic_per_stream() {
        let cfg = cfg(3, 0.5);
        let state = ModelState::<f64>::init(cfg, 4).unwrap();
        let grid = random_grid(4, 8, 8);
        let mut r1 = derive_rng(9, "sd", 0, 0);
        let mut r2 = derive_rng(9, "sd", 0, 0);
        let a = encode(
            grid.clone(),
            &state.backbone.layers,
            2,
            0.5,
            EncodeMode::Train,
            Some(&mut r1),
        )
        .unwrap();
        let b = encode(
            grid,
            &state.backbone.layers,
            2,
            0.5,
            EncodeMode::Train,
            Some(&mut r2),
        )
        .unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}
