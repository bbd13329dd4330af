//! Tubelet tokenizer: each t x h x w x C tubelet is flattened, linearly
//! projected to the hidden dimension and offset by a learned positional
//! embedding, producing the token grid the encoder consumes.

use ndarray::Array2;

use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::model::{BackboneParams, ModelConfig, TokenGrid};
use crate::scalar::Float;

/// Flatten the clip into one row per tubelet, in (t, h, w) token order with
/// (dt, dy, dx, c) order inside each tubelet.
fn tubelet_matrix<F: Float>(clip: &VideoClip<F>, config: &ModelConfig) -> Result<Array2<F>> {
    let (t, h, w, c) = clip.shape();
    if t != config.input_t || h != config.input_h || w != config.input_w || c != config.input_c {
        return Err(Error::Shape(format!(
            "clip {} is {t}x{h}x{w}x{c}, model expects {}x{}x{}x{}",
            clip.id, config.input_t, config.input_h, config.input_w, config.input_c
        )));
    }
    let (tp, hp, wp) = config.tubelet;
    let (gt, gh, gw) = config.grid_dims();
    let p = config.patch_dim();
    let mut x = Array2::zeros((gt * gh * gw, p));
    for it in 0..gt {
        for iy in 0..gh {
            for ix in 0..gw {
                let row = (it * gh + iy) * gw + ix;
                let mut col = 0;
                for dt in 0..tp {
                    for dy in 0..hp {
                        for dx in 0..wp {
                            for ch in 0..c {
                                x[[row, col]] =
                                    clip.frames[[it * tp + dt, iy * hp + dy, ix * wp + dx, ch]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Tokenize and keep the flattened tubelets for the backward pass.
pub fn tokenize_with_cache<F: Float>(
    clip: &VideoClip<F>,
    config: &ModelConfig,
    backbone: &BackboneParams<F>,
) -> Result<(TokenGrid<F>, Array2<F>)> {
    let x = tubelet_matrix(clip, config)?;
    let mut tokens = x.dot(&backbone.patch_weight);
    for mut row in tokens.rows_mut() {
        row += &backbone.patch_bias;
    }
    tokens += &backbone.pos_embed;
    let (gt, gh, gw) = config.grid_dims();
    Ok((TokenGrid::new(gt, gh, gw, tokens)?, x))
}

/// Extract the token grid from a clip.
pub fn tokenize<F: Float>(
    clip: &VideoClip<F>,
    config: &ModelConfig,
    backbone: &BackboneParams<F>,
) -> Result<TokenGrid<F>> {
    tokenize_with_cache(clip, config, backbone).map(|(g, _)| g)
}

/// Accumulate tokenizer gradients from the token-grid gradient.
pub fn tokenize_backward<F: Float>(
    tok_x: &Array2<F>,
    _patch_weight: &Array2<F>,
    dtokens: &Array2<F>,
    grads: &mut BackboneParams<F>,
) {
    grads.patch_weight += &tok_x.t().dot(dtokens);
    grads.patch_bias += &dtokens.sum_axis(ndarray::Axis(0));
    grads.pos_embed += dtokens;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;
    use crate::model::{HeadSpec, ModelState};
    use ndarray::Array4;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_t: 4,
            input_h: 8,
            input_w: 8,
            input_c: 2,
            tubelet: (2, 4, 4),
            hidden_dim: 6,
            num_layers: 0,
            num_heads: 2,
            mlp_hidden: 8,
            stochastic_depth_rate: 0.0,
            roi_grid: (2, 2),
            heads: vec![HeadSpec {
                task: TaskKind::Classification,
                num_classes: 3,
            }],
        }
    }

    fn clip(value: f64) -> VideoClip<f64> {
        VideoClip::new(
            "c",
            Array4::from_elem((4, 8, 8, 2), value),
            1,
        )
        .unwrap()
    }

    #[test]
    fn grid_shape_and_token_count() {
        let cfg = cfg();
        let state = ModelState::<f64>::init(cfg.clone(), 1).unwrap();
        let grid = tokenize(&clip(0.5), &cfg, &state.backbone).unwrap();
        assert_eq!((grid.t, grid.h, grid.w), (2, 2, 2));
        assert_eq!(grid.num_tokens(), grid.t * grid.h * grid.w);
        assert_eq!(grid.tokens.dim(), (8, 6));
    }

    #[test]
    fn zero_everything_gives_zero_tokens() {
        let cfg = cfg();
        let mut state = ModelState::<f64>::init(cfg.clone(), 1).unwrap();
        state.backbone.patch_weight.fill(0.0);
        state.backbone.pos_embed.fill(0.0);
        let grid = tokenize(&clip(0.0), &cfg, &state.backbone).unwrap();
        assert!(grid.tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_two_step_oracle() {
        // Oracle: explicit flatten + explicit matrix product per token.
        let cfg = cfg();
        let state = ModelState::<f64>::init(cfg.clone(), 3).unwrap();
        let clip = VideoClip::new(
            "c",
            Array4::from_shape_fn((4, 8, 8, 2), |(t, y, x, c)| {
                ((t * 311 + y * 37 + x * 7 + c * 3) % 97) as f64 / 96.0
            }),
            1,
        )
        .unwrap();
        let grid = tokenize(&clip, &cfg, &state.backbone).unwrap();
        // Token (1, 0, 1) by direct summation.
        let (it, iy, ix) = (1usize, 0usize, 1usize);
        let row = (it * 2 + iy) * 2 + ix;
        for j in 0..6 {
            let mut acc = state.backbone.patch_bias[j] + state.backbone.pos_embed[[row, j]];
            let mut col = 0;
            for dt in 0..2 {
                for dy in 0..4 {
                    for dx in 0..4 {
                        for ch in 0..2 {
                            acc += clip.frames[[it * 2 + dt, iy * 4 + dy, ix * 4 + dx, ch]]
                                * state.backbone.patch_weight[[col, j]];
                            col += 1;
                        }
                    }
                }
            }
            assert!((grid.tokens[[row, j]] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_clip() {
        let cfg = cfg();
        let state = ModelState::<f64>::init(cfg.clone(), 1).unwrap();
        let bad = VideoClip::new("b", Array4::from_elem((4, 8, 6, 2), 0.1), 1).unwrap();
        assert!(tokenize(&bad, &cfg, &state.backbone).is_err());
    }
}
