//! Task heads: a linear classifier over the mean-pooled tokens, and the
//! detection head that projects each ROI-Aligned proposal feature.

use ndarray::{Array1, Array2, Axis};

use crate::data::BoxCoords;
use crate::error::Result;
use crate::model::roi::{roi_align, roi_align_backward};
use crate::model::TokenGrid;
use crate::scalar::Float;

/// y = W^i z^v with z^v the mean over all encoded tokens.
pub fn classify_with_cache<F: Float>(
    grid: &TokenGrid<F>,
    weight: &Array2<F>,
) -> (Array1<F>, Array1<F>) {
    let n = F::from_usize(grid.num_tokens());
    let mean = grid.tokens.sum_axis(Axis(0)).mapv(|v| v / n);
    let logits = mean.dot(weight);
    (logits, mean)
}

pub fn classify_head<F: Float>(grid: &TokenGrid<F>, weight: &Array2<F>) -> Array1<F> {
    classify_with_cache(grid, weight).0
}

/// Backward of the classification head; returns the token-grid gradient.
pub fn classify_backward<F: Float>(
    grid: &TokenGrid<F>,
    mean: &Array1<F>,
    weight: &Array2<F>,
    dlogits: &Array1<F>,
    gweight: &mut Array2<F>,
) -> Array2<F> {
    let d = mean.len();
    let k = dlogits.len();
    for i in 0..d {
        for j in 0..k {
            gweight[[i, j]] += mean[i] * dlogits[j];
        }
    }
    let dmean = weight.dot(dlogits);
    let n = grid.num_tokens();
    let scale = F::one() / F::from_usize(n);
    let mut dtokens = Array2::zeros(grid.tokens.dim());
    for mut row in dtokens.rows_mut() {
        for j in 0..d {
            row[j] = dmean[j] * scale;
        }
    }
    dtokens
}

/// Row j of the logits is `W roi_align(z^L, p_j) + b`.
pub fn detect_with_cache<F: Float>(
    grid: &TokenGrid<F>,
    proposals: &[BoxCoords],
    roi_grid: (usize, usize),
    weight: &Array2<F>,
    bias: &Array1<F>,
) -> Result<(Array2<F>, Array2<F>)> {
    let d = grid.dim();
    let k = weight.ncols();
    let mut pooled = Array2::zeros((proposals.len(), d));
    for (j, coords) in proposals.iter().enumerate() {
        let feat = roi_align(grid, coords, roi_grid)?;
        pooled.row_mut(j).assign(&feat);
    }
    let mut logits = pooled.dot(weight);
    for mut row in logits.rows_mut() {
        for c in 0..k {
            row[c] += bias[c];
        }
    }
    Ok((logits, pooled))
}

pub fn detect_head<F: Float>(
    grid: &TokenGrid<F>,
    proposals: &[BoxCoords],
    roi_grid: (usize, usize),
    weight: &Array2<F>,
    bias: &Array1<F>,
) -> Result<Array2<F>> {
    detect_with_cache(grid, proposals, roi_grid, weight, bias).map(|(l, _)| l)
}

/// Backward of the detection head; returns the token-grid gradient.
#[allow(clippy::too_many_arguments)]
pub fn detect_backward<F: Float>(
    grid: &TokenGrid<F>,
    pooled: &Array2<F>,
    proposals: &[BoxCoords],
    roi_grid: (usize, usize),
    weight: &Array2<F>,
    dlogits: &Array2<F>,
    gweight: &mut Array2<F>,
    gbias: &mut Array1<F>,
) -> Result<Array2<F>> {
    *gweight += &pooled.t().dot(dlogits);
    *gbias += &dlogits.sum_axis(Axis(0));
    let dpooled = dlogits.dot(&weight.t());
    let mut dtokens = Array2::zeros(grid.tokens.dim());
    for (j, coords) in proposals.iter().enumerate() {
        roi_align_backward(grid, coords, roi_grid, &dpooled.row(j).to_owned(), &mut dtokens)?;
    }
    Ok(dtokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, uniform};

    fn random_grid(seed: u64, t: usize, h: usize, w: usize, d: usize) -> TokenGrid<f64> {
        let mut rng = derive_rng(seed, "head-grid", 0, 0);
        let tokens = Array2::from_shape_fn((t * h * w, d), |_| uniform(&mut rng, -1.0, 1.0));
        TokenGrid::new(t, h, w, tokens).unwrap()
    }

    #[test]
    fn classification_is_permutation_invariant() {
        let grid = random_grid(1, 2, 3, 3, 4);
        let mut rng = derive_rng(2, "head-w", 0, 0);
        let weight = Array2::from_shape_fn((4, 5), |_| uniform(&mut rng, -1.0, 1.0));
        let logits = classify_head(&grid, &weight);

        let mut perm: Vec<usize> = (0..grid.num_tokens()).collect();
        perm.reverse();
        perm.swap(0, 7);
        let permuted = Array2::from_shape_fn((grid.num_tokens(), 4), |(i, j)| {
            grid.tokens[[perm[i], j]]
        });
        let grid_p = TokenGrid::new(2, 3, 3, permuted).unwrap();
        let logits_p = classify_head(&grid_p, &weight);
        for j in 0..5 {
            assert!((logits[j] - logits_p[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_tokens_give_direct_projection() {
        let v = Array1::from_vec(vec![0.4, -1.0, 2.0]);
        let tokens = Array2::from_shape_fn((6, 3), |(_, j)| v[j]);
        let grid = TokenGrid::new(1, 2, 3, tokens).unwrap();
        let mut rng = derive_rng(3, "head-w", 0, 0);
        let weight = Array2::from_shape_fn((3, 2), |_| uniform(&mut rng, -1.0, 1.0));
        let logits = classify_head(&grid, &weight);
        let direct = v.dot(&weight);
        for j in 0..2 {
            assert!((logits[j] - direct[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn classification_matches_two_step_oracle() {
        let grid = random_grid(4, 2, 2, 2, 3);
        let mut rng = derive_rng(5, "head-w", 0, 0);
        let weight = Array2::from_shape_fn((3, 4), |_| uniform(&mut rng, -1.0, 1.0));
        let logits = classify_head(&grid, &weight);
        // Oracle: explicit mean then explicit matrix product.
        for c in 0..4 {
            let mut acc = 0.0;
            for j in 0..3 {
                let mean: f64 =
                    grid.tokens.column(j).iter().sum::<f64>() / grid.num_tokens() as f64;
                acc += mean * weight[[j, c]];
            }
            assert!((logits[c] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicate_proposals_give_identical_rows() {
        let grid = random_grid(6, 2, 4, 4, 5);
        let mut rng = derive_rng(7, "head-w", 0, 0);
        let weight = Array2::from_shape_fn((5, 3), |_| uniform(&mut rng, -1.0, 1.0));
        let bias = Array1::from_vec(vec![0.1, -0.2, 0.3]);
        let bx = BoxCoords::new(0.2, 0.3, 0.7, 0.8).unwrap();
        let logits = detect_head(&grid, &[bx, bx], (2, 2), &weight, &bias).unwrap();
        for c in 0..3 {
            assert_eq!(logits[[0, c]], logits[[1, c]]);
        }
    }

    #[test]
    fn identity_projection_returns_pooled_feature() {
        let grid = random_grid(8, 1, 4, 4, 4);
        let weight = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let bias = Array1::zeros(4);
        let bx = BoxCoords::new(0.1, 0.1, 0.9, 0.9).unwrap();
        let logits = detect_head(&grid, &[bx], (3, 3), &weight, &bias).unwrap();
        let pooled = roi_align(&grid, &bx, (3, 3)).unwrap();
        for j in 0..4 {
            assert!((logits[[0, j]] - pooled[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_matches_sequential_oracle() {
        let grid = random_grid(9, 2, 4, 4, 4);
        let mut rng = derive_rng(10, "head-w", 0, 0);
        let weight = Array2::from_shape_fn((4, 6), |_| uniform(&mut rng, -1.0, 1.0));
        let bias = Array1::from_shape_fn(6, |_| uniform(&mut rng, -0.5, 0.5));
        let boxes = [
            BoxCoords::new(0.05, 0.1, 0.5, 0.45).unwrap(),
            BoxCoords::new(0.3, 0.3, 0.9, 0.95).unwrap(),
            BoxCoords::new(0.6, 0.05, 0.85, 0.5).unwrap(),
        ];
        let logits = detect_head(&grid, &boxes, (2, 3), &weight, &bias).unwrap();
        // Oracle: per-proposal loop over an explicit projection.
        for (j, bx) in boxes.iter().enumerate() {
            let feat = roi_align(&grid, bx, (2, 3)).unwrap();
            for c in 0..6 {
                let mut acc = bias[c];
                for i in 0..4 {
                    acc += feat[i] * weight[[i, c]];
                }
                assert!((logits[[j, c]] - acc).abs() < 1e-12);
            }
        }
    }
}
