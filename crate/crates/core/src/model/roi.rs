//! ROI-Align over the encoded token grid.
//!
//! The keyframe box is replicated to every temporal index ("tube" pooling).
//! For each temporal slice an s_h x s_w grid of bin centers is sampled
//! bilinearly from the h x w token map (one sample per bin), and the pooled
//! feature is the average over bins and time. Sampling is linear in the
//! token values, so the backward pass scatters with the same weights.

use ndarray::{Array1, Array2};

use crate::data::BoxCoords;
use crate::error::{Error, Result};
use crate::model::TokenGrid;
use crate::scalar::Float;

struct Tap {
    row: usize,
    weight: f64,
}

/// Bilinear taps for every (temporal index, bin) sample point of a box.
fn sample_taps<F: Float>(
    grid: &TokenGrid<F>,
    coords: &BoxCoords,
    roi_grid: (usize, usize),
) -> Result<Vec<Tap>> {
    let (s_h, s_w) = roi_grid;
    let (h, w) = (grid.h, grid.w);
    let bw = F::from_f64(coords.x2 - coords.x1) * F::from_usize(w);
    let bh = F::from_f64(coords.y2 - coords.y1) * F::from_usize(h);
    if !(bw > F::zero()) || !(bh > F::zero()) {
        return Err(Error::DegenerateBox(coords.as_array()));
    }
    let total = grid.t * s_h * s_w;
    let norm = 1.0 / total as f64;
    let mut taps = Vec::with_capacity(total * 4);
    for tau in 0..grid.t {
        for a in 0..s_h {
            for b in 0..s_w {
                let y = coords.y1 + (a as f64 + 0.5) * (coords.y2 - coords.y1) / s_h as f64;
                let x = coords.x1 + (b as f64 + 0.5) * (coords.x2 - coords.x1) / s_w as f64;
                // Token (i, j) has its center at ((j+0.5)/w, (i+0.5)/h).
                let fy = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
                let fx = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let y0 = fy.floor() as usize;
                let x0 = fx.floor() as usize;
                let y1 = (y0 + 1).min(h - 1);
                let x1 = (x0 + 1).min(w - 1);
                let wy = fy - y0 as f64;
                let wx = fx - x0 as f64;
                let corners = [
                    (y0, x0, (1.0 - wy) * (1.0 - wx)),
                    (y0, x1, (1.0 - wy) * wx),
                    (y1, x0, wy * (1.0 - wx)),
                    (y1, x1, wy * wx),
                ];
                for (iy, ix, weight) in corners {
                    if weight != 0.0 {
                        taps.push(Tap {
                            row: grid.row_index(tau, iy, ix),
                            weight: weight * norm,
                        });
                    }
                }
            }
        }
    }
    Ok(taps)
}

/// Pool the token grid inside a box into one d-vector.
pub fn roi_align<F: Float>(
    grid: &TokenGrid<F>,
    coords: &BoxCoords,
    roi_grid: (usize, usize),
) -> Result<Array1<F>> {
    let taps = sample_taps(grid, coords, roi_grid)?;
    let d = grid.dim();
    let mut out = Array1::zeros(d);
    for tap in &taps {
        let weight = F::from_f64(tap.weight);
        let row = grid.tokens.row(tap.row);
        for j in 0..d {
            out[j] += weight * row[j];
        }
    }
    Ok(out)
}

/// Scatter the pooled-feature gradient back onto the token grid.
pub fn roi_align_backward<F: Float>(
    grid: &TokenGrid<F>,
    coords: &BoxCoords,
    roi_grid: (usize, usize),
    dpooled: &Array1<F>,
    dtokens: &mut Array2<F>,
) -> Result<()> {
    let taps = sample_taps(grid, coords, roi_grid)?;
    for tap in &taps {
        let weight = F::from_f64(tap.weight);
        let mut row = dtokens.row_mut(tap.row);
        for j in 0..dpooled.len() {
            row[j] += weight * dpooled[j];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, uniform};

    fn grid_from_fn(t: usize, h: usize, w: usize, d: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> TokenGrid<f64> {
        let mut tokens = Array2::zeros((t * h * w, d));
        for tau in 0..t {
            for y in 0..h {
                for x in 0..w {
                    for j in 0..d {
                        tokens[[(tau * h + y) * w + x, j]] = f(tau, y, x, j);
                    }
                }
            }
        }
        TokenGrid::new(t, h, w, tokens).unwrap()
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let grid = grid_from_fn(2, 5, 5, 3, |_, _, _, j| 1.5 + j as f64);
        let bx = BoxCoords::new(0.13, 0.2, 0.77, 0.9).unwrap();
        let out = roi_align(&grid, &bx, (3, 3)).unwrap();
        for j in 0..3 {
            assert!((out[j] - (1.5 + j as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn full_box_with_matching_grid_is_average_pool() {
        // s_h = h, s_w = w on the unit box puts each bin center exactly on a
        // token center; the result must equal plain average pooling, which
        // the oracle below computes directly.
        let grid = grid_from_fn(2, 4, 4, 3, |t, y, x, j| {
            ((t * 131 + y * 17 + x * 5 + j * 3) % 23) as f64 / 23.0
        });
        let bx = BoxCoords::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let out = roi_align(&grid, &bx, (4, 4)).unwrap();
        for j in 0..3 {
            let mean: f64 =
                grid.tokens.column(j).iter().sum::<f64>() / grid.tokens.nrows() as f64;
            assert!((out[j] - mean).abs() < 1e-12, "channel {j}");
        }
    }

    #[test]
    fn translating_box_and_grid_together_is_invariant() {
        // Shift both the box and the token values by exactly one cell.
        let h = 6;
        let w = 6;
        let value = |t: usize, y: usize, x: usize, j: usize| {
            ((t * 7 + y * 13 + x * 29 + j) % 19) as f64 / 19.0
        };
        let grid_a = grid_from_fn(2, h, w, 2, value);
        let grid_b = grid_from_fn(2, h, w, 2, |t, y, x, j| {
            // Values translated one cell right/down.
            if y == 0 || x == 0 {
                0.0
            } else {
                value(t, y - 1, x - 1, j)
            }
        });
        let cell = 1.0 / w as f64;
        let bx_a = BoxCoords::new(cell, cell, 3.0 * cell, 3.0 * cell).unwrap();
        let bx_b = BoxCoords::new(2.0 * cell, 2.0 * cell, 4.0 * cell, 4.0 * cell).unwrap();
        let out_a = roi_align(&grid_a, &bx_a, (3, 3)).unwrap();
        let out_b = roi_align(&grid_b, &bx_b, (3, 3)).unwrap();
        for j in 0..2 {
            assert!((out_a[j] - out_b[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_is_linear_in_tokens() {
        let mut rng = derive_rng(8, "roi-lin", 0, 0);
        for _ in 0..100 {
            let a = grid_from_fn(2, 4, 4, 2, |t, y, x, j| ((t + y * 2 + x * 3 + j) % 11) as f64);
            let b = grid_from_fn(2, 4, 4, 2, |t, y, x, j| ((t * 5 + y + x + 2 * j) % 7) as f64);
            let alpha = uniform(&mut rng, -2.0, 2.0);
            let beta = uniform(&mut rng, -2.0, 2.0);
            let x1 = uniform(&mut rng, 0.0, 0.6);
            let y1 = uniform(&mut rng, 0.0, 0.6);
            let bx = BoxCoords::new(x1, y1, x1 + uniform(&mut rng, 0.1, 0.39), y1 + uniform(&mut rng, 0.1, 0.39)).unwrap();
            let combo = TokenGrid::new(
                2,
                4,
                4,
                a.tokens.mapv(|v| alpha * v) + b.tokens.mapv(|v| beta * v),
            )
            .unwrap();
            let lhs = roi_align(&combo, &bx, (2, 2)).unwrap();
            let ra = roi_align(&a, &bx, (2, 2)).unwrap();
            let rb = roi_align(&b, &bx, (2, 2)).unwrap();
            for j in 0..2 {
                let rhs = alpha * ra[j] + beta * rb[j];
                let denom = rhs.abs().max(1.0);
                assert!(((lhs[j] - rhs) / denom).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn degenerate_box_errors() {
        let grid = grid_from_fn(1, 4, 4, 2, |_, _, _, _| 1.0);
        let bx = BoxCoords {
            x1: 0.3,
            y1: 0.3,
            x2: 0.3,
            y2: 0.7,
        };
        assert!(matches!(
            roi_align(&grid, &bx, (2, 2)),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn backward_is_transpose_of_forward() {
        // <roi(T), g> == <T, roi^T(g)> for random T and g.
        let grid = grid_from_fn(2, 4, 4, 3, |t, y, x, j| {
            ((t * 3 + y * 7 + x * 11 + j * 5) % 13) as f64 / 13.0 - 0.4
        });
        let bx = BoxCoords::new(0.21, 0.13, 0.74, 0.66).unwrap();
        let pooled = roi_align(&grid, &bx, (3, 2)).unwrap();
        let g = Array1::from_vec(vec![0.3, -1.2, 0.7]);
        let lhs: f64 = pooled.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let mut dtokens = Array2::zeros(grid.tokens.dim());
        roi_align_backward(&grid, &bx, (3, 2), &g, &mut dtokens).unwrap();
        let rhs: f64 = dtokens
            .iter()
            .zip(grid.tokens.iter())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
