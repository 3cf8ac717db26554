use std::f64::consts::PI;

use super::Tensor;

pub const FOURIER_BANDS: usize = 6;

/// 2-D Fourier features for a `grid_h × grid_w` patch grid, one row per
/// cell in row-major order.
///
/// Each axis coordinate is the cell centre mapped to `u ∈ (-1, 1)`;
/// frequencies are log-spaced from 1 to `n/2` for an axis of `n` cells. A
/// row holds, for the row axis then the column axis, `sin(π f_b u)` for all
/// bands followed by `cos(π f_b u)` for all bands, so its length is
/// `4 · bands`.
pub fn fourier_positions(grid_h: usize, grid_w: usize, bands: usize) -> Tensor {
    assert!(
        grid_h >= 1 && grid_w >= 1 && bands >= 1,
        "degenerate positional grid"
    );
    let axis = |n: usize| -> Vec<Vec<f64>> {
        let top = (n as f64 / 2.0).ln();
        let freqs: Vec<f64> = (0..bands)
            .map(|b| {
                if bands == 1 {
                    1.0
                } else {
                    (top * b as f64 / (bands - 1) as f64).exp()
                }
            })
            .collect();
        (0..n)
            .map(|i| {
                let u = (2 * i + 1) as f64 / n as f64 - 1.0;
                let mut code: Vec<f64> = freqs.iter().map(|f| (PI * f * u).sin()).collect();
                code.extend(freqs.iter().map(|f| (PI * f * u).cos()));
                code
            })
            .collect()
    };
    let (ys, xs) = (axis(grid_h), axis(grid_w));
    let width = 4 * bands;
    let mut data = Vec::with_capacity(grid_h * grid_w * width);
    for y in &ys {
        for x in &xs {
            data.extend_from_slice(y);
            data.extend_from_slice(x);
        }
    }
    Tensor::matrix(grid_h * grid_w, width, data)
}
