//! Separable linear resampling of 2D grids.
//!
//! Output row `r` samples the input at position `r * step` (top-left aligned),
//! clamped to the last input row, so a point at input row `y` lands at output
//! row `y / step`. Constant images stay constant and a unit step is the identity.

use ndarray::Array2;

/// Linear interpolation along rows. `step` is input rows per output row.
pub fn resample_rows(src: &Array2<f32>, out_rows: usize, step: f64) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::<f32>::zeros((out_rows, w));
    for r in 0..out_rows {
        let (i0, i1, t) = taps(r as f64 * step, h);
        for c in 0..w {
            let a = src[[i0, c]] as f64;
            let b = src[[i1, c]] as f64;
            out[[r, c]] = (a + (b - a) * t) as f32;
        }
    }
    out
}

/// Linear interpolation along columns. `step` is input columns per output column.
pub fn resample_cols(src: &Array2<f32>, out_cols: usize, step: f64) -> Array2<f32> {
    let (h, w) = src.dim();
    let mut out = Array2::<f32>::zeros((h, out_cols));
    let taps: Vec<_> = (0..out_cols).map(|c| taps(c as f64 * step, w)).collect();
    for r in 0..h {
        for (c, &(j0, j1, t)) in taps.iter().enumerate() {
            let a = src[[r, j0]] as f64;
            let b = src[[r, j1]] as f64;
            out[[r, c]] = (a + (b - a) * t) as f32;
        }
    }
    out
}

/// Resize to `(rows, cols)` mapping output index `i` to input `i * in/out`.
pub fn resize(src: &Array2<f32>, rows: usize, cols: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    let tmp = if rows == h { src.clone() } else { resample_rows(src, rows, h as f64 / rows as f64) };
    if cols == w {
        tmp
    } else {
        resample_cols(&tmp, cols, w as f64 / cols as f64)
    }
}

fn taps(pos: f64, len: usize) -> (usize, usize, f64) {
    let last = len.saturating_sub(1);
    let pos = pos.clamp(0.0, last as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(last);
    (i0, i1, pos - i0 as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_step_is_identity() {
        let src = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f32);
        assert_eq!(resample_rows(&src, 5, 1.0), src);
        assert_eq!(resample_cols(&src, 3, 1.0), src);
        assert_eq!(resize(&src, 5, 3), src);
    }

    #[test]
    fn linear_ramp_is_reproduced() {
        let src = Array2::from_shape_fn((4, 1), |(i, _)| i as f32 * 2.0);
        let up = resample_rows(&src, 7, 0.5);
        let expect = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        for (r, e) in expect.iter().enumerate() {
            assert!((up[[r, 0]] - e).abs() < 1e-6);
        }
    }
}
