//! Sum-of-absolute-differences block matching with winner-take-all, a
//! learning-free floor for the networks on synthetic data.

use acv_ndops::Tensor;

use crate::error::{AcvError, Result};

/// Mean absolute difference over the window pairs that fall inside both
/// images, or `None` when the centre pixel has no match at `d`.
fn sad_cost(left: &Tensor<f64>, right: &Tensor<f64>, x: usize, y: usize, d: usize, radius: usize) -> Option<f64> {
    let [c, h, w] = [left.shape()[0], left.shape()[1], left.shape()[2]];
    if x < d {
        return None;
    }
    let (ld, rd) = (left.data(), right.data());
    let (mut total, mut n) = (0.0, 0usize);
    for yy in y.saturating_sub(radius)..(y + radius + 1).min(h) {
        for xx in x.saturating_sub(radius).max(d)..(x + radius + 1).min(w) {
            for ch in 0..c {
                let row = (ch * h + yy) * w;
                total += (ld[row + xx] - rd[row + xx - d]).abs();
            }
            n += 1;
        }
    }
    Some(total / n as f64)
}

/// Disparity `[H, W]` minimising the SAD cost over `0..max_disp`. Ties go to
/// the smaller disparity, so textureless regions resolve to 0.
pub fn block_match(left: &Tensor<f64>, right: &Tensor<f64>, window: usize, max_disp: usize) -> Result<Tensor<f64>> {
    let s = left.shape();
    if s.len() != 3 || right.shape() != s {
        return Err(AcvError::config(format!("pair shapes {:?} and {:?}", s, right.shape())));
    }
    let (h, w) = (s[1], s[2]);
    if window % 2 == 0 {
        return Err(AcvError::config(format!("window {window} must be odd")));
    }
    if window >= h || window >= w {
        return Err(AcvError::config(format!("window {window} does not fit a {h}x{w} image")));
    }
    if max_disp == 0 {
        return Err(AcvError::config("max disparity must be positive"));
    }
    let radius = window / 2;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i[0], i[1]);
        let mut best = (f64::INFINITY, 0);
        for d in 0..max_disp {
            if let Some(c) = sad_cost(left, right, x, y, d, radius) {
                if c < best.0 {
                    best = (c, d);
                }
            }
        }
        best.1 as f64
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalio::rds::{gen_rds, DisparityField};

    #[test]
    fn recovers_constant_disparity_on_interior() {
        let s = gen_rds(16, 32, &DisparityField::Constant { disparity: 5.0 }, 16, 2).unwrap();
        let d = block_match(&s.left, &s.right, 5, 16).unwrap();
        for y in 0..16 {
            for x in 5 + 2..32 {
                assert_eq!(d.at(&[y, x]), 5.0, "({x}, {y})");
            }
        }
    }

    #[test]
    fn textureless_ties_go_to_zero() {
        let img = Tensor::full(&[3, 8, 8], 0.5);
        let d = block_match(&img, &img, 3, 4).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_windows() {
        let img = Tensor::full(&[3, 8, 8], 0.5);
        assert!(block_match(&img, &img, 4, 4).is_err());
        assert!(block_match(&img, &img, 9, 4).is_err());
    }
}
