//! Random-dot stereograms with exact ground truth.
//!
//! The right image is random noise. Each left pixel `x` copies the right
//! image at `x - d(x)` (linear interpolation for fractional disparities), so
//! `right(x) == left(x + d)` wherever the match exists. Left pixels whose match
//! falls off the left edge are invalid; left pixels hidden in the right view
//! by a nearer surface get fresh dots and are excluded from the `noc` mask.

use acv_ndops::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::StereoSample;
use crate::error::{AcvError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DisparityField {
    Constant { disparity: f64 },
    /// Linear in x from `left` at column 0 to `right` at the last column.
    Ramp { left: f64, right: f64 },
    /// A fronto-parallel rectangle `[x0, x1) x [y0, y1)` at disparity
    /// `near` in front of a background plane at `far`.
    TwoPlane { far: f64, near: f64, x0: usize, x1: usize, y0: usize, y1: usize },
}

impl DisparityField {
    pub fn at(&self, x: usize, y: usize, width: usize) -> f64 {
        match *self {
            DisparityField::Constant { disparity } => disparity,
            DisparityField::Ramp { left, right } => {
                let t = if width > 1 { x as f64 / (width - 1) as f64 } else { 0.0 };
                left + (right - left) * t
            }
            DisparityField::TwoPlane { far, near, x0, x1, y0, y1 } => {
                if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                    near
                } else {
                    far
                }
            }
        }
    }

    pub fn max(&self) -> f64 {
        match *self {
            DisparityField::Constant { disparity } => disparity,
            DisparityField::Ramp { left, right } => left.max(right),
            DisparityField::TwoPlane { far, near, .. } => far.max(near),
        }
    }

    pub fn min(&self) -> f64 {
        match *self {
            DisparityField::Constant { disparity } => disparity,
            DisparityField::Ramp { left, right } => left.min(right),
            DisparityField::TwoPlane { far, near, .. } => far.min(near),
        }
    }

    /// A random two-plane field with integer disparities in `[1, max]` and the
    /// near plane at least 2 px in front of the far one.
    pub fn random_two_plane<R: Rng>(rng: &mut R, height: usize, width: usize, max: usize) -> Self {
        let max = max.max(3);
        let far = rng.gen_range(1..=max - 2);
        let near = rng.gen_range(far + 2..=max);
        let (w0, h0) = (rng.gen_range(width / 4..=width / 2), rng.gen_range(height / 4..=height / 2));
        let x0 = rng.gen_range(0..=width - w0);
        let y0 = rng.gen_range(0..=height - h0);
        DisparityField::TwoPlane { far: far as f64, near: near as f64, x0, x1: x0 + w0, y0, y1: y0 + h0 }
    }
}

fn sample_row(row: &[f64], pos: f64) -> f64 {
    let i0 = pos.floor();
    let w = pos - i0;
    let i0 = i0 as usize;
    if w == 0.0 {
        row[i0]
    } else {
        row[i0] + w * (row[i0 + 1] - row[i0])
    }
}

/// Generates an `height x width` pair. Fails if the field reaches `max_disp`
/// or goes negative.
pub fn gen_rds(height: usize, width: usize, field: &DisparityField, max_disp: usize, seed: u64) -> Result<StereoSample> {
    if height == 0 || width == 0 {
        return Err(AcvError::config("empty image"));
    }
    if !(field.max() < max_disp as f64) || !(field.min() >= 0.0) {
        return Err(AcvError::config(format!(
            "disparity field spans [{}, {}], outside [0, {max_disp})",
            field.min(),
            field.max()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = height * width;
    let right = Tensor::from_fn(&[3, height, width], |_| rng.gen::<f64>());
    let mut left = Tensor::zeros(&[3, height, width]);
    let mut gt = Tensor::zeros(&[height, width]);
    let mut mask = vec![false; plane];
    let mut noc = vec![false; plane];
    for y in 0..height {
        let d: Vec<f64> = (0..width).map(|x| field.at(x, y, width)).collect();
        for x in 0..width {
            let pos = x as f64 - d[x];
            let i = y * width + x;
            gt.data_mut()[i] = d[x];
            // hidden if a nearer left pixel lands within half a pixel of the same spot
            let occluded = (0..width).any(|x2| x2 != x && d[x2] > d[x] && (x2 as f64 - d[x2] - pos).abs() < 0.5);
            mask[i] = pos >= 0.0;
            noc[i] = mask[i] && !occluded;
            for c in 0..3 {
                let v = if mask[i] && !occluded {
                    let row = &right.data()[(c * height + y) * width..][..width];
                    sample_row(row, pos)
                } else {
                    rng.gen::<f64>()
                };
                left.data_mut()[c * plane + i] = v;
            }
            if !mask[i] {
                gt.data_mut()[i] = 0.0;
            }
        }
    }
    Ok(StereoSample { left, right, gt, mask, noc: Some(noc) })
}

/// `count` samples of random two-plane scenes, seeded per sample.
pub fn two_plane_set(count: usize, height: usize, width: usize, max_field: usize, max_disp: usize, seed: u64) -> Result<Vec<StereoSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let field = DisparityField::random_two_plane(&mut rng, height, width, max_field);
            gen_rds(height, width, &field, max_disp, rng.gen())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_integer_warp_is_exact() {
        let s = gen_rds(8, 16, &DisparityField::Constant { disparity: 4.0 }, 32, 1).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..12 {
                    assert_eq!(s.right.at(&[c, y, x]), s.left.at(&[c, y, x + 4]));
                }
            }
        }
        assert!(!s.mask[3] && s.mask[4]);
        assert_eq!(s.noc.as_deref(), Some(&s.mask[..]));
    }

    #[test]
    fn deterministic_per_seed() {
        let f = DisparityField::Ramp { left: 1.0, right: 6.5 };
        assert_eq!(gen_rds(8, 16, &f, 8, 3).unwrap(), gen_rds(8, 16, &f, 8, 3).unwrap());
        assert_ne!(gen_rds(8, 16, &f, 8, 3).unwrap(), gen_rds(8, 16, &f, 8, 4).unwrap());
    }

    #[test]
    fn field_beyond_range_rejected() {
        assert!(gen_rds(8, 16, &DisparityField::Constant { disparity: 8.0 }, 8, 0).is_err());
        assert!(gen_rds(8, 16, &DisparityField::Ramp { left: -1.0, right: 2.0 }, 8, 0).is_err());
    }

    #[test]
    fn two_plane_occlusion_left_of_foreground() {
        let f = DisparityField::TwoPlane { far: 2.0, near: 6.0, x0: 10, x1: 20, y0: 0, y1: 4 };
        let s = gen_rds(4, 32, &f, 8, 9).unwrap();
        let noc = s.noc.unwrap();
        // background pixels 6..10 map onto the same right pixels as the foreground
        assert!((6..10).all(|x| s.mask[x] && !noc[x]));
        assert!(noc[5] && noc[10] && noc[25]);
    }
}
