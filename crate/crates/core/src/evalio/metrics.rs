//! Disparity error metrics. Every metric only looks at masked pixels.

use acv_ndops::{NdError, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::Result;

fn errors<'a>(
    op: &'static str,
    pred: &'a Tensor<f64>,
    gt: &'a Tensor<f64>,
    mask: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if pred.shape() != gt.shape() || mask.len() != gt.numel() {
        return Err(NdError::dim(op, format!("pred {:?}, gt {:?}, mask {}", pred.shape(), gt.shape(), mask.len())).into());
    }
    if !mask.iter().any(|&m| m) {
        return Err(NdError::numeric(op, "mask selects no pixel").into());
    }
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&p, &g), _)| ((p - g).abs(), g)))
}

fn fraction(it: impl Iterator<Item = bool>) -> f64 {
    let (hit, n) = it.fold((0usize, 0usize), |(h, n), b| (h + b as usize, n + 1));
    hit as f64 / n as f64
}

/// Mean absolute error in pixels.
pub fn epe(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool]) -> Result<f64> {
    let (sum, n) = errors("epe", pred, gt, mask)?.fold((0.0, 0usize), |(s, n), (e, _)| (s + e, n + 1));
    Ok(sum / n as f64)
}

/// Fraction of pixels whose error is greater than `max(3, 0.05 * gt)`.
pub fn d1(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool]) -> Result<f64> {
    Ok(fraction(errors("d1", pred, gt, mask)?.map(|(e, g)| e > f64::max(3.0, 0.05 * g))))
}

/// Fraction of pixels whose error is greater than `x`.
pub fn bad_x(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool], x: f64) -> Result<f64> {
    Ok(fraction(errors("bad_x", pred, gt, mask)?.map(|(e, _)| e > x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub epe: f64,
    pub d1: f64,
    pub bad1: f64,
    pub bad2: f64,
    pub bad3: f64,
    pub valid: usize,
    pub total: usize,
}

impl EvalReport {
    pub fn compute(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool]) -> Result<Self> {
        Ok(Self {
            epe: epe(pred, gt, mask)?,
            d1: d1(pred, gt, mask)?,
            bad1: bad_x(pred, gt, mask, 1.0)?,
            bad2: bad_x(pred, gt, mask, 2.0)?,
            bad3: bad_x(pred, gt, mask, 3.0)?,
            valid: mask.iter().filter(|&&m| m).count(),
            total: mask.len(),
        })
    }

    /// Pixel-weighted mean of several reports.
    pub fn merge(reports: &[EvalReport]) -> Option<Self> {
        let valid: usize = reports.iter().map(|r| r.valid).sum();
        if valid == 0 {
            return None;
        }
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(|r| f(r) * r.valid as f64).sum::<f64>() / valid as f64;
        Some(Self {
            epe: avg(|r| r.epe),
            d1: avg(|r| r.d1),
            bad1: avg(|r| r.bad1),
            bad2: avg(|r| r.bad2),
            bad3: avg(|r| r.bad3),
            valid,
            total: reports.iter().map(|r| r.total).sum(),
        })
    }

    /// Aligned text table.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>4}/{}\n",
            "epe", "d1", "bad1", "bad2", "bad3", "valid",
            self.epe, self.d1, self.bad1, self.bad2, self.bad3, self.valid, self.total
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn thresholds() {
        let gt = map(&[100.0, 50.0]);
        let pred = map(&[104.9, 54.0]);
        assert_eq!(d1(&pred, &gt, &[true, false]).unwrap(), 0.0);
        assert_eq!(d1(&pred, &gt, &[false, true]).unwrap(), 1.0);
        let gt = map(&[10.0, 10.0]);
        let pred = map(&[11.0, 11.01]);
        assert_eq!(bad_x(&pred, &gt, &[true, false], 1.0).unwrap(), 0.0);
        assert_eq!(bad_x(&pred, &gt, &[false, true], 1.0).unwrap(), 1.0);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let gt = map(&[1.0]);
        assert!(epe(&gt, &gt, &[false]).is_err());
    }

    #[test]
    fn report_fractions() {
        let gt = map(&[10.0, 20.0, 30.0, 40.0]);
        let pred = map(&[10.5, 22.5, 34.0, 40.0]);
        let r = EvalReport::compute(&pred, &gt, &[true; 4]).unwrap();
        assert_eq!(r.epe, 7.0 / 4.0);
        assert_eq!((r.bad1, r.bad2, r.bad3, r.d1), (0.5, 0.5, 0.25, 0.25));
        assert_eq!(EvalReport::merge(&[r, r]).unwrap().valid, 8);
    }
}
