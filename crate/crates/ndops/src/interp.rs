//! Linear resampling with the align-corners-false (half-pixel centre)
//! convention: output sample `j` reads input coordinate
//! `max(0, (j + 0.5) * n_in / n_out - 0.5)`.

use crate::error::{NdError, Result};
use crate::ops::axis_split;
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpMode {
    /// `[C, H, W]` inputs.
    Bilinear,
    /// `[C, D, H, W]` inputs.
    Trilinear,
}

/// Source taps `(i0, i1, w1)` for each output sample; value = `a + w1 * (b - a)`.
pub fn linear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w1)
        })
        .collect()
}

struct ResizeRule {
    axis: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl<T: Real> Backward<T> for ResizeRule {
    fn name(&self) -> &'static str {
        "resize_linear"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, n_in, inner) = axis_split(x[0].shape(), self.axis);
        let n_out = self.taps.len();
        let mut dx = Tensor::zeros(x[0].shape());
        let dd = dx.data_mut();
        let gd = g.data();
        for o in 0..outer {
            for (j, &(i0, i1, w1)) in self.taps.iter().enumerate() {
                let w1 = T::from_f64_lossy(w1);
                let w0 = T::one() - w1;
                let src = &gd[(o * n_out + j) * inner..(o * n_out + j + 1) * inner];
                let a = (o * n_in + i0) * inner;
                let b = (o * n_in + i1) * inner;
                for (i, &gv) in src.iter().enumerate() {
                    dd[a + i] += gv * w0;
                    dd[b + i] += gv * w1;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Linear resampling of one axis to `len` samples.
pub fn resize_linear<T: Real>(tape: &mut Tape<T>, x: Var, axis: usize, len: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if axis >= shape.len() || len == 0 {
        return Err(NdError::dim("resize_linear", format!("axis {axis} of {shape:?} to {len}")));
    }
    if shape[axis] == len {
        return Ok(x);
    }
    let (outer, n_in, inner) = axis_split(&shape, axis);
    let taps = linear_taps(n_in, len);
    let xd = tape.value(x).data();
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for (j, &(i0, i1, w1)) in taps.iter().enumerate() {
            let w1 = T::from_f64_lossy(w1);
            let a = &xd[(o * n_in + i0) * inner..(o * n_in + i0 + 1) * inner];
            let b = &xd[(o * n_in + i1) * inner..(o * n_in + i1 + 1) * inner];
            let dst = &mut out[(o * len + j) * inner..(o * len + j + 1) * inner];
            for ((d, &av), &bv) in dst.iter_mut().zip(a).zip(b) {
                *d = av + w1 * (bv - av);
            }
        }
    }
    let mut out_shape = shape;
    out_shape[axis] = len;
    let out = Tensor::from_vec(&out_shape, out)?;
    tape.record("resize_linear", &[x], out, Box::new(ResizeRule { axis, taps }))
}

/// Resamples every spatial axis (all but the leading channel axis) to `target`.
pub fn interpolate<T: Real>(tape: &mut Tape<T>, x: Var, target: &[usize], mode: InterpMode) -> Result<Var> {
    let rank = match mode {
        InterpMode::Bilinear => 3,
        InterpMode::Trilinear => 4,
    };
    if tape.shape(x).len() != rank || target.len() != rank - 1 {
        return Err(NdError::dim(
            "interpolate",
            format!("{mode:?} needs rank {rank}, got {:?} -> {target:?}", tape.shape(x)),
        ));
    }
    let mut v = x;
    for (i, &len) in target.iter().enumerate() {
        v = resize_linear(tape, v, i + 1, len)?;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_two_samples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[1, 1, 2], vec![0.0, 2.0]).unwrap());
        let y = interpolate(&mut tape, x, &[1, 4], InterpMode::Bilinear).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn constants_are_preserved_exactly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 5, 4], 0.1));
        let up = interpolate(&mut tape, x, &[7, 9, 13], InterpMode::Trilinear).unwrap();
        assert!(tape.value(up).data().iter().all(|&v| v == 0.1));
        let down = interpolate(&mut tape, up, &[2, 3, 3], InterpMode::Trilinear).unwrap();
        let back = interpolate(&mut tape, down, &[3, 5, 4], InterpMode::Trilinear).unwrap();
        assert!(tape.value(back).data().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn rank_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 3]));
        assert!(interpolate(&mut tape, x, &[4, 4, 4], InterpMode::Trilinear).is_err());
    }
}
