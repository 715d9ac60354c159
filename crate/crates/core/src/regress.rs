//! Disparity regression: upsample a 1-channel volume, softmax along
//! disparity, then take the expectation over disparity values (soft argmin).

use acv_ndops::{interpolate, ops, InterpMode, NdError, Real, Tape, Tensor, Var};

use crate::error::Result;

/// Largest tolerated deviation of a probability column sum from 1.
pub const NORMALIZATION_TOL: f64 = 1e-5;

/// `d(y, x) = sum_k k * p[k, y, x]` for `prob: [D, H, W]`, returning `[H, W]`.
pub fn soft_argmin<T: Real>(tape: &mut Tape<T>, prob: Var) -> Result<Var> {
    let p = tape.value(prob);
    if p.rank() != 3 {
        return Err(NdError::dim("soft_argmin", format!("expected [D, H, W], got {:?}", p.shape())).into());
    }
    let (d, plane) = (p.shape()[0], p.shape()[1] * p.shape()[2]);
    let pd = p.data();
    for i in 0..plane {
        let mut total = 0.0;
        for k in 0..d {
            let v = pd[k * plane + i].to_f64_lossy();
            if v.is_nan() || v < 0.0 {
                return Err(NdError::numeric("soft_argmin", format!("negative probability {v} at pixel {i}")).into());
            }
            total += v;
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(NdError::numeric("soft_argmin", format!("probabilities sum to {total} at pixel {i}")).into());
        }
    }
    Ok(ops::expectation(tape, prob, 0, index_values(d))?)
}

/// `[0, 1, ..., n-1]`.
pub fn index_values<T: Real>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n], |i| T::from_f64_lossy(i[0] as f64))
}

/// Upsamples `vol: [1, d', h', w']` to `[1, target]`, applies softmax along
/// disparity and returns `sum_k p_k * values[k]` as `[H, W]`.
pub fn regress<T: Real>(tape: &mut Tape<T>, vol: Var, target: [usize; 3], values: Tensor<T>) -> Result<Var> {
    let s = tape.shape(vol);
    if s.len() != 4 || s[0] != 1 {
        return Err(NdError::dim("regress", format!("expected a 1-channel volume, got {s:?}")).into());
    }
    let up = interpolate(tape, vol, &target, InterpMode::Trilinear)?;
    let up = ops::reshape(tape, up, &target)?;
    let prob = ops::softmax(tape, up, 0)?;
    Ok(ops::expectation(tape, prob, 0, values)?)
}

/// Full-resolution disparity `[H, W]` from a `[1, D/4, H/4, W/4]` volume.
pub fn volume_to_disparity<T: Real>(tape: &mut Tape<T>, vol: Var, d: usize, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(vol);
    if s.len() != 4 || s[0] != 1 || d % 4 != 0 || h % 4 != 0 || w % 4 != 0 || s[1..] != [d / 4, h / 4, w / 4] {
        return Err(NdError::dim(
            "volume_to_disparity",
            format!("volume {s:?} inconsistent with D={d}, H={h}, W={w}"),
        )
        .into());
    }
    regress(tape, vol, [d, h, w], index_values(d))
}

/// `d_att`: the same pipeline applied to attention weights.
pub fn attention_to_disparity<T: Real>(tape: &mut Tape<T>, attention: Var, d: usize, h: usize, w: usize) -> Result<Var> {
    volume_to_disparity(tape, attention, d, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argmin(p: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(&[p.len(), 1, 1], p.to_vec()).unwrap());
        let d = soft_argmin(&mut tape, v).unwrap();
        tape.value(d).data()[0]
    }

    #[test]
    fn soft_argmin_examples() {
        assert_eq!(argmin(&[0.0, 0.0, 1.0, 0.0]), 2.0);
        assert_eq!(argmin(&[0.25; 4]), 1.5);
        assert!((argmin(&[0.1, 0.2, 0.3, 0.4]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn soft_argmin_rejects_unnormalized() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_vec(&[2, 1, 1], vec![0.5, 0.6]).unwrap());
        assert!(soft_argmin(&mut tape, v).is_err());
        let v = tape.constant(Tensor::from_vec(&[2, 1, 1], vec![1.5, -0.5]).unwrap());
        assert!(soft_argmin(&mut tape, v).is_err());
    }

    #[test]
    fn constant_volume_gives_midpoint() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::<f64>::full(&[1, 8, 16, 16], 0.7));
        let d = volume_to_disparity(&mut tape, v, 32, 64, 64).unwrap();
        assert_eq!(tape.shape(d), &[64, 64]);
        assert!(tape.value(d).data().iter().all(|&x| (x - 15.5).abs() < 1e-12));
    }

    #[test]
    fn extent_mismatch_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::<f64>::zeros(&[1, 8, 16, 16]));
        assert!(volume_to_disparity(&mut tape, v, 32, 64, 60).is_err());
        assert!(volume_to_disparity(&mut tape, v, 28, 64, 64).is_err());
    }
}
