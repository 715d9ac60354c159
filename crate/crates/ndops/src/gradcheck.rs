//! Central finite-difference verification of tape gradients (64-bit only).

use crate::error::{NdError, Result};
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Settings for [`grad_check_many`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// coordinates with (near) zero gradient are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced coordinates per input.
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, floor: 1e-3, max_coords: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Coordinates left out because every probe straddled a ReLU kink.
    pub skipped: usize,
    pub tol: f64,
}

impl GradCheckReport {
    /// Within tolerance, with at most one in ten coordinates skipped.
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tol && self.skipped * 10 <= self.checked + self.skipped
    }
}

/// Probe step shrinks by this factor while a probe crosses a kink.
const EPS_SHRINK: f64 = 10.0;
const PROBE_ATTEMPTS: usize = 3;

fn scalar_of(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    if tape.value(y).numel() == 1 {
        Ok(y)
    } else {
        ops::sum(tape, y)
    }
}

/// Value and branch signature of `f` at `xs`.
fn evaluate<F>(f: &F, xs: &[Tensor<f64>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new().tracking_branches();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let y = scalar_of(&mut tape, y)?;
    Ok((tape.value(y).data()[0], tape.branch_signature()))
}

fn coordinates(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
        _ => (0..n).collect(),
    }
}

/// Compares the tape gradient of `f` (summed to a scalar if it is not one)
/// w.r.t. every input against central differences `(f(x+eps) - f(x-eps)) / 2eps`.
///
/// A difference is only trusted when every ReLU takes the same branch at
/// `x - eps`, `x` and `x + eps`; otherwise `eps` shrinks, and a coordinate
/// that keeps straddling a kink is skipped.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if xs.is_empty() {
        return Err(NdError::Usage("grad_check needs at least one input".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let y = scalar_of(&mut tape, y)?;
    tape.backward(y)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut report =
        GradCheckReport { max_rel_err: 0.0, max_abs_err: 0.0, worst: (0, 0), checked: 0, skipped: 0, tol: cfg.tol };
    let (_, base) = evaluate(&f, xs)?;
    let mut probe = xs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for i in coordinates(xs[input].numel(), cfg.max_coords) {
            let orig = probe[input].data()[i];
            let mut eps = cfg.eps;
            let mut numeric = None;
            for _ in 0..PROBE_ATTEMPTS {
                probe[input].data_mut()[i] = orig + eps;
                let (plus, sig_plus) = evaluate(&f, &probe)?;
                probe[input].data_mut()[i] = orig - eps;
                let (minus, sig_minus) = evaluate(&f, &probe)?;
                if sig_plus == base && sig_minus == base {
                    numeric = Some((plus - minus) / (2.0 * eps));
                    break;
                }
                eps /= EPS_SHRINK;
            }
            probe[input].data_mut()[i] = orig;

            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (input, i);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Single-input form of [`grad_check_many`] with default floor and no sampling.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), GradCheckConfig { eps, tol, ..Default::default() })
}

/// `sum(y * w)` with fixed pseudo-random weights in `[-1, 1)`, turning a
/// tensor output into a scalar whose gradient exercises every element differently.
pub fn random_projection(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let w = tape.constant(Tensor::from_vec(&shape, w)?);
    let p = ops::mul(tape, y, w)?;
    ops::sum(tape, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let r = grad_check(|t, v| ops::scale(t, v, 3.0), &x, 1e-5, 1e-4).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_err < 1e-9, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn detects_wrong_gradient() {
        use crate::tape::Backward;
        struct Wrong;
        impl Backward<f64> for Wrong {
            fn name(&self) -> &'static str {
                "wrong"
            }
            fn backward(&self, x: &[&Tensor<f64>], _: &Tensor<f64>, g: &Tensor<f64>, _: &[bool]) -> Vec<Option<Tensor<f64>>> {
                vec![Some(Tensor::full(x[0].shape(), g.data()[0] * 2.0))]
            }
        }
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.value(v).sum();
                t.record("wrong", &[v], Tensor::scalar(s), Box::new(Wrong))
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn probes_across_a_relu_kink_shrink_or_skip() {
        // 2e-6 is inside the default step of the kink at zero
        let x = Tensor::from_vec(&[3], vec![2e-6, -0.5, 0.5]).unwrap();
        let r = grad_check(|t, v| ops::relu(t, v), &x, 1e-5, 1e-6).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!((r.checked, r.skipped), (3, 0));
        let r = grad_check(|t, v| ops::relu(t, v), &Tensor::from_vec(&[1], vec![0.0]).unwrap(), 1e-5, 1e-6).unwrap();
        assert_eq!((r.checked, r.skipped), (0, 1));
        assert!(!r.passed());
    }
}
