//! Elementwise, reduction and layout operations.

use crate::error::{NdError, Result};
use crate::tape::{Backward, Tape, Var};
use crate::tensor::{Real, Tensor};

/// `(outer, extent, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(NdError::dim(op, format!("shape {a:?} vs {b:?}")));
    }
    Ok(())
}

struct AddRule;

impl<T: Real> Backward<T> for AddRule {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

pub fn add<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape("add", tape.shape(a), tape.shape(b))?;
    let out = tape.value(a).zip_map(tape.value(b), |x, y| x + y);
    tape.record("add", &[a, b], out, Box::new(AddRule))
}

struct MulRule;

impl<T: Real> Backward<T> for MulRule {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| g.zip_map(x[1], |g, b| g * b)),
            needs[1].then(|| g.zip_map(x[0], |g, a| g * a)),
        ]
    }
}

/// Elementwise product of equally shaped tensors.
pub fn mul<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape("mul", tape.shape(a), tape.shape(b))?;
    let out = tape.value(a).zip_map(tape.value(b), |x, y| x * y);
    tape.record("mul", &[a, b], out, Box::new(MulRule))
}

struct ScaleRule<T>(T);

impl<T: Real> Backward<T> for ScaleRule<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.scale(self.0))]
    }
}

pub fn scale<T: Real>(tape: &mut Tape<T>, x: Var, s: T) -> Result<Var> {
    let out = tape.value(x).scale(s);
    tape.record("scale", &[x], out, Box::new(ScaleRule(s)))
}

struct SumRule;

impl<T: Real> Backward<T> for SumRule {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(x[0].shape(), g.data()[0]))]
    }
}

/// Sum of all elements as a one-element tensor.
pub fn sum<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let out = Tensor::scalar(tape.value(x).sum());
    tape.record("sum", &[x], out, Box::new(SumRule))
}

/// Weighted sum of scalars or equally shaped tensors.
pub fn linear_combination<T: Real>(tape: &mut Tape<T>, terms: &[(T, Var)]) -> Result<Var> {
    let (&(w0, v0), rest) = terms
        .split_first()
        .ok_or_else(|| NdError::Usage("linear_combination of no terms".into()))?;
    let mut acc = scale(tape, v0, w0)?;
    for &(w, v) in rest {
        let t = scale(tape, v, w)?;
        acc = add(tape, acc, t)?;
    }
    Ok(acc)
}

struct ReluRule;

impl<T: Real> Backward<T> for ReluRule {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.zip_map(y, |g, y| if y > T::zero() { g } else { T::zero() }))]
    }
}

pub fn relu<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let out = tape.value(x).map(|v| v.max(T::zero()));
    if tape.branch_signature().is_some() {
        let sides: Vec<bool> = tape.value(x).data().iter().map(|&v| v > T::zero()).collect();
        tape.note_branches(sides);
    }
    tape.record("relu", &[x], out, Box::new(ReluRule))
}

struct ChannelAffineRule;

impl<T: Real> Backward<T> for ChannelAffineRule {
    fn name(&self) -> &'static str {
        "channel_affine"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (input, scale) = (x[0], x[1]);
        let c = input.shape()[0];
        let inner = input.numel() / c;
        let mut dx = needs[0].then(|| Tensor::zeros(input.shape()));
        let mut dscale = vec![T::zero(); c];
        let mut dshift = vec![T::zero(); c];
        for ch in 0..c {
            let s = scale.data()[ch];
            let gs = &g.data()[ch * inner..(ch + 1) * inner];
            let xs = &input.data()[ch * inner..(ch + 1) * inner];
            if let Some(dx) = dx.as_mut() {
                for (d, &gv) in dx.data_mut()[ch * inner..(ch + 1) * inner].iter_mut().zip(gs) {
                    *d = gv * s;
                }
            }
            dscale[ch] = gs.iter().zip(xs).map(|(&gv, &xv)| gv * xv).sum();
            dshift[ch] = gs.iter().copied().sum();
        }
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], dscale).expect("channel extent")),
            needs[2].then(|| Tensor::from_vec(&[c], dshift).expect("channel extent")),
        ]
    }
}

/// Per-channel `x * scale[c] + shift[c]` over a channel-first tensor.
pub fn channel_affine<T: Real>(tape: &mut Tape<T>, x: Var, scale: Var, shift: Var) -> Result<Var> {
    let c = tape.shape(x)[0];
    if tape.shape(scale) != [c] || tape.shape(shift) != [c] {
        return Err(NdError::dim(
            "channel_affine",
            format!("{c} channels vs scale {:?} shift {:?}", tape.shape(scale), tape.shape(shift)),
        ));
    }
    let input = tape.value(x);
    let inner = input.numel() / c;
    let (s, b) = (tape.value(scale).data(), tape.value(shift).data());
    let mut out = input.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        for v in chunk {
            *v = *v * s[ch] + b[ch];
        }
    }
    tape.record("channel_affine", &[x, scale, shift], out, Box::new(ChannelAffineRule))
}

struct ChannelNormRule<T> {
    /// `1 / sqrt(var + eps)` per channel.
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for ChannelNormRule<T> {
    fn name(&self) -> &'static str {
        "channel_norm"
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = self.inv_std.len();
        let inner = y.numel() / c;
        let n = T::from_f64_lossy(inner as f64);
        let mut dx = Tensor::zeros(y.shape());
        for ch in 0..c {
            let range = ch * inner..(ch + 1) * inner;
            let (ys, gs) = (&y.data()[range.clone()], &g.data()[range.clone()]);
            let g_mean = gs.iter().copied().sum::<T>() / n;
            let gy_mean = gs.iter().zip(ys).map(|(&gv, &yv)| gv * yv).sum::<T>() / n;
            for ((d, &gv), &yv) in dx.data_mut()[range].iter_mut().zip(gs).zip(ys) {
                *d = self.inv_std[ch] * (gv - g_mean - yv * gy_mean);
            }
        }
        vec![Some(dx)]
    }
}

/// Standardises every channel of a channel-first tensor over its remaining
/// axes: `(x - mean) / sqrt(var + eps)` with the biased variance.
pub fn channel_norm<T: Real>(tape: &mut Tape<T>, x: Var, eps: T) -> Result<Var> {
    let input = tape.value(x);
    if input.rank() < 2 {
        return Err(NdError::dim("channel_norm", format!("needs a channel axis and data axes, got {:?}", input.shape())));
    }
    let c = input.shape()[0];
    let inner = input.numel() / c;
    let n = T::from_f64_lossy(inner as f64);
    let mut out = input.clone();
    let mut inv_std = Vec::with_capacity(c);
    for chunk in out.data_mut().chunks_mut(inner) {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in chunk.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    tape.record("channel_norm", &[x], out, Box::new(ChannelNormRule { inv_std }))
}

struct BroadcastMulRule;

impl<T: Real> Backward<T> for BroadcastMulRule {
    fn name(&self) -> &'static str {
        "broadcast_mul"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (w, v) = (x[0], x[1]);
        let inner = w.numel();
        let mut dw = needs[0].then(|| Tensor::zeros(w.shape()));
        let mut dv = needs[1].then(|| Tensor::zeros(v.shape()));
        for (ch, gs) in g.data().chunks(inner).enumerate() {
            if let Some(dw) = dw.as_mut() {
                let vs = &v.data()[ch * inner..(ch + 1) * inner];
                for ((d, &gv), &vv) in dw.data_mut().iter_mut().zip(gs).zip(vs) {
                    *d += gv * vv;
                }
            }
            if let Some(dv) = dv.as_mut() {
                for ((d, &gv), &wv) in dv.data_mut()[ch * inner..(ch + 1) * inner].iter_mut().zip(gs).zip(w.data()) {
                    *d = gv * wv;
                }
            }
        }
        vec![dw, dv]
    }
}

/// `out[c, ...] = weight[0, ...] * value[c, ...]`: a single-channel weight
/// applied to every channel.
pub fn broadcast_mul<T: Real>(tape: &mut Tape<T>, weight: Var, value: Var) -> Result<Var> {
    let (ws, vs) = (tape.shape(weight), tape.shape(value));
    if ws.len() != vs.len() || ws[0] != 1 || ws[1..] != vs[1..] {
        return Err(NdError::dim("broadcast_mul", format!("weight {ws:?} vs value {vs:?}")));
    }
    let w = tape.value(weight);
    let mut out = tape.value(value).clone();
    for chunk in out.data_mut().chunks_mut(w.numel()) {
        for (o, &wv) in chunk.iter_mut().zip(w.data()) {
            *o *= wv;
        }
    }
    tape.record("broadcast_mul", &[weight, value], out, Box::new(BroadcastMulRule))
}

struct ConcatRule {
    sizes: Vec<usize>,
}

impl<T: Real> Backward<T> for ConcatRule {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut start = 0;
        self.sizes
            .iter()
            .zip(x)
            .zip(needs)
            .map(|((&n, t), &need)| {
                let out = need.then(|| {
                    Tensor::from_vec(t.shape(), g.data()[start..start + n].to_vec()).expect("concat slice")
                });
                start += n;
                out
            })
            .collect()
    }
}

/// Concatenation along the leading (channel) axis.
pub fn concat<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let first = parts.first().ok_or_else(|| NdError::Usage("concat of no tensors".into()))?;
    let tail = tape.shape(*first)[1..].to_vec();
    let mut channels = 0;
    let mut data = Vec::new();
    let mut sizes = Vec::with_capacity(parts.len());
    for &p in parts {
        let s = tape.shape(p);
        if s[1..] != tail[..] {
            return Err(NdError::dim("concat", format!("{s:?} vs trailing {tail:?}")));
        }
        channels += s[0];
        sizes.push(tape.value(p).numel());
        data.extend_from_slice(tape.value(p).data());
    }
    let mut shape = vec![channels];
    shape.extend_from_slice(&tail);
    let out = Tensor::from_vec(&shape, data)?;
    tape.record("concat", parts, out, Box::new(ConcatRule { sizes }))
}

struct SliceRule {
    start: usize,
}

impl<T: Real> Backward<T> for SliceRule {
    fn name(&self) -> &'static str {
        "slice_channels"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut dx = Tensor::zeros(x[0].shape());
        let inner = x[0].numel() / x[0].shape()[0];
        dx.data_mut()[self.start * inner..self.start * inner + g.numel()].copy_from_slice(g.data());
        vec![Some(dx)]
    }
}

/// Channels `range` of a channel-first tensor.
pub fn slice_channels<T: Real>(tape: &mut Tape<T>, x: Var, range: std::ops::Range<usize>) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if range.is_empty() || range.end > shape[0] {
        return Err(NdError::dim("slice_channels", format!("{range:?} of {shape:?}")));
    }
    let inner: usize = shape[1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape[0] = range.len();
    let data = tape.value(x).data()[range.start * inner..range.end * inner].to_vec();
    let out = Tensor::from_vec(&out_shape, data)?;
    tape.record("slice_channels", &[x], out, Box::new(SliceRule { start: range.start }))
}

struct ReshapeRule;

impl<T: Real> Backward<T> for ReshapeRule {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(x[0].shape()).expect("same element count"))]
    }
}

pub fn reshape<T: Real>(tape: &mut Tape<T>, x: Var, shape: &[usize]) -> Result<Var> {
    let out = tape.value(x).clone().reshape(shape)?;
    tape.record("reshape", &[x], out, Box::new(ReshapeRule))
}

struct SoftmaxRule {
    axis: usize,
}

impl<T: Real> Backward<T> for SoftmaxRule {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, n, inner) = axis_split(y.shape(), self.axis);
        let mut dx = Tensor::zeros(y.shape());
        let (yd, gd) = (y.data(), g.data());
        let dd = dx.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let dot: T = (0..n).map(|k| yd[at(k)] * gd[at(k)]).sum();
                for k in 0..n {
                    dd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Real>(tape: &mut Tape<T>, x: Var, axis: usize) -> Result<Var> {
    let input = tape.value(x);
    if axis >= input.rank() {
        return Err(NdError::dim("softmax", format!("axis {axis} of rank {}", input.rank())));
    }
    let (outer, n, inner) = axis_split(input.shape(), axis);
    let mut out = input.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let m = (0..n).fold(T::neg_infinity(), |m, k| m.max(d[at(k)]));
            let mut total = T::zero();
            for k in 0..n {
                let e = (d[at(k)] - m).exp();
                d[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                d[at(k)] = d[at(k)] / total;
            }
        }
    }
    tape.record("softmax", &[x], out, Box::new(SoftmaxRule { axis }))
}

struct ExpectationRule<T> {
    axis: usize,
    values: Tensor<T>,
}

impl<T: Real> ExpectationRule<T> {
    fn value_at(&self, flat: usize, k: usize) -> T {
        if self.values.rank() == 1 {
            self.values.data()[k]
        } else {
            self.values.data()[flat]
        }
    }
}

impl<T: Real> Backward<T> for ExpectationRule<T> {
    fn name(&self) -> &'static str {
        "expectation"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (outer, n, inner) = axis_split(x[0].shape(), self.axis);
        let mut dp = Tensor::zeros(x[0].shape());
        let dd = dp.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let go = g.data()[o * inner + i];
                for k in 0..n {
                    let at = (o * n + k) * inner + i;
                    dd[at] = go * self.value_at(at, k);
                }
            }
        }
        vec![Some(dp)]
    }
}

/// `out = sum_k p[.., k, ..] * values[.., k, ..]` along `axis`, removing it.
///
/// `values` is either one value per position along `axis` (rank 1) or a
/// tensor shaped like `p`. The values are constants.
pub fn expectation<T: Real>(tape: &mut Tape<T>, p: Var, axis: usize, values: Tensor<T>) -> Result<Var> {
    let shape = tape.shape(p).to_vec();
    if axis >= shape.len() {
        return Err(NdError::dim("expectation", format!("axis {axis} of {shape:?}")));
    }
    let ok = if values.rank() == 1 { values.numel() == shape[axis] } else { values.shape() == shape };
    if !ok {
        return Err(NdError::dim("expectation", format!("values {:?} for {shape:?}", values.shape())));
    }
    let (outer, n, inner) = axis_split(&shape, axis);
    let rule = ExpectationRule { axis, values };
    let pd = tape.value(p).data();
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            out[o * inner + i] = (0..n)
                .map(|k| {
                    let at = (o * n + k) * inner + i;
                    pd[at] * rule.value_at(at, k)
                })
                .sum();
        }
    }
    let mut out_shape = shape.clone();
    out_shape.remove(axis);
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    let out = Tensor::from_vec(&out_shape, out)?;
    tape.record("expectation", &[p], out, Box::new(rule))
}
