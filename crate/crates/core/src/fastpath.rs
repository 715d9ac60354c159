//! The fast variant: attention at 1/8 resolution, a handful of disparity
//! hypotheses per 1/2-resolution pixel and a sparse attention concatenation
//! volume over those hypotheses.
//!
//! Disparities and hypotheses are in full-resolution pixels throughout. At
//! 1/2 resolution a hypothesis `v` therefore shifts the right features by
//! `v / 2` and selects index `v / 2` of the 1/2-resolution attention volume
//! (whose index `k` stands for disparity `2k`).

use acv_ndops::{interpolate, ops, Backward, InterpMode, NdError, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::aggregate::{Head, Hourglass, HourglassShape};
use crate::backbone::Levels;
use crate::config::PipelineConfig;
use crate::costvol::{patch_volume, AttentionNet, PatchSpec, PATCH_WEIGHTS};
use crate::error::{AcvError, Result};
use crate::params::{Bound, ConvLayer, ParamSet};
use crate::regress;

/// Attention extent along disparity at 1/2 resolution and its disparity step.
fn half_levels(max_disp: usize) -> usize {
    max_disp / 2
}

/// `d_att^f: [H/2, W/2]` from raw attention `[1, D/8, H/8, W/8]`: trilinear
/// upsampling to `[D/2, H/2, W/2]`, softmax, expectation over disparities `2k`.
pub fn fast_attention_disparity<T: Real>(tape: &mut Tape<T>, a_f: Var, d: usize, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(a_f);
    if d % 8 != 0 || h % 8 != 0 || w % 8 != 0 || s != [1, d / 8, h / 8, w / 8] {
        return Err(NdError::dim("fast_attention_disparity", format!("attention {s:?} for D={d}, H={h}, W={w}")).into());
    }
    let n = half_levels(d);
    let values = Tensor::from_fn(&[n], |i| T::from_f64_lossy(2.0 * i[0] as f64));
    regress::regress(tape, a_f, [n, h / 2, w / 2], values)
}

/// `d_att^f: [H', W']` from attention already at 1/2 resolution
/// `[1, D/2, H', W']`: softmax and expectation over disparities `2k`.
pub fn half_attention_disparity<T: Real>(tape: &mut Tape<T>, a_half: Var, d: usize) -> Result<Var> {
    let s = tape.shape(a_half).to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != half_levels(d) {
        return Err(NdError::dim("half_attention_disparity", format!("attention {s:?} for D={d}")).into());
    }
    let values = Tensor::from_fn(&[s[1]], |i| T::from_f64_lossy(2.0 * i[0] as f64));
    regress::regress(tape, a_half, [s[1], s[2], s[3]], values)
}

/// `h` hypotheses per pixel at offsets `-(h-1)/2, ..., (h-1)/2` around
/// `center`, clamped to `[0, max_disp - 1]`. Returns `[h, H', W']`.
pub fn sample_hypotheses<T: Real>(center: &Tensor<T>, h: usize, max_disp: usize) -> Result<Tensor<T>> {
    if h < 2 || h % 2 != 0 {
        return Err(AcvError::config(format!("hypothesis count {h} must be even and >= 2")));
    }
    if center.rank() != 2 || max_disp == 0 {
        return Err(NdError::dim("sample_hypotheses", format!("center {:?}", center.shape())).into());
    }
    let plane = center.numel();
    let hi = T::from_f64_lossy((max_disp - 1) as f64);
    let mut out = Vec::with_capacity(h * plane);
    for m in 0..h {
        let off = T::from_f64_lossy(m as f64 - (h - 1) as f64 / 2.0);
        out.extend(center.data().iter().map(|&c| (c + off).max(T::zero()).min(hi)));
    }
    let mut shape = vec![h];
    shape.extend_from_slice(center.shape());
    Ok(Tensor::from_vec(&shape, out)?)
}

/// Linear sample of `row` at `pos`: taps `(i0, 1 - w)` and `(i0 + 1, w)`;
/// taps outside `0..len` are dropped.
fn taps(pos: f64, len: usize) -> [(Option<usize>, f64); 2] {
    let f = pos.floor();
    let w = pos - f;
    let idx = |i: f64| (i >= 0.0 && i < len as f64).then_some(i as usize);
    [(idx(f), 1.0 - w), (idx(f + 1.0), w)]
}

/// Attention taps at index `q`, clamped to the volume.
fn clamped_taps(q: f64, len: usize) -> [(usize, f64); 2] {
    let q = q.clamp(0.0, (len - 1) as f64);
    let k0 = q.floor() as usize;
    let w = q - k0 as f64;
    [(k0, 1.0 - w), ((k0 + 1).min(len - 1), w)]
}

struct SparseRule<T> {
    hyp: Tensor<T>,
}

impl<T: Real> Backward<T> for SparseRule<T> {
    fn name(&self) -> &'static str {
        "sparse_acv"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (fl, fr, att) = (x[0], x[1], x[2]);
        let [c, h, w] = [fl.shape()[0], fl.shape()[1], fl.shape()[2]];
        let (n_hyp, levels, plane) = (self.hyp.shape()[0], att.shape()[1], h * w);
        let mut dl = vec![T::zero(); fl.numel()];
        let mut dr = vec![T::zero(); fr.numel()];
        let mut da = vec![T::zero(); att.numel()];
        let gd = g.data();
        for m in 0..n_hyp {
            for y in 0..h {
                for xx in 0..w {
                    let i = y * w + xx;
                    let v = self.hyp.data()[m * plane + i].to_f64_lossy() / 2.0;
                    let rt = taps(xx as f64 - v, w);
                    let at = clamped_taps(v, levels);
                    let a_s: T = at.iter().map(|&(k, wt)| T::from_f64_lossy(wt) * att.data()[k * plane + i]).sum();
                    let mut da_s = T::zero();
                    for ch in 0..c {
                        let gl = gd[((ch * n_hyp + m) * h + y) * w + xx];
                        let gr = gd[(((c + ch) * n_hyp + m) * h + y) * w + xx];
                        let row = (ch * h + y) * w;
                        let mut r = T::zero();
                        for &(tap, wt) in &rt {
                            if let Some(t) = tap {
                                let wt = T::from_f64_lossy(wt);
                                r += wt * fr.data()[row + t];
                                dr[row + t] += gr * a_s * wt;
                            }
                        }
                        dl[row + xx] += gl * a_s;
                        da_s += gl * fl.data()[row + xx] + gr * r;
                    }
                    for &(k, wt) in &at {
                        da[k * plane + i] += T::from_f64_lossy(wt) * da_s;
                    }
                }
            }
        }
        let wrap = |need: bool, t: &Tensor<T>, d: Vec<T>| need.then(|| Tensor::from_vec(t.shape(), d).expect("shape"));
        vec![wrap(needs[0], fl, dl), wrap(needs[1], fr, dr), wrap(needs[2], att, da)]
    }
}

/// Sparse attention concatenation volume `[2 C, h, H', W']`.
///
/// `left`/`right`: `[C, H', W']` features at 1/2 resolution; `attention`:
/// `[1, D/2, H', W']` raw attention at 1/2 resolution; `hyp`: `[h, H', W']`
/// hypotheses in full-resolution pixels (constants). For hypothesis `v` at
/// `(x, y)` the right features are sampled at `x - v/2` (zero outside the
/// image) and attention at index `v/2` (clamped), both linearly; both halves
/// of the concatenation are multiplied by the sampled attention.
pub fn build_sparse_acv<T: Real>(tape: &mut Tape<T>, left: Var, right: Var, attention: Var, hyp: &Tensor<T>) -> Result<Var> {
    let (ls, rs, as_) = (tape.shape(left).to_vec(), tape.shape(right).to_vec(), tape.shape(attention).to_vec());
    let ok = ls.len() == 3
        && ls == rs
        && as_.len() == 4
        && as_[0] == 1
        && as_[2..] == ls[1..]
        && hyp.rank() == 3
        && hyp.shape()[1..] == ls[1..];
    if !ok {
        return Err(NdError::dim(
            "build_sparse_acv",
            format!("left {ls:?}, right {rs:?}, attention {as_:?}, hypotheses {:?}", hyp.shape()),
        )
        .into());
    }
    let [c, h, w] = [ls[0], ls[1], ls[2]];
    let (n_hyp, levels, plane) = (hyp.shape()[0], as_[1], h * w);
    let (fl, fr, att) = (tape.value(left).data(), tape.value(right).data(), tape.value(attention).data());
    let mut out = vec![T::zero(); 2 * c * n_hyp * plane];
    for m in 0..n_hyp {
        for y in 0..h {
            for xx in 0..w {
                let i = y * w + xx;
                let v = hyp.data()[m * plane + i].to_f64_lossy() / 2.0;
                let rt = taps(xx as f64 - v, w);
                let a_s: T = clamped_taps(v, levels)
                    .iter()
                    .map(|&(k, wt)| T::from_f64_lossy(wt) * att[k * plane + i])
                    .sum();
                for ch in 0..c {
                    let row = (ch * h + y) * w;
                    let r: T = rt
                        .iter()
                        .filter_map(|&(t, wt)| t.map(|t| T::from_f64_lossy(wt) * fr[row + t]))
                        .sum();
                    out[((ch * n_hyp + m) * h + y) * w + xx] = a_s * fl[row + xx];
                    out[(((c + ch) * n_hyp + m) * h + y) * w + xx] = a_s * r;
                }
            }
        }
    }
    let out = Tensor::from_vec(&[2 * c, n_hyp, h, w], out)?;
    Ok(tape.record("build_sparse_acv", &[left, right, attention], out, Box::new(SparseRule { hyp: hyp.clone() }))?)
}

/// Everything the fast forward pass produces.
#[derive(Debug, Clone)]
pub struct FastOutputs<T: Real> {
    /// Raw attention `[1, D/8, H/8, W/8]`.
    pub attention: Var,
    /// `[H/2, W/2]`.
    pub d_att_half: Var,
    pub hypotheses: Tensor<T>,
    pub sparse: Var,
    /// Probabilities over hypotheses `[h, H/2, W/2]`.
    pub prob: Var,
    /// `[H/2, W/2]`.
    pub d_half: Var,
    /// `[H, W]`.
    pub d_att: Var,
    /// `[H, W]`.
    pub disparity: Var,
}

/// Network layers of the fast path on top of a shared feature extractor.
#[derive(Debug, Clone)]
pub struct FastPath {
    max_disp: usize,
    hypotheses: usize,
    spec: PatchSpec,
    eighth: ConvLayer,
    attention: AttentionNet,
    half: ConvLayer,
    agg: [ConvLayer; 2],
    hourglass: Hourglass,
    head: Head,
}

impl FastPath {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        let plan = cfg.channels()?;
        if cfg.max_disp % 8 != 0 {
            return Err(AcvError::config(format!("fast path needs max_disp divisible by 8, got {}", cfg.max_disp)));
        }
        let levels = cfg.max_disp / 8;
        let (nf, cf) = (cfg.fast_feature_channels, cfg.fast_agg_channels);
        let flat = HourglassShape { halve_disparity: false };
        Ok(Self {
            max_disp: cfg.max_disp,
            hypotheses: cfg.hypotheses,
            spec: PatchSpec::new(plan.group_channels, plan.group_split, levels),
            eighth: ConvLayer::conv2d("eighth.down", plan.l1, plan.l1, 3, 2, 1).norm_relu(),
            attention: AttentionNet::new(
                "attention",
                plan.groups(),
                plan.aggregate,
                HourglassShape { halve_disparity: levels % 4 == 0 },
            ),
            half: ConvLayer::conv2d("fast.half", plan.stem, nf, 3, 1, 1).with_bias(),
            agg: [
                ConvLayer::conv3d("fast.agg.0", 2 * nf, cf, 3, 1, 1).norm_relu(),
                ConvLayer::conv3d("fast.agg.1", cf, cf, 3, 1, 1).norm_relu(),
            ],
            hourglass: Hourglass::new("fast.agg.hourglass", cf, flat),
            head: Head::new("fast.agg.head", cf),
        })
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        ps.insert(PATCH_WEIGHTS, crate::costvol::init_patch_weights(self.spec.groups()));
        self.eighth.init(ps, rng);
        self.attention.init(ps, rng);
        self.half.init(ps, rng);
        self.agg.iter().for_each(|l| l.init(ps, rng));
        self.hourglass.init(ps, rng);
        self.head.init(ps, rng);
    }

    /// Parameters trained with the attention weights.
    pub fn attention_path(name: &str) -> bool {
        matches!(crate::params::group_of(name), "backbone" | "patch" | "attention" | "eighth")
    }

    fn eighth_concat<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f: &Levels) -> Result<Var> {
        let l1 = self.eighth.forward(tape, p, f.l1)?;
        Ok(ops::concat(tape, &[l1, f.l2_eighth, f.l3_eighth])?)
    }

    /// Raw attention `A_f: [1, D/8, H/8, W/8]`.
    pub fn fast_attention<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, left: &Levels, right: &Levels) -> Result<Var> {
        let cl = self.eighth_concat(tape, p, left)?;
        let cr = self.eighth_concat(tape, p, right)?;
        let omega = p.get(PATCH_WEIGHTS)?;
        let patch = patch_volume(tape, cl, cr, omega, &self.spec)?;
        self.attention.forward(tape, p, patch)
    }

    /// Runs the fast head on extracted features of an `h x w` pair.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        left: &Levels,
        right: &Levels,
        h: usize,
        w: usize,
    ) -> Result<FastOutputs<T>> {
        let d = self.max_disp;
        let (hh, wh) = (h / 2, w / 2);
        let attention = self.fast_attention(tape, p, left, right)?;
        let d_att_half = fast_attention_disparity(tape, attention, d, h, w)?;
        let hypotheses = sample_hypotheses(tape.value(d_att_half), self.hypotheses, d)?;
        let a_half = interpolate(tape, attention, &[half_levels(d), hh, wh], InterpMode::Trilinear)?;
        let fl = self.half.forward(tape, p, left.half)?;
        let fr = self.half.forward(tape, p, right.half)?;
        let sparse = build_sparse_acv(tape, fl, fr, a_half, &hypotheses)?;
        let mut x = sparse;
        for l in &self.agg {
            x = l.forward(tape, p, x)?;
        }
        x = self.hourglass.forward(tape, p, x)?;
        let logits = self.head.forward(tape, p, x)?;
        let logits = ops::reshape(tape, logits, &[self.hypotheses, hh, wh])?;
        let prob = ops::softmax(tape, logits, 0)?;
        let d_half = ops::expectation(tape, prob, 0, hypotheses.clone())?;
        let disparity = upsample_map(tape, d_half, h, w)?;
        let d_att = upsample_map(tape, d_att_half, h, w)?;
        Ok(FastOutputs { attention, d_att_half, hypotheses, sparse, prob, d_half, d_att, disparity })
    }

    /// Analytic 3-D convolution MACs of one forward pass at `h x w`.
    pub fn conv3d_macs(&self, h: usize, w: usize) -> u64 {
        let att = [self.max_disp / 8, h / 8, w / 8];
        let sparse = [self.hypotheses, h / 2, w / 2];
        self.attention.macs(&att)
            + self.agg.iter().map(|l| l.macs(&sparse)).sum::<u64>()
            + self.hourglass.macs(&sparse)
            + self.head.macs(&sparse)
    }
}

/// Bilinear resize of an `[h', w']` disparity map to `[h, w]`, values unchanged.
pub fn upsample_map<T: Real>(tape: &mut Tape<T>, map: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    let x = ops::reshape(tape, map, &[1, s[0], s[1]])?;
    let x = interpolate(tape, x, &[h, w], InterpMode::Bilinear)?;
    Ok(ops::reshape(tape, x, &[h, w])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hypotheses_around_center() {
        let c = Tensor::from_vec(&[1, 2], vec![10.0, 0.0]).unwrap();
        let hyp = sample_hypotheses(&c, 6, 32).unwrap();
        let at = |m: usize, x: usize| hyp.at(&[m, 0, x]);
        assert_eq!((0..6).map(|m| at(m, 0)).collect::<Vec<f64>>(), vec![7.5, 8.5, 9.5, 10.5, 11.5, 12.5]);
        assert_eq!((0..6).map(|m| at(m, 1)).collect::<Vec<f64>>(), vec![0.0, 0.0, 0.0, 0.5, 1.5, 2.5]);
        assert!(sample_hypotheses(&c, 5, 32).is_err());
        assert!(sample_hypotheses(&c, 0, 32).is_err());
    }

    #[test]
    fn constant_attention_gives_midpoint() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::<f64>::full(&[1, 4, 8, 8], -0.3));
        let d = fast_attention_disparity(&mut tape, a, 32, 64, 64).unwrap();
        assert_eq!(tape.shape(d), &[32, 32]);
        assert!(tape.value(d).data().iter().all(|&v| (v - 15.0).abs() < 1e-12));
    }

    #[test]
    fn integer_hypothesis_samples_grid_exactly() {
        let mut tape = Tape::new();
        let f = Tensor::<f64>::from_fn(&[2, 2, 8], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let l = tape.constant(f.clone());
        let a = tape.constant(Tensor::ones(&[1, 4, 2, 8]));
        let hyp = Tensor::full(&[2, 2, 8], 4.0);
        let v = build_sparse_acv(&mut tape, l, l, a, &hyp).unwrap();
        let out = tape.value(v);
        assert_eq!(out.shape(), &[4, 2, 2, 8]);
        for c in 0..2 {
            for y in 0..2 {
                assert_eq!(out.at(&[2 + c, 1, y, 1]), 0.0);
                for x in 2..8 {
                    assert_eq!(out.at(&[2 + c, 1, y, x]), f.at(&[c, y, x - 2]));
                    assert_eq!(out.at(&[c, 0, y, x]), f.at(&[c, y, x]));
                }
            }
        }
    }
}
