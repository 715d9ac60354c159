//! Direct nested-loop evaluations of the cost volume operators, used by the
//! self-test suites as references for the optimised implementations.

use acv_ndops::Tensor;

use crate::costvol::PatchSpec;

/// Concatenation volume, one cell at a time.
pub fn concat_volume(fl: &Tensor<f64>, fr: &Tensor<f64>, levels: usize) -> Tensor<f64> {
    let [c, h, w] = [fl.shape()[0], fl.shape()[1], fl.shape()[2]];
    Tensor::from_fn(&[2 * c, levels, h, w], |i| {
        let (ch, d, y, x) = (i[0], i[1], i[2], i[3]);
        if ch < c {
            fl.at(&[ch, y, x])
        } else if x >= d {
            fr.at(&[ch - c, y, x - d])
        } else {
            0.0
        }
    })
}

/// Pointwise group-wise correlation `[N_g, levels, h, w]`.
pub fn group_correlation(fl: &Tensor<f64>, fr: &Tensor<f64>, spec: &PatchSpec) -> Tensor<f64> {
    let [h, w] = [fl.shape()[1], fl.shape()[2]];
    let cpg = spec.group_channels;
    Tensor::from_fn(&[spec.groups(), spec.levels, h, w], |i| {
        let (g, d, y, x) = (i[0], i[1], i[2], i[3]);
        if x < d {
            return 0.0;
        }
        (g * cpg..(g + 1) * cpg).map(|c| fl.at(&[c, y, x]) * fr.at(&[c, y, x - d])).sum::<f64>() / cpg as f64
    })
}

/// Patch matching volume: for every cell, the weighted sum of the nine
/// dilated group correlations.
pub fn patch_volume(fl: &Tensor<f64>, fr: &Tensor<f64>, omega: &Tensor<f64>, spec: &PatchSpec) -> Tensor<f64> {
    let [h, w] = [fl.shape()[1] as isize, fl.shape()[2] as isize];
    let cpg = spec.group_channels;
    Tensor::from_fn(&[spec.groups(), spec.levels, h as usize, w as usize], |i| {
        let (g, d) = (i[0], i[1] as isize);
        let (y, x) = (i[2] as isize, i[3] as isize);
        let k = spec.dilation_of(g) as isize;
        let mut total = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                let (j, ii) = ((a as isize - 1) * k, (b as isize - 1) * k);
                let (yy, xl, xr) = (y - j, x - ii, x - ii - d);
                if yy < 0 || yy >= h || xl < 0 || xl >= w || xr < 0 {
                    continue;
                }
                let dot: f64 = (g * cpg..(g + 1) * cpg)
                    .map(|c| fl.at(&[c, yy as usize, xl as usize]) * fr.at(&[c, yy as usize, xr as usize]))
                    .sum();
                total += omega.at(&[g, a, b]) * dot;
            }
        }
        total / cpg as f64
    })
}

/// `out[c, ...] = a[0, ...] * v[c, ...]`.
pub fn filter(a: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(v.shape(), |i| {
        let mut ai = i.to_vec();
        ai[0] = 0;
        a.at(&ai) * v.at(i)
    })
}

fn lerp_row(f: &Tensor<f64>, c: usize, y: usize, pos: f64) -> f64 {
    let w = f.shape()[2] as isize;
    let x0 = pos.floor();
    let t = pos - x0;
    let sample = |x: isize| if x >= 0 && x < w { f.at(&[c, y, x as usize]) } else { 0.0 };
    (1.0 - t) * sample(x0 as isize) + t * sample(x0 as isize + 1)
}

/// Sparse attention concatenation volume, one cell at a time: right features
/// at `x - v/2`, attention at clamped index `v/2`.
pub fn sparse_acv(fl: &Tensor<f64>, fr: &Tensor<f64>, att: &Tensor<f64>, hyp: &Tensor<f64>) -> Tensor<f64> {
    let c = fl.shape()[0];
    let levels = att.shape()[1];
    Tensor::from_fn(&[2 * c, hyp.shape()[0], fl.shape()[1], fl.shape()[2]], |i| {
        let (ch, m, y, x) = (i[0], i[1], i[2], i[3]);
        let v = hyp.at(&[m, y, x]) / 2.0;
        let q = v.clamp(0.0, (levels - 1) as f64);
        let k0 = q.floor();
        let t = q - k0;
        let k1 = (k0 as usize + 1).min(levels - 1);
        let a = (1.0 - t) * att.at(&[0, k0 as usize, y, x]) + t * att.at(&[0, k1, y, x]);
        let feat = if ch < c { fl.at(&[ch, y, x]) } else { lerp_row(fr, ch - c, y, x as f64 - v) };
        a * feat
    })
}
