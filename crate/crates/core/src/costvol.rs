//! Cost volume construction: the initial concatenation volume, the
//! multi-level adaptive patch matching volume, attention weight generation and
//! attention filtering.
//!
//! Volumes are laid out `[channel, disparity, y, x]`. A left pixel `(x, y)`
//! at disparity `d` is matched against right pixel `(x - d, y)`; samples that
//! fall outside the image contribute zero.

use acv_ndops::{ops, Backward, NdError, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::aggregate::{Hourglass, HourglassShape};
use crate::backbone::FeatureSet;
use crate::error::{AcvError, Result};
use crate::params::{Bound, ConvLayer, ParamSet};

pub const PATCH_WEIGHTS: &str = "patch.omega";

fn disparity_levels(max_disp: usize) -> Result<usize> {
    if max_disp == 0 || max_disp % 4 != 0 {
        return Err(AcvError::config(format!("max disparity {max_disp} must be a positive multiple of 4")));
    }
    Ok(max_disp / 4)
}

struct ConcatVolumeRule {
    levels: usize,
}

impl<T: Real> Backward<T> for ConcatVolumeRule {
    fn name(&self) -> &'static str {
        "concat_volume"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let [c, h, w] = [x[0].shape()[0], x[0].shape()[1], x[0].shape()[2]];
        let n = self.levels;
        let gd = g.data();
        let mut dl = needs[0].then(|| Tensor::zeros(x[0].shape()));
        let mut dr = needs[1].then(|| Tensor::zeros(x[1].shape()));
        for ch in 0..c {
            for d in 0..n {
                for y in 0..h {
                    let gl = &gd[((ch * n + d) * h + y) * w..][..w];
                    let gr = &gd[(((c + ch) * n + d) * h + y) * w..][..w];
                    let row = (ch * h + y) * w;
                    if let Some(dl) = dl.as_mut() {
                        for (o, &v) in dl.data_mut()[row..row + w].iter_mut().zip(gl) {
                            *o += v;
                        }
                    }
                    if let Some(dr) = dr.as_mut() {
                        let dr = dr.data_mut();
                        for xx in d..w {
                            dr[row + xx - d] += gr[xx];
                        }
                    }
                }
            }
        }
        vec![dl, dr]
    }
}

/// Concatenation volume over `levels` disparities:
/// `out[0..C, d, y, x] = left[:, y, x]`, `out[C..2C, d, y, x] = right[:, y, x - d]`.
pub fn concat_volume<T: Real>(tape: &mut Tape<T>, left: Var, right: Var, levels: usize) -> Result<Var> {
    let (ls, rs) = (tape.shape(left).to_vec(), tape.shape(right).to_vec());
    if ls != rs || ls.len() != 3 || levels == 0 {
        return Err(NdError::dim("build_concat", format!("left {ls:?} right {rs:?} levels {levels}")).into());
    }
    let [c, h, w] = [ls[0], ls[1], ls[2]];
    let (fl, fr) = (tape.value(left).data(), tape.value(right).data());
    let mut out = vec![T::zero(); 2 * c * levels * h * w];
    for ch in 0..c {
        for d in 0..levels {
            for y in 0..h {
                let src = (ch * h + y) * w;
                let lo = ((ch * levels + d) * h + y) * w;
                out[lo..lo + w].copy_from_slice(&fl[src..src + w]);
                let ro = (((c + ch) * levels + d) * h + y) * w;
                for xx in d..w {
                    out[ro + xx] = fr[src + xx - d];
                }
            }
        }
    }
    let out = Tensor::from_vec(&[2 * c, levels, h, w], out)?;
    Ok(tape.record("build_concat", &[left, right], out, Box::new(ConcatVolumeRule { levels }))?)
}

/// Initial concatenation volume `[2 N_c, D/4, H/4, W/4]` from compressed features.
pub fn build_concat<T: Real>(tape: &mut Tape<T>, f_left: Var, f_right: Var, max_disp: usize) -> Result<Var> {
    let levels = disparity_levels(max_disp)?;
    concat_volume(tape, f_left, f_right, levels)
}

/// Grouping and normalisation of the patch matching volume.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub group_channels: usize,
    /// Groups per feature level; level `k` (1-based) uses dilation `k`.
    pub group_split: [usize; 3],
    /// Disparity levels of the volume.
    pub levels: usize,
    /// Overrides the `N_f / N_g` divisor; only used to inject faults in self-tests.
    pub norm_divisor: Option<f64>,
}

impl PatchSpec {
    pub fn new(group_channels: usize, group_split: [usize; 3], levels: usize) -> Self {
        Self { group_channels, group_split, levels, norm_divisor: None }
    }

    pub fn groups(&self) -> usize {
        self.group_split.iter().sum()
    }

    /// Dilation (feature level, 1-based) of group `g`.
    pub fn dilation_of(&self, g: usize) -> usize {
        let [a, b, _] = self.group_split;
        if g < a {
            1
        } else if g < a + b {
            2
        } else {
            3
        }
    }

    fn divisor(&self) -> f64 {
        self.norm_divisor.unwrap_or(self.group_channels as f64)
    }
}

/// Initial patch weights: `1/9` at every offset of every group.
pub fn init_patch_weights<T: Real>(groups: usize) -> Tensor<T> {
    Tensor::full(&[groups, 3, 3], T::from_f64_lossy(1.0 / 9.0))
}

/// Per-group atrous offsets `(dy, dx, a, b)`: weight `omega[g, a, b]` applies to
/// vertical offset `dy = (a - 1) k` and horizontal offset `dx = (b - 1) k`.
fn offsets(k: usize) -> impl Iterator<Item = (isize, isize, usize, usize)> {
    (0..3).flat_map(move |a| (0..3).map(move |b| ((a as isize - 1) * k as isize, (b as isize - 1) * k as isize, a, b)))
}

struct PatchVolumeRule<T> {
    spec: PatchSpec,
    /// Pointwise group correlation `[N_g, levels, h, w]`.
    corr: Vec<T>,
}

impl<T: Real> Backward<T> for PatchVolumeRule<T> {
    fn name(&self) -> &'static str {
        "patch_volume"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let (fl, fr, omega) = (x[0], x[1], x[2]);
        let (h, w) = (fl.shape()[1], fl.shape()[2]);
        let (ng, n, cpg) = (self.spec.groups(), self.spec.levels, self.spec.group_channels);
        let plane = h * w;
        let gd = g.data();
        let od = omega.data();

        let mut domega = needs[2].then(|| vec![T::zero(); ng * 9]);
        let mut dcorr = vec![T::zero(); ng * n * plane];
        for grp in 0..ng {
            let k = self.spec.dilation_of(grp);
            for (dy, dx, a, b) in offsets(k) {
                let wgt = od[grp * 9 + a * 3 + b];
                let mut acc = T::zero();
                for d in 0..n {
                    let base = (grp * n + d) * plane;
                    for y in 0..h {
                        let sy = y as isize - dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize - dx;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let src = base + sy as usize * w + sx as usize;
                            let go = gd[base + y * w + xx];
                            acc += go * self.corr[src];
                            dcorr[src] += go * wgt;
                        }
                    }
                }
                if let Some(dom) = domega.as_mut() {
                    dom[grp * 9 + a * 3 + b] = acc;
                }
            }
        }

        let scale = T::one() / T::from_f64_lossy(self.spec.divisor());
        let mut dl = needs[0].then(|| Tensor::zeros(fl.shape()));
        let mut dr = needs[1].then(|| Tensor::zeros(fr.shape()));
        for grp in 0..ng {
            for c in grp * cpg..(grp + 1) * cpg {
                for d in 0..n {
                    for y in 0..h {
                        let row = (c * h + y) * w;
                        let crow = ((grp * n + d) * h + y) * w;
                        for xx in d..w {
                            let gc = dcorr[crow + xx] * scale;
                            if let Some(dl) = dl.as_mut() {
                                dl.data_mut()[row + xx] += gc * fr.data()[row + xx - d];
                            }
                            if let Some(dr) = dr.as_mut() {
                                dr.data_mut()[row + xx - d] += gc * fl.data()[row + xx];
                            }
                        }
                    }
                }
            }
        }
        let domega = domega.map(|v| Tensor::from_vec(omega.shape(), v).expect("omega shape"));
        vec![dl, dr, domega]
    }
}

/// Multi-level adaptive patch matching volume `[N_g, levels, h, w]`.
///
/// `left`/`right` are the `[N_f, h, w]` level concatenations; `omega` is
/// `[N_g, 3, 3]`. For group `g` at level `k`:
/// `out[g, d, y, x] = 1/(N_f/N_g) * sum_{a,b} omega[g,a,b] *
///   <left_g(x - i, y - j), right_g(x - i - d, y - j)>` with `j = (a-1)k`, `i = (b-1)k`.
pub fn patch_volume<T: Real>(tape: &mut Tape<T>, left: Var, right: Var, omega: Var, spec: &PatchSpec) -> Result<Var> {
    let (ls, rs) = (tape.shape(left).to_vec(), tape.shape(right).to_vec());
    let ng = spec.groups();
    if ls != rs || ls.len() != 3 {
        return Err(NdError::dim("build_patch_volume", format!("left {ls:?} right {rs:?}")).into());
    }
    if spec.group_channels == 0 || ls[0] != ng * spec.group_channels {
        return Err(AcvError::config(format!(
            "{} feature channels cannot be split into groups {:?} of {}",
            ls[0], spec.group_split, spec.group_channels
        )));
    }
    if tape.shape(omega) != [ng, 3, 3] {
        return Err(NdError::dim("build_patch_volume", format!("omega {:?} for {ng} groups", tape.shape(omega))).into());
    }
    if spec.levels == 0 {
        return Err(AcvError::config("patch volume needs at least one disparity level"));
    }
    let (h, w, n, cpg) = (ls[1], ls[2], spec.levels, spec.group_channels);
    let plane = h * w;
    let (fl, fr) = (tape.value(left).data(), tape.value(right).data());
    let scale = T::one() / T::from_f64_lossy(spec.divisor());

    let mut corr = vec![T::zero(); ng * n * plane];
    for grp in 0..ng {
        for c in grp * cpg..(grp + 1) * cpg {
            for d in 0..n {
                for y in 0..h {
                    let row = (c * h + y) * w;
                    let crow = ((grp * n + d) * h + y) * w;
                    for xx in d..w {
                        corr[crow + xx] += fl[row + xx] * fr[row + xx - d];
                    }
                }
            }
        }
    }
    corr.iter_mut().for_each(|v| *v *= scale);

    let od = tape.value(omega).data();
    let mut out = vec![T::zero(); ng * n * plane];
    for grp in 0..ng {
        let k = spec.dilation_of(grp);
        for (dy, dx, a, b) in offsets(k) {
            let wgt = od[grp * 9 + a * 3 + b];
            for d in 0..n {
                let base = (grp * n + d) * plane;
                for y in 0..h {
                    let sy = y as isize - dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    // offsets wider than the image leave an empty range
                    let (x0, x1) = (dx.max(0) as usize, (w as isize + dx.min(0)).max(0) as usize);
                    let dst = &mut out[base + y * w..base + (y + 1) * w];
                    let src = &corr[base + sy as usize * w..base + (sy as usize + 1) * w];
                    for xx in x0..x1 {
                        dst[xx] += wgt * src[(xx as isize - dx) as usize];
                    }
                }
            }
        }
    }
    let out = Tensor::from_vec(&[ng, n, h, w], out)?;
    let rule = PatchVolumeRule { spec: spec.clone(), corr };
    Ok(tape.record("build_patch_volume", &[left, right, omega], out, Box::new(rule))?)
}

/// Patch matching volume from two feature sets (levels concatenated l1, l2, l3).
pub fn build_patch_volume<T: Real>(
    tape: &mut Tape<T>,
    left: &FeatureSet,
    right: &FeatureSet,
    omega: Var,
    spec: &PatchSpec,
) -> Result<Var> {
    patch_volume(tape, left.concat, right.concat, omega, spec)
}

/// Two 3-D convolutions, one hourglass and a 1-channel projection turning a
/// patch matching volume into raw attention weights.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    convs: [ConvLayer; 2],
    hourglass: Hourglass,
    project: ConvLayer,
}

impl AttentionNet {
    pub fn new(prefix: &str, groups: usize, channels: usize, shape: HourglassShape) -> Self {
        Self {
            convs: [
                ConvLayer::conv3d(format!("{prefix}.conv0"), groups, channels, 3, 1, 1).norm_relu(),
                ConvLayer::conv3d(format!("{prefix}.conv1"), channels, channels, 3, 1, 1).norm_relu(),
            ],
            hourglass: Hourglass::new(&format!("{prefix}.hourglass"), channels, shape),
            project: ConvLayer::conv3d(format!("{prefix}.project"), channels, 1, 3, 1, 1).with_bias(),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        self.convs.iter().for_each(|l| l.init(ps, rng));
        self.hourglass.init(ps, rng);
        self.project.init(ps, rng);
    }

    /// Raw (unnormalised) attention `[1, levels, h, w]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, patch: Var) -> Result<Var> {
        let mut x = patch;
        for l in &self.convs {
            x = l.forward(tape, p, x)?;
        }
        x = self.hourglass.forward(tape, p, x)?;
        self.project.forward(tape, p, x)
    }

    pub fn macs(&self, extent: &[usize]) -> u64 {
        self.convs.iter().map(|l| l.macs(extent)).sum::<u64>() + self.hourglass.macs(extent) + self.project.macs(extent)
    }
}

/// Attention filtering: every channel of `volume` multiplied by the single
/// attention channel.
pub fn filter<T: Real>(tape: &mut Tape<T>, attention: Var, volume: Var) -> Result<Var> {
    let (a, c) = (tape.shape(attention), tape.shape(volume));
    if a.len() != 4 || c.len() != 4 || a[0] != 1 || a[1..] != c[1..] {
        return Err(NdError::dim("filter", format!("attention {a:?} vs volume {c:?}")).into());
    }
    Ok(ops::broadcast_mul(tape, attention, volume)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn concat_cell_and_zero_padding() {
        let mut tape = Tape::new();
        // N_c = 2, 1x3 image, constant features
        let l = tape.constant(Tensor::from_fn(&[2, 1, 3], |i| (i[0] + 1) as f64));
        let r = tape.constant(Tensor::from_fn(&[2, 1, 3], |i| (i[0] + 3) as f64));
        let v = concat_volume(&mut tape, l, r, 2).unwrap();
        let vol = tape.value(v);
        let cell = |d, x| (0..4).map(|c| vol.at(&[c, d, 0, x])).collect::<Vec<_>>();
        assert_eq!(cell(0, 0), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cell(1, 0), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(cell(1, 1), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_requires_multiple_of_four() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::<f64>::ones(&[2, 4, 4]));
        assert!(build_concat(&mut tape, l, l, 6).is_err());
        let v = build_concat(&mut tape, l, l, 8).unwrap();
        assert_eq!(tape.shape(v), &[4, 2, 4, 4]);
    }

    #[test]
    fn center_delta_is_pointwise_group_correlation() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[2, 1, 1], &[1.0, 2.0]));
        let r = tape.constant(t(&[2, 1, 1], &[3.0, 4.0]));
        let mut delta = Tensor::zeros(&[1, 3, 3]);
        delta.set(&[0, 1, 1], 1.0);
        let om = tape.constant(delta);
        let spec = PatchSpec::new(2, [1, 0, 0], 1);
        let v = patch_volume(&mut tape, l, r, om, &spec).unwrap();
        assert_eq!(tape.value(v).data(), &[5.5]);
    }

    #[test]
    fn zero_weights_give_zero_volume() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::<f64>::from_fn(&[4, 5, 5], |i| (i[0] + i[1] * i[2]) as f64));
        let om = tape.constant(Tensor::zeros(&[2, 3, 3]));
        let v = patch_volume(&mut tape, l, l, om, &PatchSpec::new(2, [1, 1, 0], 3)).unwrap();
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_grouping() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::<f64>::ones(&[6, 4, 4]));
        let om = tape.constant(Tensor::zeros(&[2, 3, 3]));
        assert!(patch_volume(&mut tape, l, l, om, &PatchSpec::new(4, [1, 1, 0], 1)).is_err());
    }

    #[test]
    fn filter_identity_and_annihilation() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| i.iter().sum::<usize>() as f64 - 2.5));
        let one = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let zero = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let same = filter(&mut tape, one, c).unwrap();
        assert_eq!(tape.value(same), tape.value(c));
        let none = filter(&mut tape, zero, c).unwrap();
        assert!(tape.value(none).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::ones(&[1, 3, 2, 2]));
        assert!(filter(&mut tape, bad, c).is_err());
    }
}
