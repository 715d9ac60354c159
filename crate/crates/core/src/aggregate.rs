//! 3-D cost aggregation: pre-hourglass block, stacked hourglasses and the
//! 1-channel output heads.

use acv_ndops::{ops, NdError, Real, Tape, Var};
use rand::Rng;

use crate::error::{AcvError, Result};
use crate::params::{Bound, ConvLayer, ParamSet};

/// Whether an hourglass halves the disparity axis along with the spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HourglassShape {
    pub halve_disparity: bool,
}

/// Encoder-decoder: `C -> 2C -> 4C` with two stride-2 stages, decoded by two
/// transposed convolutions whose outputs are added to the matching encoder
/// activations and passed through ReLU.
#[derive(Debug, Clone)]
pub struct Hourglass {
    shape: HourglassShape,
    enc: [ConvLayer; 4],
    dec: [ConvLayer; 2],
}

impl Hourglass {
    pub fn new(prefix: &str, c: usize, shape: HourglassShape) -> Self {
        let down = |name: String, cin, cout| {
            let l = ConvLayer::conv3d(name, cin, cout, 3, 2, 1).norm_relu();
            if shape.halve_disparity {
                l
            } else {
                l.with_axis(0, 3, 1, 1)
            }
        };
        let up = |name: String, cin, cout| {
            let l = ConvLayer::deconv3d(name, cin, cout, 4, 2, 1).norm_only();
            if shape.halve_disparity {
                l
            } else {
                l.with_axis(0, 3, 1, 1)
            }
        };
        Self {
            shape,
            enc: [
                down(format!("{prefix}.enc0"), c, 2 * c),
                ConvLayer::conv3d(format!("{prefix}.enc1"), 2 * c, 2 * c, 3, 1, 1).norm_relu(),
                down(format!("{prefix}.enc2"), 2 * c, 4 * c),
                ConvLayer::conv3d(format!("{prefix}.enc3"), 4 * c, 4 * c, 3, 1, 1).norm_relu(),
            ],
            dec: [up(format!("{prefix}.dec0"), 4 * c, 2 * c), up(format!("{prefix}.dec1"), 2 * c, c)],
        }
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        self.enc.iter().chain(&self.dec).for_each(|l| l.init(ps, rng));
    }

    /// Rejects extents that two halvings cannot restore exactly.
    pub fn check_extent(&self, extent: &[usize]) -> Result<()> {
        let bad = extent.iter().enumerate().any(|(a, &n)| {
            let halved = a > 0 || self.shape.halve_disparity;
            n == 0 || (halved && n % 4 != 0)
        });
        if bad || extent.len() != 3 {
            return Err(NdError::dim(
                "hourglass",
                format!("extents {extent:?} must be divisible by 4 along every halved axis"),
            )
            .into());
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[0] != self.enc[0].c_in {
            return Err(NdError::dim("hourglass", format!("input {shape:?}, expected {} channels", self.enc[0].c_in)).into());
        }
        self.check_extent(&shape[1..])?;
        let e0 = self.enc[0].forward(tape, p, x)?;
        let e1 = self.enc[1].forward(tape, p, e0)?;
        let e2 = self.enc[2].forward(tape, p, e1)?;
        let e3 = self.enc[3].forward(tape, p, e2)?;
        let d0 = self.dec[0].forward(tape, p, e3)?;
        let d0 = ops::add(tape, d0, e1)?;
        let d0 = ops::relu(tape, d0)?;
        let d1 = self.dec[1].forward(tape, p, d0)?;
        let d1 = ops::add(tape, d1, x)?;
        Ok(ops::relu(tape, d1)?)
    }

    pub fn macs(&self, extent: &[usize]) -> u64 {
        let mut total = 0;
        let mut ext = extent.to_vec();
        for l in &self.enc {
            total += l.macs(&ext);
            ext = l.output_extent(&ext);
        }
        for l in &self.dec {
            total += l.macs(&ext);
            ext = l.output_extent(&ext);
        }
        total
    }
}

/// `conv C->C` (norm, ReLU) then `conv C->1` with bias.
#[derive(Debug, Clone)]
pub struct Head {
    layers: [ConvLayer; 2],
}

impl Head {
    pub fn new(prefix: &str, c: usize) -> Self {
        Self {
            layers: [
                ConvLayer::conv3d(format!("{prefix}.0"), c, c, 3, 1, 1).norm_relu(),
                ConvLayer::conv3d(format!("{prefix}.1"), c, 1, 3, 1, 1).with_bias(),
            ],
        }
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        self.layers.iter().for_each(|l| l.init(ps, rng));
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.layers[0].forward(tape, p, x)?;
        self.layers[1].forward(tape, p, h)
    }

    pub fn macs(&self, extent: &[usize]) -> u64 {
        self.layers.iter().map(|l| l.macs(extent)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Most head outputs kept in train mode.
pub const MAX_HEADS: usize = 3;

/// Pre-hourglass block, `n_hg` hourglasses and output heads on the last
/// (at most three) stages.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pre: Vec<ConvLayer>,
    hourglasses: Vec<Hourglass>,
    /// `heads[i]` reads stage `first_head + i` (stage 0 = pre-hourglass).
    heads: Vec<Head>,
    first_head: usize,
}

impl Aggregator {
    pub fn new(prefix: &str, c_in: usize, c: usize, n_hg: usize, shape: HourglassShape) -> Result<Self> {
        if n_hg > 3 {
            return Err(AcvError::config(format!("hourglass count {n_hg} outside 0..=3")));
        }
        let pre = (0..4)
            .map(|i| ConvLayer::conv3d(format!("{prefix}.pre.{i}"), if i == 0 { c_in } else { c }, c, 3, 1, 1).norm_relu())
            .collect();
        let hourglasses = (0..n_hg).map(|i| Hourglass::new(&format!("{prefix}.hourglass{i}"), c, shape)).collect();
        let stages = n_hg + 1;
        let first_head = stages.saturating_sub(MAX_HEADS);
        let heads = (first_head..stages).map(|s| Head::new(&format!("{prefix}.head{s}"), c)).collect();
        Ok(Self { pre, hourglasses, heads, first_head })
    }

    pub fn hourglass_count(&self) -> usize {
        self.hourglasses.len()
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        self.pre.iter().for_each(|l| l.init(ps, rng));
        self.hourglasses.iter().for_each(|h| h.init(ps, rng));
        self.heads.iter().for_each(|h| h.init(ps, rng));
    }

    /// Four conv-norm-ReLU layers taking the volume to `C_agg` channels.
    pub fn pre_hourglass<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, volume: Var) -> Result<Var> {
        let shape = tape.shape(volume);
        if shape.len() != 4 || shape[0] != self.pre[0].c_in {
            return Err(NdError::dim(
                "pre_hourglass",
                format!("volume {shape:?}, expected {} channels", self.pre[0].c_in),
            )
            .into());
        }
        let mut x = volume;
        for l in &self.pre {
            x = l.forward(tape, p, x)?;
        }
        Ok(x)
    }

    /// 1-channel output volumes, earliest first. Train mode returns one per
    /// headed stage; infer mode only the last.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, volume: Var, mode: Mode) -> Result<Vec<Var>> {
        let extent = tape.shape(volume)[1..].to_vec();
        for h in &self.hourglasses {
            h.check_extent(&extent)?;
        }
        let mut x = self.pre_hourglass(tape, p, volume)?;
        let last = self.hourglasses.len();
        let mut outputs = Vec::new();
        for stage in 0..=last {
            if stage > 0 {
                x = self.hourglasses[stage - 1].forward(tape, p, x)?;
            }
            let headed = stage >= self.first_head && (mode == Mode::Train || stage == last);
            if headed {
                outputs.push(self.heads[stage - self.first_head].forward(tape, p, x)?);
            }
        }
        Ok(outputs)
    }

    /// Analytic 3-D convolution MACs of an inference pass.
    pub fn macs(&self, c_in_extent: &[usize]) -> u64 {
        self.pre.iter().map(|l| l.macs(c_in_extent)).sum::<u64>()
            + self.hourglasses.iter().map(|h| h.macs(c_in_extent)).sum::<u64>()
            + self.heads.last().map_or(0, |h| h.macs(c_in_extent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use acv_ndops::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HALVING: HourglassShape = HourglassShape { halve_disparity: true };

    fn params<F: FnOnce(&mut ParamSet<f64>, &mut ChaCha8Rng)>(f: F) -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        f(&mut ps, &mut ChaCha8Rng::seed_from_u64(5));
        ps
    }

    #[test]
    fn hourglass_preserves_shape() {
        for (shape, ext) in [(HALVING, [8, 16, 16]), (HourglassShape { halve_disparity: false }, [2, 4, 4])] {
            let hg = Hourglass::new("hg", 2, shape);
            let ps = params(|ps, r| hg.init(ps, r));
            let mut tape = Tape::new();
            let b = ps.bind(&mut tape, |_| false);
            let x = tape.constant(Tensor::from_fn(&[2, ext[0], ext[1], ext[2]], |i| (i[1] + i[3]) as f64 * 0.1));
            let y = hg.forward(&mut tape, &b, x).unwrap();
            assert_eq!(tape.shape(y), tape.shape(x));
            assert_eq!(tape.macs().conv3d, hg.macs(&ext));
        }
    }

    #[test]
    fn hourglass_divisibility() {
        let hg = Hourglass::new("hg", 1, HALVING);
        assert!(hg.check_extent(&[4, 8, 8]).is_ok());
        assert!(hg.check_extent(&[2, 8, 8]).is_err());
        assert!(hg.check_extent(&[4, 6, 8]).is_err());
    }

    #[test]
    fn output_counts_and_infer_consistency() {
        for (n_hg, train_outputs) in [(0, 1), (1, 2), (2, 3), (3, 3)] {
            let agg = Aggregator::new("aggregate", 4, 2, n_hg, HALVING).unwrap();
            let ps = params(|ps, r| agg.init(ps, r));
            let input = Tensor::from_fn(&[4, 4, 4, 4], |i| ((i[0] * 7 + i[1] * 3 + i[2] + i[3] * 5) % 11) as f64 / 11.0);
            let run = |mode| {
                let mut tape = Tape::new();
                let b = ps.bind(&mut tape, |_| false);
                let x = tape.constant(input.clone());
                let outs = agg.forward(&mut tape, &b, x, mode).unwrap();
                outs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>()
            };
            let train = run(Mode::Train);
            let infer = run(Mode::Infer);
            assert_eq!(train.len(), train_outputs);
            assert_eq!(infer.len(), 1);
            assert_eq!(train.last(), infer.last());
            assert_eq!(train[0].shape(), &[1, 4, 4, 4]);
        }
        assert!(Aggregator::new("a", 4, 2, 4, HALVING).is_err());
    }

    #[test]
    fn zero_params_give_zero_pre_hourglass() {
        let agg = Aggregator::new("aggregate", 4, 2, 0, HALVING).unwrap();
        let mut ps = params(|ps, r| agg.init(ps, r));
        ps.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        let mut tape = Tape::new();
        let b = ps.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::ones(&[4, 4, 4, 4]));
        let y = agg.pre_hourglass(&mut tape, &b, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
