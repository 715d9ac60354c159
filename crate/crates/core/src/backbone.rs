//! Shared-weight three-level feature extractor.
//!
//! Stem: three 3x3 convolutions with strides 2, 1, 1 (1/2 resolution).
//! l1: stride-2 transition plus residual blocks at 1/4 resolution.
//! l2: stride-2 transition plus residual blocks at 1/8 resolution, upsampled
//! back to 1/4. l3: further residual blocks on top of l2 at 1/8, upsampled to 1/4.
//! `concat = [l1; l2; l3]` feeds patch matching, and two convolutions compress
//! it to the `N_c` channels used by the concatenation volume.

use acv_ndops::{interpolate, ops, InterpMode, Real, Tape, Var};
use rand::Rng;

use crate::config::ChannelPlan;
use crate::error::{AcvError, Result};
use crate::params::{Bound, ConvLayer, ParamSet};

/// Two 3x3 convolutions with an identity skip, then ReLU.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    a: ConvLayer,
    b: ConvLayer,
}

impl ResidualBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            a: ConvLayer::conv2d(format!("{name}.a"), channels, channels, 3, 1, 1).norm_relu(),
            b: ConvLayer::conv2d(format!("{name}.b"), channels, channels, 3, 1, 1).norm_only(),
        }
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        self.a.init(ps, rng);
        self.b.init(ps, rng);
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.a.forward(tape, p, x)?;
        let h = self.b.forward(tape, p, h)?;
        let s = ops::add(tape, h, x)?;
        Ok(ops::relu(tape, s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackboneConfig {
    pub plan: ChannelPlan,
    /// Residual blocks in the l1 stage and in each of the l2/l3 stages.
    pub residual_depths: [usize; 2],
    /// Build the 1/4-resolution concatenation and compression stage.
    pub quarter: bool,
}

/// Raw stage outputs of one image.
#[derive(Debug, Clone, Copy)]
pub struct Levels {
    /// Stem output at 1/2 resolution.
    pub half: Var,
    /// 1/4 resolution.
    pub l1: Var,
    /// l2 and l3 at 1/8 resolution.
    pub l2_eighth: Var,
    pub l3_eighth: Var,
}

/// Feature maps of one image. `l2`, `l3`, `concat` and `compressed` are at
/// 1/4 resolution.
#[derive(Debug, Clone, Copy)]
pub struct FeatureSet {
    pub levels: Levels,
    pub l2: Var,
    pub l3: Var,
    pub concat: Var,
    pub compressed: Var,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    stem: Vec<ConvLayer>,
    l1_down: ConvLayer,
    l1_blocks: Vec<ResidualBlock>,
    l2_down: ConvLayer,
    l2_blocks: Vec<ResidualBlock>,
    l3_blocks: Vec<ResidualBlock>,
    compress: Option<[ConvLayer; 2]>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Self {
        let p = cfg.plan;
        let [n1, n2] = cfg.residual_depths;
        let blocks = |stage: &str, n: usize, c: usize| {
            (0..n).map(|i| ResidualBlock::new(&format!("backbone.{stage}.block{i}"), c)).collect()
        };
        Self {
            cfg,
            stem: vec![
                ConvLayer::conv2d("backbone.stem.0", 3, p.stem, 3, 2, 1).norm_relu(),
                ConvLayer::conv2d("backbone.stem.1", p.stem, p.stem, 3, 1, 1).norm_relu(),
                ConvLayer::conv2d("backbone.stem.2", p.stem, p.stem, 3, 1, 1).norm_relu(),
            ],
            l1_down: ConvLayer::conv2d("backbone.l1.down", p.stem, p.l1, 3, 2, 1).norm_relu(),
            l1_blocks: blocks("l1", n1, p.l1),
            l2_down: ConvLayer::conv2d("backbone.l2.down", p.l1, p.l2, 3, 2, 1).norm_relu(),
            l2_blocks: blocks("l2", n2, p.l2),
            l3_blocks: blocks("l3", n2, p.l3),
            compress: cfg.quarter.then(|| {
                [
                    ConvLayer::conv2d("compress.0", p.concat, p.compress_hidden, 3, 1, 1).norm_relu(),
                    ConvLayer::conv2d("compress.1", p.compress_hidden, p.compressed, 1, 1, 0).with_bias(),
                ]
            }),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn init<T: Real, R: Rng>(&self, ps: &mut ParamSet<T>, rng: &mut R) {
        self.stem.iter().for_each(|l| l.init(ps, rng));
        self.l1_down.init(ps, rng);
        self.l1_blocks.iter().for_each(|b| b.init(ps, rng));
        self.l2_down.init(ps, rng);
        self.l2_blocks.iter().for_each(|b| b.init(ps, rng));
        self.l3_blocks.iter().for_each(|b| b.init(ps, rng));
        self.compress.iter().flatten().for_each(|l| l.init(ps, rng));
    }

    /// Stage outputs of one `[3, H, W]` image; H and W must be multiples of 8.
    pub fn levels<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Levels> {
        let shape = tape.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(AcvError::config(format!("image must be [3, H, W], got {shape:?}")));
        }
        let (h, w) = (shape[1], shape[2]);
        if h % 8 != 0 || w % 8 != 0 {
            return Err(AcvError::Tensor(acv_ndops::NdError::dim(
                "extract",
                format!("image extents {h}x{w} must be multiples of 8"),
            )));
        }
        let mut x = image;
        for layer in &self.stem {
            x = layer.forward(tape, p, x)?;
        }
        let half = x;
        let mut l1 = self.l1_down.forward(tape, p, half)?;
        for b in &self.l1_blocks {
            l1 = b.forward(tape, p, l1)?;
        }
        let mut l2_eighth = self.l2_down.forward(tape, p, l1)?;
        for b in &self.l2_blocks {
            l2_eighth = b.forward(tape, p, l2_eighth)?;
        }
        let mut l3_eighth = l2_eighth;
        for b in &self.l3_blocks {
            l3_eighth = b.forward(tape, p, l3_eighth)?;
        }
        Ok(Levels { half, l1, l2_eighth, l3_eighth })
    }

    /// Full feature set including the 1/4-resolution concatenation and its
    /// compression.
    pub fn extract<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<FeatureSet> {
        let levels = self.levels(tape, p, image)?;
        let s = tape.shape(levels.l1);
        let quarter = [s[1], s[2]];
        let l2 = interpolate(tape, levels.l2_eighth, &quarter, InterpMode::Bilinear)?;
        let l3 = interpolate(tape, levels.l3_eighth, &quarter, InterpMode::Bilinear)?;
        let concat = ops::concat(tape, &[levels.l1, l2, l3])?;
        let compressed = self.compress(tape, p, concat)?;
        Ok(FeatureSet { levels, l2, l3, concat, compressed })
    }

    /// Two convolutions taking `N_f` channels down to `N_c`.
    pub fn compress<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, concat: Var) -> Result<Var> {
        let c = tape.shape(concat)[0];
        if c != self.cfg.plan.concat {
            return Err(AcvError::Tensor(acv_ndops::NdError::dim(
                "compress",
                format!("expected {} channels, got {c}", self.cfg.plan.concat),
            )));
        }
        let layers = self.compress.as_ref().ok_or_else(|| AcvError::config("backbone built without compression"))?;
        let h = layers[0].forward(tape, p, concat)?;
        layers[1].forward(tape, p, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PipelineConfig;
    use acv_ndops::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &PipelineConfig) -> (Backbone, ParamSet<f64>) {
        let bb = Backbone::new(BackboneConfig { plan: cfg.channels().unwrap(), residual_depths: [1, 1], quarter: true });
        let mut ps = ParamSet::new();
        bb.init(&mut ps, &mut ChaCha8Rng::seed_from_u64(3));
        (bb, ps)
    }

    #[test]
    fn desk_shapes() {
        let (bb, ps) = build(&PipelineConfig::desk());
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, |_| false);
        let img = tape.constant(Tensor::full(&[3, 64, 64], 0.5));
        let f = bb.extract(&mut tape, &p, img).unwrap();
        assert_eq!(tape.shape(f.levels.l1), &[16, 16, 16]);
        assert_eq!(tape.shape(f.concat), &[80, 16, 16]);
        assert_eq!(tape.shape(f.compressed), &[8, 16, 16]);
        assert_eq!(tape.shape(f.levels.half), &[8, 32, 32]);
        assert_eq!(tape.shape(f.levels.l3_eighth), &[32, 8, 8]);
    }

    #[test]
    fn rejects_indivisible_extents() {
        let (bb, ps) = build(&PipelineConfig::tiny());
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, |_| false);
        let img = tape.constant(Tensor::full(&[3, 20, 16], 0.5));
        assert!(bb.extract(&mut tape, &p, img).is_err());
    }

    #[test]
    fn compress_of_zero_is_zero() {
        let (bb, mut ps) = build(&PipelineConfig::tiny());
        for (name, t) in ps.iter_mut() {
            if name.starts_with("compress") && (name.ends_with("bias") || name.ends_with("shift")) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, |_| false);
        let z = tape.constant(Tensor::zeros(&[40, 4, 4]));
        let y = bb.compress(&mut tape, &p, z).unwrap();
        assert_eq!(tape.shape(y), &[4, 4, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let wrong = tape.constant(Tensor::zeros(&[39, 4, 4]));
        assert!(bb.compress(&mut tape, &p, wrong).is_err());
    }
}
