//! Complete stereo networks behind a common trait, and a registry that
//! builds them by name.

use std::collections::BTreeMap;

use acv_ndops::{Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{Aggregator, HourglassShape, Mode};
use crate::backbone::{Backbone, BackboneConfig, FeatureSet};
use crate::config::PipelineConfig;
use crate::costvol::{self, AttentionNet, PatchSpec, PATCH_WEIGHTS};
use crate::error::{AcvError, Result};
use crate::fastpath::FastPath;
use crate::params::{group_of, Bound, ParamSet};
use crate::regress;
use crate::trainloss::{acvnet_loss, fast_loss, smooth_l1, LossScope};

/// Disparity maps produced by one forward pass. All maps are `[H, W]`.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Final estimate.
    pub disparity: Var,
    /// Disparity regressed from the attention weights (train mode only).
    pub attention: Option<Var>,
    /// Supervised outputs, earliest first; the last one is `disparity`.
    pub outputs: Vec<Var>,
}

pub trait StereoModel<T: Real> {
    fn name(&self) -> &'static str;

    fn config(&self) -> &PipelineConfig;

    /// Freshly initialised parameters; identical for identical seeds.
    fn init_params(&self, seed: u64) -> ParamSet<T>;

    /// Runs the network on a `[3, H, W]` pair.
    fn forward(&self, tape: &mut Tape<T>, params: &Bound, left: Var, right: Var, mode: Mode) -> Result<Prediction>;

    /// Training loss of a train-mode prediction.
    fn loss(&self, tape: &mut Tape<T>, pred: &Prediction, gt: &Tensor<T>, mask: &[bool], scope: LossScope) -> Result<Var>;

    /// Whether a parameter belongs to the attention-generation path.
    fn attention_path(&self, name: &str) -> bool;

    /// Analytic 3-D convolution multiply-accumulates of one inference pass.
    fn conv3d_macs(&self, height: usize, width: usize) -> u64;

    /// Convenience inference on plain tensors; returns the `[H, W]` disparity.
    fn predict(&self, params: &ParamSet<T>, left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape, |_| false);
        let (l, r) = (tape.constant(left.clone()), tape.constant(right.clone()));
        let pred = self.forward(&mut tape, &bound, l, r, Mode::Infer)?;
        Ok(tape.value(pred.disparity).clone())
    }
}

fn check_pair<T: Real>(cfg: &PipelineConfig, tape: &Tape<T>, left: Var, right: Var) -> Result<(usize, usize)> {
    let (ls, rs) = (tape.shape(left), tape.shape(right));
    if ls != rs || ls.len() != 3 || ls[0] != 3 {
        return Err(AcvError::config(format!("stereo pair must be two [3, H, W] images, got {ls:?} and {rs:?}")));
    }
    cfg.check_input(ls[1], ls[2])?;
    Ok((ls[1], ls[2]))
}

/// Whether the concatenation volume is filtered by attention weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filtering {
    Attention,
    /// Plain concatenation volume, no patch matching or attention branch.
    None,
}

/// Attention concatenation volume network, or the plain concatenation
/// baseline when built with [`Filtering::None`].
#[derive(Debug, Clone)]
pub struct AcvNet {
    cfg: PipelineConfig,
    filtering: Filtering,
    backbone: Backbone,
    spec: PatchSpec,
    attention: Option<AttentionNet>,
    aggregator: Aggregator,
}

/// Intermediate tensors of an [`AcvNet`] pass.
#[derive(Debug, Clone)]
pub struct AcvTrace {
    pub left: FeatureSet,
    pub right: FeatureSet,
    pub concat: Var,
    pub patch: Option<Var>,
    pub attention: Option<Var>,
    pub volume: Var,
    pub outputs: Vec<Var>,
}

impl AcvNet {
    pub fn new(cfg: &PipelineConfig, filtering: Filtering) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.channels()?;
        let shape = HourglassShape { halve_disparity: cfg.hourglass_halves_disparity };
        let attention = (filtering == Filtering::Attention)
            .then(|| AttentionNet::new("attention", plan.groups(), plan.aggregate, shape));
        Ok(Self {
            cfg: cfg.clone(),
            filtering,
            backbone: Backbone::new(BackboneConfig { plan, residual_depths: cfg.residual_depths, quarter: true }),
            spec: PatchSpec::new(plan.group_channels, plan.group_split, cfg.disp4()),
            attention,
            aggregator: Aggregator::new("aggregate", 2 * plan.compressed, plan.aggregate, cfg.hourglasses, shape)?,
        })
    }

    pub fn patch_spec(&self) -> &PatchSpec {
        &self.spec
    }

    /// Forward pass keeping every intermediate volume.
    pub fn trace<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, left: Var, right: Var, mode: Mode) -> Result<AcvTrace> {
        check_pair(&self.cfg, tape, left, right)?;
        let fl = self.backbone.extract(tape, p, left)?;
        let fr = self.backbone.extract(tape, p, right)?;
        let concat = costvol::build_concat(tape, fl.compressed, fr.compressed, self.cfg.max_disp)?;
        let (patch, attention, volume) = match &self.attention {
            Some(net) => {
                let omega = p.get(PATCH_WEIGHTS)?;
                let patch = costvol::build_patch_volume(tape, &fl, &fr, omega, &self.spec)?;
                let a = net.forward(tape, p, patch)?;
                let acv = costvol::filter(tape, a, concat)?;
                (Some(patch), Some(a), acv)
            }
            None => (None, None, concat),
        };
        let outputs = self.aggregator.forward(tape, p, volume, mode)?;
        Ok(AcvTrace { left: fl, right: fr, concat, patch, attention, volume, outputs })
    }
}

impl<T: Real> StereoModel<T> for AcvNet {
    fn name(&self) -> &'static str {
        match self.filtering {
            Filtering::Attention => "acvnet",
            Filtering::None => "concat-baseline",
        }
    }

    fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn init_params(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.backbone.init(&mut ps, &mut rng);
        if let Some(net) = &self.attention {
            ps.insert(PATCH_WEIGHTS, costvol::init_patch_weights(self.spec.groups()));
            net.init(&mut ps, &mut rng);
        }
        self.aggregator.init(&mut ps, &mut rng);
        ps
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, left: Var, right: Var, mode: Mode) -> Result<Prediction> {
        let (h, w) = (tape.shape(left)[1], tape.shape(left)[2]);
        let trace = self.trace(tape, p, left, right, mode)?;
        let d = self.cfg.max_disp;
        let outputs = trace
            .outputs
            .iter()
            .map(|&v| regress::volume_to_disparity(tape, v, d, h, w))
            .collect::<Result<Vec<_>>>()?;
        let attention = match (mode, trace.attention) {
            (Mode::Train, Some(a)) => Some(regress::attention_to_disparity(tape, a, d, h, w)?),
            _ => None,
        };
        let disparity = *outputs.last().expect("aggregator emits at least one output");
        Ok(Prediction { disparity, attention, outputs })
    }

    fn loss(&self, tape: &mut Tape<T>, pred: &Prediction, gt: &Tensor<T>, mask: &[bool], scope: LossScope) -> Result<Var> {
        let w = &self.cfg.loss_weights;
        match scope {
            LossScope::Full => acvnet_loss(tape, pred.attention, &pred.outputs, gt, mask, w),
            LossScope::AttentionOnly => {
                let d_att = pred
                    .attention
                    .ok_or_else(|| AcvError::config(format!("{} has no attention output", StereoModel::<T>::name(self))))?;
                let t = smooth_l1(tape, d_att, gt, mask)?;
                Ok(acv_ndops::ops::scale(tape, t.loss, T::from_f64_lossy(w.att))?)
            }
        }
    }

    fn attention_path(&self, name: &str) -> bool {
        matches!(group_of(name), "backbone" | "patch" | "attention")
    }

    fn conv3d_macs(&self, h: usize, w: usize) -> u64 {
        let ext = [self.cfg.disp4(), h / 4, w / 4];
        self.attention.as_ref().map_or(0, |a| a.macs(&ext)) + self.aggregator.macs(&ext)
    }
}

/// ACVNet-Fast.
#[derive(Debug, Clone)]
pub struct AcvNetFast {
    cfg: PipelineConfig,
    backbone: Backbone,
    fast: FastPath,
}

impl AcvNetFast {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let plan = cfg.channels()?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone: Backbone::new(BackboneConfig { plan, residual_depths: cfg.fast_residual_depths, quarter: false }),
            fast: FastPath::new(cfg)?,
        })
    }

    pub fn fast_path(&self) -> &FastPath {
        &self.fast
    }

    pub fn trace<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        left: Var,
        right: Var,
    ) -> Result<crate::fastpath::FastOutputs<T>> {
        let (h, w) = check_pair(&self.cfg, tape, left, right)?;
        let fl = self.backbone.levels(tape, p, left)?;
        let fr = self.backbone.levels(tape, p, right)?;
        self.fast.forward(tape, p, &fl, &fr, h, w)
    }
}

impl<T: Real> StereoModel<T> for AcvNetFast {
    fn name(&self) -> &'static str {
        "acvnet-fast"
    }

    fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn init_params(&self, seed: u64) -> ParamSet<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        self.backbone.init(&mut ps, &mut rng);
        self.fast.init(&mut ps, &mut rng);
        ps
    }

    fn forward(&self, tape: &mut Tape<T>, p: &Bound, left: Var, right: Var, mode: Mode) -> Result<Prediction> {
        let out = self.trace(tape, p, left, right)?;
        Ok(Prediction {
            disparity: out.disparity,
            attention: (mode == Mode::Train).then_some(out.d_att),
            outputs: vec![out.disparity],
        })
    }

    fn loss(&self, tape: &mut Tape<T>, pred: &Prediction, gt: &Tensor<T>, mask: &[bool], scope: LossScope) -> Result<Var> {
        let w = &self.cfg.loss_weights;
        let d_att = pred.attention.ok_or_else(|| AcvError::config("fast loss needs a train-mode prediction"))?;
        match scope {
            LossScope::Full => fast_loss(tape, d_att, pred.disparity, gt, mask, w),
            LossScope::AttentionOnly => {
                let t = smooth_l1(tape, d_att, gt, mask)?;
                Ok(acv_ndops::ops::scale(tape, t.loss, T::from_f64_lossy(w.fast_att))?)
            }
        }
    }

    fn attention_path(&self, name: &str) -> bool {
        FastPath::attention_path(name)
    }

    fn conv3d_macs(&self, h: usize, w: usize) -> u64 {
        self.fast.conv3d_macs(h, w)
    }
}

type Builder<T> = fn(&PipelineConfig) -> Result<Box<dyn StereoModel<T>>>;

/// Model constructors by name.
pub struct ModelRegistry<T: Real> {
    builders: BTreeMap<&'static str, Builder<T>>,
}

impl<T: Real> Default for ModelRegistry<T> {
    fn default() -> Self {
        let mut r = Self { builders: BTreeMap::new() };
        r.register("acvnet", |c| Ok(Box::new(AcvNet::new(c, Filtering::Attention)?)));
        r.register("acvnet-fast", |c| Ok(Box::new(AcvNetFast::new(c)?)));
        r.register("concat-baseline", |c| Ok(Box::new(AcvNet::new(c, Filtering::None)?)));
        r
    }
}

impl<T: Real> ModelRegistry<T> {
    pub fn register(&mut self, name: &'static str, build: Builder<T>) {
        self.builders.insert(name, build);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.builders.keys().copied()
    }

    pub fn build(&self, name: &str, cfg: &PipelineConfig) -> Result<Box<dyn StereoModel<T>>> {
        let build = self.builders.get(name).ok_or_else(|| AcvError::Unknown {
            kind: "model",
            name: name.to_string(),
            known: self.names().collect::<Vec<_>>().join(", "),
        })?;
        build(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_all_models() {
        let reg = ModelRegistry::<f64>::default();
        assert_eq!(reg.names().collect::<Vec<_>>(), vec!["acvnet", "acvnet-fast", "concat-baseline"]);
        for name in reg.names() {
            assert_eq!(reg.build(name, &PipelineConfig::tiny()).unwrap().name(), name);
        }
        assert!(reg.build("gwcnet", &PipelineConfig::tiny()).is_err());
    }

    #[test]
    fn tape_macs_match_analytic_counts() {
        let reg = ModelRegistry::<f32>::default();
        let cfg = PipelineConfig::desk();
        for name in reg.names() {
            let model = reg.build(name, &cfg).unwrap();
            let ps = model.init_params(1);
            let mut tape = Tape::inference();
            let b = ps.bind(&mut tape, |_| false);
            let img = Tensor::from_fn(&[3, 64, 64], |i| ((i[1] * 7 + i[2] * 3) % 5) as f32 / 5.0);
            let (l, r) = (tape.constant(img.clone()), tape.constant(img));
            let pred = model.forward(&mut tape, &b, l, r, Mode::Infer).unwrap();
            assert_eq!(tape.shape(pred.disparity), &[64, 64]);
            assert_eq!(tape.macs().conv3d, model.conv3d_macs(64, 64), "{name}");
        }
    }
}
