//! Smooth-L1 losses, Adam and the staged training loop.

use std::collections::BTreeMap;

use acv_ndops::{ops, Backward, NdError, Real, Tape, Tensor, Var};
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AcvError, Result};
use crate::evalio::{metrics, StereoSample};
use crate::models::{Prediction, StereoModel};
use crate::params::ParamSet;

/// Weights of the supervised outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub att: f64,
    /// `lambda_0, lambda_1, lambda_2`, earliest aggregation output first.
    pub outputs: [f64; 3],
    pub fast_att: f64,
    pub fast: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { att: 0.5, outputs: [0.5, 0.7, 1.0], fast_att: 0.5, fast: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.att, self.fast_att, self.fast].into_iter().chain(self.outputs);
        for w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(AcvError::config(format!("loss weight {w} must be finite and nonnegative")));
            }
        }
        Ok(())
    }

    /// Weights for `n` aggregation outputs; with fewer than three outputs the
    /// latest weights are used (the final output always gets `lambda_2`).
    pub fn for_outputs(&self, n: usize) -> Result<&[f64]> {
        if n == 0 || n > 3 {
            return Err(AcvError::config(format!("{n} aggregation outputs, expected 1..=3")));
        }
        Ok(&self.outputs[3 - n..])
    }
}

/// Pixels with finite, positive ground truth.
pub fn valid_mask<T: Real>(gt: &Tensor<T>) -> Vec<bool> {
    gt.data().iter().map(|&v| v.is_finite() && v > T::zero()).collect()
}

fn huber(e: f64) -> f64 {
    if e.abs() < 1.0 {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

struct SmoothL1Rule<T> {
    gt: Tensor<T>,
    mask: Vec<bool>,
    count: usize,
}

impl<T: Real> Backward<T> for SmoothL1Rule<T> {
    fn name(&self) -> &'static str {
        "smooth_l1"
    }

    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut d = Tensor::zeros(x[0].shape());
        if self.count > 0 {
            let s = g.data()[0] / T::from_f64_lossy(self.count as f64);
            let (p, gt) = (x[0].data(), self.gt.data());
            for (i, o) in d.data_mut().iter_mut().enumerate() {
                if self.mask[i] {
                    let e = p[i] - gt[i];
                    *o = s * e.max(-T::one()).min(T::one());
                }
            }
        }
        vec![Some(d)]
    }
}

/// Smooth-L1 term: the loss scalar and the number of pixels it averages.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm {
    pub loss: Var,
    pub valid: usize,
}

impl LossTerm {
    /// Set when the mask selected no pixel; the loss is then defined as 0.
    pub fn empty(&self) -> bool {
        self.valid == 0
    }
}

/// Mean over masked pixels of `0.5 e^2` (`|e| < 1`) or `|e| - 0.5`, `e = pred - gt`.
pub fn smooth_l1<T: Real>(tape: &mut Tape<T>, pred: Var, gt: &Tensor<T>, mask: &[bool]) -> Result<LossTerm> {
    let p = tape.value(pred);
    if p.shape() != gt.shape() || mask.len() != gt.numel() {
        return Err(NdError::dim(
            "smooth_l1",
            format!("pred {:?}, gt {:?}, mask {}", p.shape(), gt.shape(), mask.len()),
        )
        .into());
    }
    let mut total = 0.0;
    let mut count = 0;
    for ((&pv, &gv), &m) in p.data().iter().zip(gt.data()).zip(mask) {
        if m {
            total += huber((pv - gv).to_f64_lossy());
            count += 1;
        }
    }
    if count == 0 {
        warn!("smooth_l1: empty mask, loss defined as 0");
    }
    let value = if count == 0 { 0.0 } else { total / count as f64 };
    let out = Tensor::scalar(T::from_f64_lossy(value));
    let rule = SmoothL1Rule { gt: gt.clone(), mask: mask.to_vec(), count };
    let loss = tape.record("smooth_l1", &[pred], out, Box::new(rule))?;
    Ok(LossTerm { loss, valid: count })
}

fn weighted<T: Real>(tape: &mut Tape<T>, terms: &[(f64, Var)], gt: &Tensor<T>, mask: &[bool]) -> Result<Var> {
    let mut parts = Vec::with_capacity(terms.len());
    for &(w, pred) in terms {
        let t = smooth_l1(tape, pred, gt, mask)?;
        parts.push((T::from_f64_lossy(w), t.loss));
    }
    Ok(ops::linear_combination(tape, &parts)?)
}

/// `lambda_att * SL1(d_att) + sum_i lambda_i * SL1(d_i)`. `outputs` holds the
/// aggregation disparities earliest first; `d_att` is absent for models
/// without attention.
pub fn acvnet_loss<T: Real>(
    tape: &mut Tape<T>,
    d_att: Option<Var>,
    outputs: &[Var],
    gt: &Tensor<T>,
    mask: &[bool],
    w: &LossWeights,
) -> Result<Var> {
    let lambdas = w.for_outputs(outputs.len())?;
    let mut terms: Vec<(f64, Var)> = d_att.map(|d| (w.att, d)).into_iter().collect();
    terms.extend(lambdas.iter().copied().zip(outputs.iter().copied()));
    weighted(tape, &terms, gt, mask)
}

/// `lambda_att^f * SL1(d_att^f) + lambda^f * SL1(d^f)`.
pub fn fast_loss<T: Real>(
    tape: &mut Tape<T>,
    d_att_f: Var,
    d_f: Var,
    gt: &Tensor<T>,
    mask: &[bool],
    w: &LossWeights,
) -> Result<Var> {
    weighted(tape, &[(w.fast_att, d_att_f), (w.fast, d_f)], gt, mask)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (lr_t, eps) = (T::from_f64_lossy(lr * c2.sqrt() / c1), T::from_f64_lossy(self.eps * c2.sqrt()));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let it = p.data_mut().iter_mut().zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut());
            for (((pv, mv), vv), &gv) in it.zip(g.data()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= lr_t * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Which parameters a stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scope {
    All,
    /// Feature extractor, patch weights and attention network.
    AttentionPath,
    /// Everything outside the attention path.
    Remaining,
}

/// Terms the stage optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossScope {
    Full,
    AttentionOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub scope: Scope,
    pub loss: LossScope,
    pub steps: usize,
    pub lr: f64,
    /// Steps (counted within the stage) after which the learning rate halves.
    #[serde(default)]
    pub halve_at: Vec<usize>,
}

impl Stage {
    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * 0.5f64.powi(self.halve_at.iter().filter(|&&s| step >= s).count() as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub stages: Vec<Stage>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self::single(5000, 1e-3)
    }
}

impl TrainPlan {
    /// One stage over every parameter at a fixed learning rate.
    pub fn single(steps: usize, lr: f64) -> Self {
        Self {
            stages: vec![Stage { scope: Scope::All, loss: LossScope::Full, steps, lr, halve_at: vec![] }],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Attention path alone, then the remaining network, then everything;
    /// 64 epochs each with the learning rate halved after epochs 20, 32, 40, 48, 56.
    pub fn staged(steps_per_epoch: usize) -> Self {
        let halve_at: Vec<usize> = [20, 32, 40, 48, 56].iter().map(|e| e * steps_per_epoch).collect();
        let stage = |scope, loss| Stage { scope, loss, steps: 64 * steps_per_epoch, lr: 1e-3, halve_at: halve_at.clone() };
        Self {
            stages: vec![
                stage(Scope::AttentionPath, LossScope::AttentionOnly),
                stage(Scope::Remaining, LossScope::Full),
                stage(Scope::All, LossScope::Full),
            ],
            ..Self::single(0, 1e-3)
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stages.iter().map(|s| s.steps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(AcvError::config("training plan has no stages"));
        }
        for s in &self.stages {
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return Err(AcvError::config(format!("learning rate {} must be finite and nonnegative", s.lr)));
            }
        }
        let betas_ok = [self.beta1, self.beta2].iter().all(|b| (0.0..1.0).contains(b));
        if !betas_ok || !(self.eps > 0.0) {
            return Err(AcvError::config("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        Ok(())
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub epe: f64,
}

impl StepRecord {
    /// `step loss epe`.
    pub fn log_line(&self) -> String {
        format!("{} {:.6} {:.6}", self.step, self.loss, self.epe)
    }
}

/// Sample converted to the training precision.
struct Prepared<T: Real> {
    left: Tensor<T>,
    right: Tensor<T>,
    gt: Tensor<T>,
    mask: Vec<bool>,
}

/// Runs every stage of `plan` in order, updating only each stage's parameter
/// subset. Samples are visited in a seeded shuffled order, one pair per step.
/// `on_step` sees every record as it is produced.
pub fn run_training<T: Real>(
    model: &dyn StereoModel<T>,
    params: &mut ParamSet<T>,
    data: &[StereoSample],
    plan: &TrainPlan,
    seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    plan.validate()?;
    if data.is_empty() && plan.total_steps() > 0 {
        return Err(AcvError::config("training needs at least one sample"));
    }
    let prepared: Vec<Prepared<T>> = data
        .iter()
        .map(|s| Prepared { left: s.left.cast(), right: s.right.cast(), gt: s.gt.cast(), mask: s.mask.clone() })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(plan.beta1, plan.beta2, plan.eps);
    let mut log = Vec::with_capacity(plan.total_steps());
    let mut step = 0;
    for (si, stage) in plan.stages.iter().enumerate() {
        let trainable = |name: &str| match stage.scope {
            Scope::All => true,
            Scope::AttentionPath => model.attention_path(name),
            Scope::Remaining => !model.attention_path(name),
        };
        if !params.names().any(trainable) {
            return Err(AcvError::config(format!("stage {si} selects no parameters of {}", model.name())));
        }
        info!("stage {si}: {:?} for {} steps", stage.scope, stage.steps);
        for local in 0..stage.steps {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let sample = &prepared[order.pop().expect("refilled above")];
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, trainable);
            let left = tape.constant(sample.left.clone());
            let right = tape.constant(sample.right.clone());
            let pred = model.forward(&mut tape, &bound, left, right, crate::aggregate::Mode::Train)?;
            let loss = model.loss(&mut tape, &pred, &sample.gt, &sample.mask, stage.loss)?;
            let loss_value = tape.value(loss).data()[0].to_f64_lossy();
            let epe = training_epe(&tape, &pred, &sample.gt, &sample.mask);
            if !loss_value.is_finite() {
                return Err(AcvError::NonFiniteLoss { step, detail: format!("loss {loss_value}, epe {epe}") });
            }
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(AcvError::NonFiniteLoss { step, detail: format!("non-finite gradient for {name}") });
            }
            adam.step(params, &grads, stage.lr_at(local))?;
            let rec = StepRecord { step, loss: loss_value, epe };
            debug!("{}", rec.log_line());
            on_step(&rec);
            log.push(rec);
            step += 1;
        }
    }
    Ok(log)
}

fn training_epe<T: Real>(tape: &Tape<T>, pred: &Prediction, gt: &Tensor<T>, mask: &[bool]) -> f64 {
    let d: Tensor<f64> = tape.value(pred.disparity).cast();
    metrics::epe(&d, &gt.cast(), mask).unwrap_or(f64::NAN)
}
