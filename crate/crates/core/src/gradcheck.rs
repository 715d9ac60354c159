//! Finite-difference checks of every differentiable operator and of the
//! tiny end-to-end network, at 64-bit.

use acv_ndops::{
    conv2d, conv3d, deconv3d, grad_check_many, interpolate, ops, random_projection, ConvParams, GradCheckConfig,
    GradCheckReport, InterpMode, Tape, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::{Aggregator, Hourglass, HourglassShape, Mode};
use crate::config::PipelineConfig;
use crate::costvol::{self, PatchSpec};
use crate::error::Result;
use crate::fastpath;
use crate::models::{AcvNet, Filtering, StereoModel};
use crate::params::{Bound, ParamSet};

use crate::regress;
use crate::trainloss::{self, LossScope};

/// Report for one operator.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

pub const TOLERANCE: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so that ReLU kinks are never crossed.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen() {
            v
        } else {
            -v
        }
    })
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> acv_ndops::Result<Var>>;

fn check(name: &'static str, f: OpFn, xs: &[Tensor<f64>], cfg: GradCheckConfig) -> Result<OpCheck> {
    let report = grad_check_many(
        |t, v| {
            let y = f(t, v)?;
            random_projection(t, y, 17)
        },
        xs,
        cfg,
    )?;
    Ok(OpCheck { name, report })
}

/// Wraps a core operator so it can be checked through the ndops interface.
fn lift<F>(f: F) -> OpFn
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    Box::new(move |t, v| f(t, v).map_err(|e| acv_ndops::NdError::Usage(e.to_string())))
}

fn bound_from(vars: &[Var], names: &[String]) -> Bound {
    Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()))
}

/// Every operator once on a small random instance, then the end-to-end tiny network.
pub fn run_all(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig { tol: TOLERANCE, ..Default::default() };
    let mut out = Vec::new();
    let r = &mut rng;

    let a = random(r, &[2, 3, 4]);
    let b = random(r, &[2, 3, 4]);
    out.push(check("add", Box::new(|t, v| ops::add(t, v[0], v[1])), &[a.clone(), b.clone()], cfg)?);
    out.push(check("mul", Box::new(|t, v| ops::mul(t, v[0], v[1])), &[a.clone(), b.clone()], cfg)?);
    out.push(check("scale", Box::new(|t, v| ops::scale(t, v[0], 0.3)), &[a.clone()], cfg)?);
    out.push(check("sum", Box::new(|t, v| ops::sum(t, v[0])), &[a.clone()], cfg)?);
    out.push(check(
        "linear_combination",
        Box::new(|t, v| ops::linear_combination(t, &[(0.5, v[0]), (-1.5, v[1])])),
        &[a.clone(), b.clone()],
        cfg,
    )?);
    out.push(check("relu", Box::new(|t, v| ops::relu(t, v[0])), &[off_kink(r, &[2, 3, 4])], cfg)?);
    out.push(check(
        "channel_affine",
        Box::new(|t, v| ops::channel_affine(t, v[0], v[1], v[2])),
        &[a.clone(), random(r, &[2]), random(r, &[2])],
        cfg,
    )?);
    out.push(check("channel_norm", Box::new(|t, v| ops::channel_norm(t, v[0], 1e-5)), &[a.clone()], cfg)?);
    out.push(check(
        "broadcast_mul",
        Box::new(|t, v| ops::broadcast_mul(t, v[0], v[1])),
        &[random(r, &[1, 3, 4]), a.clone()],
        cfg,
    )?);
    out.push(check("concat", Box::new(|t, v| ops::concat(t, &[v[0], v[1]])), &[a.clone(), b.clone()], cfg)?);
    out.push(check("slice_channels", Box::new(|t, v| ops::slice_channels(t, v[0], 1..2)), &[a.clone()], cfg)?);
    out.push(check("reshape", Box::new(|t, v| ops::reshape(t, v[0], &[6, 4])), &[a.clone()], cfg)?);
    out.push(check("softmax", Box::new(|t, v| ops::softmax(t, v[0], 1)), &[a.clone()], cfg)?);
    let values = Tensor::from_fn(&[3], |i| i[0] as f64 * 2.0 + 0.5);
    out.push(check("expectation", Box::new(move |t, v| ops::expectation(t, v[0], 1, values.clone())), &[a.clone()], cfg)?);
    out.push(check(
        "bilinear",
        Box::new(|t, v| interpolate(t, v[0], &[5, 8], InterpMode::Bilinear)),
        &[a.clone()],
        cfg,
    )?);
    out.push(check(
        "trilinear",
        Box::new(|t, v| interpolate(t, v[0], &[4, 4, 6], InterpMode::Trilinear)),
        &[random(r, &[1, 2, 2, 3])],
        cfg,
    )?);
    out.push(check(
        "conv2d",
        Box::new(|t, v| conv2d(t, v[0], &ConvParams::uniform(v[1], Some(v[2]), 2, 2, 1))),
        &[random(r, &[2, 5, 6]), random(r, &[3, 2, 3, 3]), random(r, &[3])],
        cfg,
    )?);
    out.push(check(
        "conv3d",
        Box::new(|t, v| conv3d(t, v[0], &ConvParams::uniform(v[1], Some(v[2]), 3, 1, 1))),
        &[random(r, &[2, 3, 4, 4]), random(r, &[2, 2, 3, 3, 3]), random(r, &[2])],
        cfg,
    )?);
    out.push(check(
        "deconv3d",
        Box::new(|t, v| deconv3d(t, v[0], &ConvParams::uniform(v[1], Some(v[2]), 3, 2, 1))),
        &[random(r, &[2, 2, 2, 3]), random(r, &[2, 2, 4, 4, 4]), random(r, &[2])],
        cfg,
    )?);

    // cost volumes
    let fl = random(r, &[4, 4, 5]);
    let fr = random(r, &[4, 4, 5]);
    out.push(check(
        "build_concat",
        lift(|t, v| costvol::build_concat(t, v[0], v[1], 12)),
        &[fl.clone(), fr.clone()],
        cfg,
    )?);
    let spec = PatchSpec::new(2, [1, 0, 1], 3);
    out.push(check(
        "build_patch_volume",
        lift(move |t, v| costvol::patch_volume(t, v[0], v[1], v[2], &spec)),
        &[fl.clone(), fr.clone(), random(r, &[2, 3, 3])],
        cfg,
    )?);
    out.push(check(
        "filter",
        lift(|t, v| costvol::filter(t, v[0], v[1])),
        &[random(r, &[1, 3, 4, 5]), random(r, &[2, 3, 4, 5])],
        cfg,
    )?);
    let hyp = Tensor::from_fn(&[4, 4, 5], |i| (i[0] as f64 * 1.3 + i[2] as f64 * 0.7 + 0.15) % 7.0);
    out.push(check(
        "build_sparse_acv",
        lift(move |t, v| fastpath::build_sparse_acv(t, v[0], v[1], v[2], &hyp)),
        &[fl.clone(), fr.clone(), random(r, &[1, 4, 4, 5])],
        cfg,
    )?);

    // aggregation
    let shape = HourglassShape { halve_disparity: true };
    let hg = Hourglass::new("hg", 1, shape);
    let mut hp = ParamSet::<f64>::new();
    hg.init(&mut hp, r);
    let names: Vec<String> = hp.names().map(str::to_string).collect();
    let mut xs = vec![random(r, &[1, 8, 8, 8])];
    xs.extend(hp.iter().map(|(_, t)| t.clone()));
    let hg_names = names.clone();
    out.push(check(
        "hourglass",
        lift(move |t, v| {
            let b = bound_from(&v[1..], &hg_names);
            hg.forward(t, &b, v[0])
        }),
        &xs,
        GradCheckConfig { max_coords: Some(40), ..cfg },
    )?);
    let agg = Aggregator::new("agg", 2, 1, 1, HourglassShape { halve_disparity: false })?;
    let mut ap = ParamSet::<f64>::new();
    agg.init(&mut ap, r);
    let agg_names: Vec<String> = ap.names().map(str::to_string).collect();
    let mut xs = vec![random(r, &[2, 2, 4, 4])];
    xs.extend(ap.iter().map(|(_, t)| t.clone()));
    out.push(check(
        "aggregate",
        lift(move |t, v| {
            let b = bound_from(&v[1..], &agg_names);
            let outs = agg.forward(t, &b, v[0], Mode::Train)?;
            Ok(ops::concat(t, &outs)?)
        }),
        &xs,
        GradCheckConfig { max_coords: Some(40), ..cfg },
    )?);

    // regression and losses
    out.push(check(
        "volume_to_disparity",
        lift(|t, v| regress::volume_to_disparity(t, v[0], 8, 8, 8)),
        &[random(r, &[1, 2, 2, 2])],
        cfg,
    )?);
    out.push(check(
        "soft_argmin",
        lift(|t, v| {
            let p = ops::softmax(t, v[0], 0)?;
            regress::soft_argmin(t, p)
        }),
        &[random(r, &[4, 2, 3])],
        cfg,
    )?);
    out.push(check(
        "fast_attention_disparity",
        lift(|t, v| fastpath::fast_attention_disparity(t, v[0], 16, 16, 16)),
        &[random(r, &[1, 2, 2, 2])],
        cfg,
    )?);
    let gt = Tensor::from_fn(&[3, 4], |i| (i[0] * 4 + i[1]) as f64 * 0.4);
    out.push(check(
        "smooth_l1",
        lift(move |t, v| {
            let mask = trainloss::valid_mask(&gt);
            let p = ops::scale(t, v[0], 3.0)?;
            Ok(trainloss::smooth_l1(t, p, &gt, &mask)?.loss)
        }),
        // errors kept away from the +-1 branch point
        &[Tensor::from_fn(&[3, 4], |i| ((i[0] * 4 + i[1]) as f64 * 0.4 + [0.3, -0.2, 2.1, -1.9][i[1]]) / 3.0)],
        cfg,
    )?);

    out.push(end_to_end(seed)?);
    Ok(out)
}

/// Training loss of the tiny network (eighth width, D = 8, 16x16 input)
/// w.r.t. both images and a spread of parameter coordinates.
pub fn end_to_end(seed: u64) -> Result<OpCheck> {
    let cfg = PipelineConfig::tiny();
    let model = AcvNet::new(&cfg, Filtering::Attention)?;
    let params: ParamSet<f64> = model.init_params(seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut xs = vec![
        Tensor::from_fn(&[3, 16, 16], |_| rng.gen::<f64>()),
        Tensor::from_fn(&[3, 16, 16], |_| rng.gen::<f64>()),
    ];
    xs.extend(params.iter().map(|(_, t)| t.clone()));
    let gt = Tensor::from_fn(&[16, 16], |i| 1.0 + ((i[0] + 2 * i[1]) % 6) as f64);
    let mask = trainloss::valid_mask(&gt);
    let f = lift(move |t, v| {
        let b = bound_from(&v[2..], &names);
        let pred = model.forward(t, &b, v[0], v[1], Mode::Train)?;
        StereoModel::<f64>::loss(&model, t, &pred, &gt, &mask, LossScope::Full)
    });
    // normalisation over tiny extents makes the network sharply curved, so
    // the step is much smaller than for single ops
    let cfg = GradCheckConfig { eps: 1e-7, tol: TOLERANCE, max_coords: Some(6), ..Default::default() };
    let report = grad_check_many(|t, v| f(t, v), &xs, cfg)?;
    Ok(OpCheck { name: "acvnet_tiny_end_to_end", report })
}
