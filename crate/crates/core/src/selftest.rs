//! Self-test suites at 64-bit: operator-vs-reference equivalence, reduction
//! identities, tensor-shape conformance at reference widths, fast-path
//! properties, metric fixtures and loss recomposition.

use std::time::Instant;

use acv_ndops::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregate::Mode;
use crate::config::PipelineConfig;
use crate::costvol::{self, PatchSpec};
use crate::error::Result;
use crate::evalio::{self, pfm, rds, DisparityField};
use crate::fastpath;
use crate::models::{AcvNet, AcvNetFast, Filtering, StereoModel};
use crate::oracle;
use crate::trainloss::{self, LossWeights};

/// Largest admissible difference between an operator and its reference.
pub const ORACLE_TOL: f64 = 1e-10;
/// Tolerance of the exact algebraic identities.
pub const IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<28} {:>7.2}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

#[derive(Debug, Clone)]
pub struct SelfTestOptions {
    pub seed: u64,
    /// Random instances per operator in the equivalence suite.
    pub instances: usize,
    /// Fault hook: replaces the patch-volume normalisation divisor in the
    /// operator under test (never in the reference).
    pub patch_norm_divisor: Option<f64>,
}

impl Default for SelfTestOptions {
    fn default() -> Self {
        Self { seed: 0, instances: 50, patch_norm_divisor: None }
    }
}

/// Accumulates named checks into one suite result.
struct Checks {
    name: String,
    start: Instant,
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Checks {
    fn new(name: &str) -> Self {
        Self { name: name.to_string(), start: Instant::now(), failures: Vec::new(), notes: Vec::new() }
    }

    fn expect(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn note(&mut self, s: String) {
        self.notes.push(s);
    }

    fn absorb(&mut self, r: Result<()>) {
        if let Err(e) = r {
            self.failures.push(format!("error: {e}"));
        }
    }

    fn finish(self) -> SuiteResult {
        let passed = self.failures.is_empty();
        let detail = if passed {
            self.notes.join("; ")
        } else {
            let n = self.failures.len();
            let mut shown: Vec<String> = self.failures.into_iter().take(3).collect();
            if n > 3 {
                shown.push(format!("... {} more", n - 3));
            }
            shown.join("; ")
        };
        SuiteResult { name: self.name, passed, detail, seconds: self.start.elapsed().as_secs_f64() }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Evaluates a tape op on constant inputs.
fn eval(
    inputs: &[&Tensor<f64>],
    f: impl FnOnce(&mut Tape<f64>, &[acv_ndops::Var]) -> Result<acv_ndops::Var>,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::inference();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).clone())
}

fn diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

/// One suite per cost-volume operator, each over `instances` random
/// instances with at most 16 channels, 4 disparity levels and 8x8 pixels.
pub fn oracle_equivalence(opts: &SelfTestOptions) -> Vec<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = &mut rng;
    let mut concat = Checks::new("oracle/build_concat");
    let mut patch = Checks::new("oracle/build_patch_volume");
    let mut filter = Checks::new("oracle/filter");
    let mut sparse = Checks::new("oracle/build_sparse_acv");
    let mut worst = [0.0f64; 4];

    for i in 0..opts.instances {
        let (h, w, levels) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=4));

        let c = r.gen_range(1..=8);
        let (fl, fr) = (random(r, &[c, h, w]), random(r, &[c, h, w]));
        let got = eval(&[&fl, &fr], |t, v| costvol::concat_volume(t, v[0], v[1], levels));
        let e = got.map(|g| diff(&g, &oracle::concat_volume(&fl, &fr, levels)));
        record(&mut concat, &mut worst[0], i, e);

        let cpg = [1, 2, 4, 8][r.gen_range(0..4)];
        let max_groups = 16 / cpg;
        let mut split = [0usize; 3];
        while split.iter().sum::<usize>() == 0 || split.iter().sum::<usize>() > max_groups {
            split = [r.gen_range(0..=max_groups), r.gen_range(0..=max_groups), r.gen_range(0..=max_groups)];
        }
        let mut spec = PatchSpec::new(cpg, split, levels);
        let n = spec.groups() * cpg;
        let (pl, pr) = (random(r, &[n, h, w]), random(r, &[n, h, w]));
        let omega = random(r, &[spec.groups(), 3, 3]);
        let want = oracle::patch_volume(&pl, &pr, &omega, &spec);
        spec.norm_divisor = opts.patch_norm_divisor;
        let got = eval(&[&pl, &pr, &omega], |t, v| costvol::patch_volume(t, v[0], v[1], v[2], &spec));
        record(&mut patch, &mut worst[1], i, got.map(|g| diff(&g, &want)));

        let c = r.gen_range(1..=16);
        let (a, vol) = (random(r, &[1, levels, h, w]), random(r, &[c, levels, h, w]));
        let got = eval(&[&a, &vol], |t, v| costvol::filter(t, v[0], v[1]));
        record(&mut filter, &mut worst[2], i, got.map(|g| diff(&g, &oracle::filter(&a, &vol))));

        let c = r.gen_range(1..=8);
        let n_hyp = 2 * r.gen_range(1..=3);
        let (fl, fr) = (random(r, &[c, h, w]), random(r, &[c, h, w]));
        let att = random(r, &[1, levels, h, w]);
        let integral = r.gen_bool(0.3);
        let hyp = Tensor::from_fn(&[n_hyp, h, w], |_| {
            let v = r.gen_range(-1.0..(2 * levels + 3) as f64);
            if integral {
                v.round()
            } else {
                v
            }
        });
        let got = eval(&[&fl, &fr, &att], |t, v| fastpath::build_sparse_acv(t, v[0], v[1], v[2], &hyp));
        let e = got.map(|g| diff(&g, &oracle::sparse_acv(&fl, &fr, &att, &hyp)));
        record(&mut sparse, &mut worst[3], i, e);
    }
    [concat, patch, filter, sparse]
        .into_iter()
        .zip(worst)
        .map(|(mut c, w)| {
            c.note(format!("{} instances, max |diff| {w:.1e}", opts.instances));
            c.finish()
        })
        .collect()
}

fn record(c: &mut Checks, worst: &mut f64, instance: usize, e: Result<f64>) {
    match e {
        Ok(d) => {
            *worst = worst.max(d);
            c.expect(d <= ORACLE_TOL, || format!("instance {instance}: |diff| {d:.3e}"));
        }
        Err(err) => c.expect(false, || format!("instance {instance}: {err}")),
    }
}

/// Delta patch weights reduce the patch volume to the pointwise group
/// correlation; all-ones attention reduces the filtered volume to the
/// concatenation volume.
pub fn reduction_identities(opts: &SelfTestOptions) -> SuiteResult {
    let mut c = Checks::new("reduction_identities");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1d);
    let r = &mut rng;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w, levels) = (r.gen_range(1..=8), r.gen_range(1..=8), r.gen_range(1..=4));
        let spec = PatchSpec::new(2, [r.gen_range(1..=3), r.gen_range(0..=2), r.gen_range(0..=2)], levels);
        let n = spec.groups() * 2;
        let (fl, fr) = (random(r, &[n, h, w]), random(r, &[n, h, w]));
        let delta = Tensor::from_fn(&[spec.groups(), 3, 3], |i| if i[1] == 1 && i[2] == 1 { 1.0 } else { 0.0 });
        match eval(&[&fl, &fr, &delta], |t, v| costvol::patch_volume(t, v[0], v[1], v[2], &spec)) {
            Ok(p) => {
                let d = diff(&p, &oracle::group_correlation(&fl, &fr, &spec));
                worst = worst.max(d);
                c.expect(d <= IDENTITY_TOL, || format!("delta weights: |diff| {d:.3e}"));
            }
            Err(e) => c.absorb(Err(e)),
        }

        let ch = r.gen_range(1..=8);
        let (gl, gr) = (random(r, &[ch, h, w]), random(r, &[ch, h, w]));
        let ones = Tensor::ones(&[1, levels, h, w]);
        let res = eval(&[&gl, &gr, &ones], |t, v| {
            let cv = costvol::concat_volume(t, v[0], v[1], levels)?;
            costvol::filter(t, v[2], cv)
        });
        match res {
            Ok(acv) => {
                let d = diff(&acv, &oracle::concat_volume(&gl, &gr, levels));
                worst = worst.max(d);
                c.expect(d <= IDENTITY_TOL, || format!("unit attention: |diff| {d:.3e}"));
            }
            Err(e) => c.absorb(Err(e)),
        }
    }
    c.note(format!("40 cases, max |diff| {worst:.1e}"));
    c.finish()
}

/// Every intermediate of the reference-width network on a 64x64 pair.
pub fn shape_conformance(opts: &SelfTestOptions) -> SuiteResult {
    let mut c = Checks::new("shape_conformance");
    let res = shape_checks(&mut c, opts.seed);
    c.absorb(res);
    c.finish()
}

fn shape_checks(c: &mut Checks, seed: u64) -> Result<()> {
    let cfg = PipelineConfig::paper_shapes();
    let plan = cfg.channels()?;
    let (h, w, d) = (64usize, 64usize, cfg.max_disp);
    let (nc, nf, ng, ncf) = (plan.compressed, plan.concat, plan.groups(), cfg.fast_feature_channels);
    c.expect(nc == 32 && nf == 320 && ng == 40 && plan.group_split == [8, 16, 16], || {
        format!("widths N_c={nc} N_f={nf} N_g={ng} split {:?}", plan.group_split)
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let left = Tensor::from_fn(&[3, h, w], |_| rng.gen::<f64>());
    let right = Tensor::from_fn(&[3, h, w], |_| rng.gen::<f64>());

    let expect = |c: &mut Checks, what: &str, got: &[usize], want: &[usize]| {
        c.expect(got == want, || format!("{what}: {got:?}, expected {want:?}"));
    };

    let model = AcvNet::new(&cfg, Filtering::Attention)?;
    let params: crate::ParamSet<f64> = model.init_params(seed);
    let mut tape = Tape::inference();
    let p = params.bind(&mut tape, |_| false);
    let (l, r) = (tape.constant(left.clone()), tape.constant(right.clone()));
    let t = model.trace(&mut tape, &p, l, r, Mode::Train)?;
    let q = [d / 4, h / 4, w / 4];
    expect(c, "features", tape.shape(t.left.concat), &[nf, h / 4, w / 4]);
    expect(c, "compressed features", tape.shape(t.left.compressed), &[nc, h / 4, w / 4]);
    expect(c, "concat volume", tape.shape(t.concat), &[2 * nc, q[0], q[1], q[2]]);
    if let (Some(pv), Some(a)) = (t.patch, t.attention) {
        expect(c, "patch volume", tape.shape(pv), &[ng, q[0], q[1], q[2]]);
        expect(c, "attention", tape.shape(a), &[1, q[0], q[1], q[2]]);
    } else {
        c.expect(false, || "attention branch missing".into());
    }
    expect(c, "filtered volume", tape.shape(t.volume), &[2 * nc, q[0], q[1], q[2]]);
    for (i, &o) in t.outputs.iter().enumerate() {
        expect(c, &format!("aggregation output {i}"), tape.shape(o), &[1, q[0], q[1], q[2]]);
    }
    let pred = model.forward(&mut tape, &p, l, r, Mode::Train)?;
    for &o in &pred.outputs {
        expect(c, "disparity", tape.shape(o), &[h, w]);
    }

    let fast = AcvNetFast::new(&cfg)?;
    let fp: crate::ParamSet<f64> = fast.init_params(seed);
    let mut tape = Tape::inference();
    let p = fp.bind(&mut tape, |_| false);
    let (l, r) = (tape.constant(left), tape.constant(right));
    let o = fast.trace(&mut tape, &p, l, r)?;
    expect(c, "fast attention", tape.shape(o.attention), &[1, d / 8, h / 8, w / 8]);
    expect(c, "hypotheses", o.hypotheses.shape(), &[cfg.hypotheses, h / 2, w / 2]);
    expect(c, "sparse volume", tape.shape(o.sparse), &[2 * ncf, cfg.hypotheses, h / 2, w / 2]);
    expect(c, "fast disparity", tape.shape(o.disparity), &[h, w]);
    c.note(format!("N_c={nc} N_f={nf} N_g={ng} N_c^f={ncf}, D={d}, {h}x{w}"));
    Ok(())
}

/// Hypothesis spacing, fast disparity range, oracle-attention accuracy and
/// the 3-D MAC budget of the fast variant.
pub fn fast_path(opts: &SelfTestOptions) -> SuiteResult {
    let mut c = Checks::new("fast_path");
    let res = fast_checks(&mut c, opts.seed);
    c.absorb(res);
    c.finish()
}

/// One-hot logits on the 1/2-resolution attention volume: level `gt/2`, or
/// both neighbours for odd disparities.
fn oracle_attention(gt: &Tensor<f64>, d: usize, magnitude: f64) -> Tensor<f64> {
    let (h2, w2) = (gt.shape()[0] / 2, gt.shape()[1] / 2);
    Tensor::from_fn(&[1, d / 2, h2, w2], |i| {
        let half = gt.at(&[2 * i[2], 2 * i[3]]) / 2.0;
        let k = i[1] as f64;
        if k == half.floor() || k == half.ceil() {
            magnitude
        } else {
            0.0
        }
    })
}

fn fast_checks(c: &mut Checks, seed: u64) -> Result<()> {
    let cfg = PipelineConfig::desk();
    let d = cfg.max_disp;
    let center = Tensor::from_vec(&[1, 2], vec![10.0, 17.25])?;
    let hyp = fastpath::sample_hypotheses(&center, 6, d)?;
    for x in 0..2 {
        let col: Vec<f64> = (0..6).map(|m| hyp.at(&[m, 0, x])).collect();
        let spacing_ok = col.windows(2).all(|p| (p[1] - p[0] - 1.0).abs() < 1e-12);
        let width = col[5] - col[0];
        c.expect(spacing_ok && (width - 5.0).abs() < 1e-12, || format!("hypotheses {col:?}"));
    }

    let fast = AcvNetFast::new(&cfg)?;
    let params: crate::ParamSet<f64> = fast.init_params(seed);
    let sample = rds::gen_rds(64, 64, &DisparityField::Constant { disparity: 9.0 }, d, seed)?;
    let mut tape = Tape::inference();
    let p = params.bind(&mut tape, |_| false);
    let (l, r) = (tape.constant(sample.left.clone()), tape.constant(sample.right.clone()));
    let o = fast.trace(&mut tape, &p, l, r)?;
    let dh = tape.value(o.d_half);
    let plane = dh.numel();
    let mut outside = 0;
    for (i, &v) in dh.data().iter().enumerate() {
        let hs = (0..cfg.hypotheses).map(|m| o.hypotheses.data()[m * plane + i]);
        let (lo, hi) = hs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), h| (a.min(h), b.max(h)));
        if v < lo - 1e-9 || v > hi + 1e-9 {
            outside += 1;
        }
    }
    c.expect(outside == 0, || format!("{outside} pixels with d_f outside their hypotheses"));

    // Oracle attention on integer-disparity scenes.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa57);
    let mut worst = 0.0f64;
    for k in 0..4 {
        let field = if k == 0 {
            DisparityField::Constant { disparity: 13.0 }
        } else {
            DisparityField::random_two_plane(&mut rng, 64, 64, 24)
        };
        let s = rds::gen_rds(64, 64, &field, d, seed + k)?;
        let a = oracle_attention(&s.gt, d, 40.0);
        let (h, w) = (64, 64);
        let d_att = eval(&[&a], |t, v| {
            let half = fastpath::half_attention_disparity(t, v[0], d)?;
            fastpath::upsample_map(t, half, h, w)
        })?;
        for y in 0..h {
            for x in 0..w {
                if interior(&s.gt, y, x, 3) {
                    worst = worst.max((d_att.at(&[y, x]) - s.gt.at(&[y, x])).abs());
                }
            }
        }
    }
    c.expect(worst < 1.0, || format!("oracle attention error {worst:.3} px"));

    // the 1/8-resolution path is upsampling followed by the 1/2-resolution one
    let a_f = random(&mut rng, &[1, d / 8, 8, 8]);
    let direct = eval(&[&a_f], |t, v| fastpath::fast_attention_disparity(t, v[0], d, 64, 64))?;
    let staged = eval(&[&a_f], |t, v| {
        let up = acv_ndops::interpolate(t, v[0], &[d / 2, 32, 32], acv_ndops::InterpMode::Trilinear)?;
        fastpath::half_attention_disparity(t, up, d)
    })?;
    let gap = diff(&direct, &staged);
    c.expect(gap <= IDENTITY_TOL, || format!("attention paths differ by {gap:.3e}"));

    let acv = AcvNet::new(&cfg, Filtering::Attention)?;
    let (m_acv, m_fast) = (StereoModel::<f32>::conv3d_macs(&acv, 64, 64), StereoModel::<f32>::conv3d_macs(&fast, 64, 64));
    let ratio = m_acv as f64 / m_fast as f64;
    c.expect(ratio >= 3.0, || format!("3-D MAC ratio {ratio:.2} < 3"));
    c.note(format!("oracle |d_att - gt| max {worst:.3} px; 3-D MACs {m_acv} vs {m_fast} ({ratio:.2}x)"));
    Ok(())
}

/// Ground truth constant over the `(2r+1)^2` window and the window inside the image.
fn interior(gt: &Tensor<f64>, y: usize, x: usize, r: usize) -> bool {
    let (h, w) = (gt.shape()[0], gt.shape()[1]);
    if y < r || x < r || y + r >= h || x + r >= w {
        return false;
    }
    let v = gt.at(&[y, x]);
    (y - r..=y + r).all(|yy| (x - r..=x + r).all(|xx| gt.at(&[yy, xx]) == v))
}

/// Hand-computed metric fixtures and a bit-exact PFM round trip.
pub fn metrics_and_pfm(opts: &SelfTestOptions) -> SuiteResult {
    let mut c = Checks::new("metrics_and_pfm");
    let res = metric_checks(&mut c, opts.seed);
    c.absorb(res);
    c.finish()
}

/// `(gt, pred, mask, epe, d1, bad1, bad3)`.
type Fixture = (Vec<f64>, Vec<f64>, Vec<bool>, f64, f64, f64, f64);

pub fn metric_fixtures() -> Vec<Fixture> {
    vec![
        // small disparities: the 3 px branch, errors equal to 3 are not outliers
        (vec![10., 20., 30., 40.], vec![10., 23., 33.5, 40.], vec![true; 4], 1.625, 0.25, 0.5, 0.25),
        // large disparities: the 5 % branch
        (vec![100., 100., 200., 80.], vec![104., 106., 209., 83.], vec![true; 4], 5.5, 0.25, 1.0, 0.75),
        // masked pixel ignored
        (vec![5., 0., 7., 9.], vec![5., 100., 8., 20.], vec![true, false, true, true], 4.0, 1. / 3., 1. / 3., 1. / 3.),
        (vec![3., 6., 9., 12.], vec![3., 6., 9., 12.], vec![true; 4], 0.0, 0.0, 0.0, 0.0),
        // thresholds 3, 3.05, 3.05
        (vec![60., 61., 61.], vec![63., 64.02, 64.1], vec![true; 3], 3.04, 1. / 3., 1.0, 2. / 3.),
    ]
}

fn metric_checks(c: &mut Checks, seed: u64) -> Result<()> {
    for (i, (gt, pred, mask, e, d, b1, b3)) in metric_fixtures().into_iter().enumerate() {
        let n = gt.len();
        let gt = Tensor::from_vec(&[1, n], gt)?;
        let pred = Tensor::from_vec(&[1, n], pred)?;
        let got = [
            evalio::epe(&pred, &gt, &mask)?,
            evalio::d1(&pred, &gt, &mask)?,
            evalio::bad_x(&pred, &gt, &mask, 1.0)?,
            evalio::bad_x(&pred, &gt, &mask, 3.0)?,
        ];
        for (name, g, w) in [("epe", got[0], e), ("d1", got[1], d), ("bad1", got[2], b1), ("bad3", got[3], b3)] {
            c.expect((g - w).abs() < 1e-12, || format!("fixture {i} {name}: {g} != {w}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = Tensor::<f32>::from_fn(&[7, 5], |_| rng.gen_range(-300.0..300.0));
    map.set(&[0, 0], f32::MIN_POSITIVE);
    map.set(&[6, 4], f32::INFINITY);
    let bytes = pfm::encode(&map)?;
    let back = pfm::decode(&bytes)?;
    let exact = back.shape() == map.shape() && back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    c.expect(exact, || "PFM round trip changed values".into());
    c.expect(pfm::encode(&back)? == bytes, || "PFM re-encoding differs".into());
    c.note("5 fixtures, PFM round trip bit-exact".into());
    Ok(())
}

/// Total losses equal weighted sums of independently computed smooth-L1
/// terms; the default weights are 0.5 / 0.5, 0.7, 1.0 / 0.5, 1.0.
pub fn loss_recomposition(opts: &SelfTestOptions) -> SuiteResult {
    let mut c = Checks::new("loss_recomposition");
    let res = loss_checks(&mut c, opts.seed);
    c.absorb(res);
    c.finish()
}

fn huber_mean(pred: &Tensor<f64>, gt: &Tensor<f64>, mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask) {
        if m {
            let e = (p - g).abs();
            total += if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn loss_checks(c: &mut Checks, seed: u64) -> Result<()> {
    let w = LossWeights::default();
    c.expect(
        w.att == 0.5 && w.outputs == [0.5, 0.7, 1.0] && w.fast_att == 0.5 && w.fast == 1.0,
        || format!("default weights {w:?}"),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, wd) = (6, 7);
    let gt = Tensor::from_fn(&[h, wd], |_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.5..30.0) });
    let mask = trainloss::valid_mask(&gt);
    let preds: Vec<Tensor<f64>> =
        (0..5).map(|_| Tensor::from_fn(&[h, wd], |i| gt.at(i) + rng.gen_range(-4.0..4.0))).collect();
    let sl1: Vec<f64> = preds.iter().map(|p| huber_mean(p, &gt, &mask)).collect();

    let mut tape = Tape::inference();
    let v: Vec<_> = preds.iter().map(|p| tape.constant(p.clone())).collect();
    for n in 1..=3 {
        let total = trainloss::acvnet_loss(&mut tape, Some(v[0]), &v[1..=n], &gt, &mask, &w)?;
        let lambdas = &w.outputs[3 - n..];
        let want = w.att * sl1[0] + lambdas.iter().zip(&sl1[1..=n]).map(|(l, s)| l * s).sum::<f64>();
        let got = tape.value(total).data()[0];
        c.expect((got - want).abs() <= IDENTITY_TOL, || format!("acvnet loss, {n} outputs: {got} vs {want}"));
    }
    let no_att = trainloss::acvnet_loss(&mut tape, None, &v[1..=3], &gt, &mask, &w)?;
    let want = 0.5 * sl1[1] + 0.7 * sl1[2] + 1.0 * sl1[3];
    let got = tape.value(no_att).data()[0];
    c.expect((got - want).abs() <= IDENTITY_TOL, || format!("loss without attention: {got} vs {want}"));

    let fast = trainloss::fast_loss(&mut tape, v[3], v[4], &gt, &mask, &w)?;
    let want = w.fast_att * sl1[3] + w.fast * sl1[4];
    let got = tape.value(fast).data()[0];
    c.expect((got - want).abs() <= IDENTITY_TOL, || format!("fast loss: {got} vs {want}"));
    c.note("5 combinations within 1e-12".into());
    Ok(())
}

/// Every suite, in a fixed order.
pub fn run_all(opts: &SelfTestOptions) -> Vec<SuiteResult> {
    let mut out = oracle_equivalence(opts);
    out.push(reduction_identities(opts));
    out.push(shape_conformance(opts));
    out.push(fast_path(opts));
    out.push(metrics_and_pfm(opts));
    out.push(loss_recomposition(opts));
    out
}
