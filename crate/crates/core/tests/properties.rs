use acv_core::baseline::block_match;
use acv_core::checkpoint::{Checkpoint, CheckpointMeta};
use acv_core::costvol::{self, PatchSpec};
use acv_core::evalio::{self, pfm, rds, DisparityField, EvalReport};
use acv_core::{fastpath, oracle, regress, trainloss, ParamSet, PipelineConfig};
use acv_ndops::{ops, Tape, Tensor, Var};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    })
}

fn eval(inputs: &[&Tensor<f64>], f: impl FnOnce(&mut Tape<f64>, &[Var]) -> acv_core::Result<Var>) -> Tensor<f64> {
    let mut tape = Tape::inference();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant((*t).clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn concat_volume_matches_reference(c in 1usize..6, levels in 1usize..5, h in 1usize..7, w in 1usize..9, seed: u64) {
        let (l, r) = (tensor(&[c, h, w], seed), tensor(&[c, h, w], seed ^ 1));
        let got = eval(&[&l, &r], |t, v| costvol::concat_volume(t, v[0], v[1], levels));
        prop_assert!(got.max_abs_diff(&oracle::concat_volume(&l, &r, levels)) <= 1e-12);
    }

    #[test]
    fn patch_volume_matches_reference_and_is_linear_in_weights(
        cpg in 1usize..4, g1 in 0usize..3, g2 in 0usize..3, g3 in 1usize..3,
        levels in 1usize..5, h in 1usize..8, w in 1usize..9, scale in -3.0f64..3.0, seed: u64,
    ) {
        let spec = PatchSpec::new(cpg, [g1, g2, g3], levels);
        let n = spec.groups() * cpg;
        let (l, r) = (tensor(&[n, h, w], seed), tensor(&[n, h, w], seed ^ 7));
        let omega = tensor(&[spec.groups(), 3, 3], seed ^ 9);
        let got = eval(&[&l, &r, &omega], |t, v| costvol::patch_volume(t, v[0], v[1], v[2], &spec));
        prop_assert!(got.max_abs_diff(&oracle::patch_volume(&l, &r, &omega, &spec)) <= 1e-10);
        let scaled = omega.scale(scale);
        let got2 = eval(&[&l, &r, &scaled], |t, v| costvol::patch_volume(t, v[0], v[1], v[2], &spec));
        prop_assert!(got2.max_abs_diff(&got.scale(scale)) <= 1e-10);
    }

    #[test]
    fn sparse_volume_matches_reference(c in 1usize..5, n in 1usize..4, levels in 1usize..5, h in 1usize..6, w in 1usize..9, seed: u64) {
        let (l, r) = (tensor(&[c, h, w], seed), tensor(&[c, h, w], seed ^ 3));
        let att = tensor(&[1, levels, h, w], seed ^ 5);
        let hyp = tensor(&[2 * n, h, w], seed ^ 11).map(|v| (v + 1.0) * (levels + 1) as f64);
        let got = eval(&[&l, &r, &att], |t, v| fastpath::build_sparse_acv(t, v[0], v[1], v[2], &hyp));
        prop_assert!(got.max_abs_diff(&oracle::sparse_acv(&l, &r, &att, &hyp)) <= 1e-12);
    }

    #[test]
    fn regressed_disparity_stays_in_range(levels in 1usize..4, seed: u64) {
        let d = 4 * levels;
        let vol = tensor(&[1, levels, 2, 2], seed).scale(20.0);
        let disp = eval(&[&vol], |t, v| regress::volume_to_disparity(t, v[0], d, 8, 8));
        prop_assert!(disp.data().iter().all(|&x| (0.0..=(d - 1) as f64 + 1e-9).contains(&x)));
    }

    #[test]
    fn hypotheses_are_unit_spaced_and_clamped(center in -5.0f64..40.0, h in 1usize..5) {
        let h = 2 * h;
        let max_disp = 32;
        let hyp = fastpath::sample_hypotheses(&Tensor::from_vec(&[1, 1], vec![center]).unwrap(), h, max_disp).unwrap();
        let col = hyp.data();
        prop_assert!(col.iter().all(|&v| (0.0..=31.0).contains(&v)));
        prop_assert!(col.windows(2).all(|p| p[1] >= p[0]));
        let half = (h - 1) as f64 / 2.0;
        if center - half >= 0.0 && center + half <= 31.0 {
            prop_assert!(col.windows(2).all(|p| (p[1] - p[0] - 1.0).abs() < 1e-12));
            prop_assert!((col[h - 1] - col[0] - (h - 1) as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn expectation_over_hypotheses_stays_between_them(seed: u64) {
        let hyp = tensor(&[6, 3, 4], seed).map(|v| (v + 1.0) * 15.0);
        let logits = tensor(&[6, 3, 4], seed ^ 2).scale(10.0);
        let mut tape = Tape::inference();
        let x = tape.constant(logits);
        let p = ops::softmax(&mut tape, x, 0).unwrap();
        let d = ops::expectation(&mut tape, p, 0, hyp.clone()).unwrap();
        let d = tape.value(d);
        for i in 0..12 {
            let col: Vec<f64> = (0..6).map(|m| hyp.data()[m * 12 + i]).collect();
            let (lo, hi) = col.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            prop_assert!(d.data()[i] >= lo - 1e-9 && d.data()[i] <= hi + 1e-9);
        }
    }

    #[test]
    fn pfm_round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, bits in proptest::collection::vec(any::<u32>(), 36)) {
        let map = Tensor::from_fn(&[h, w], |i| f32::from_bits(bits[i[0] * 6 + i[1]]));
        let bytes = pfm::encode(&map).unwrap();
        let back = pfm::decode(&bytes).unwrap();
        prop_assert!(back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(pfm::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical(shapes in proptest::collection::vec(proptest::collection::vec(1usize..4, 1..4), 1..5), seed: u64) {
        let mut params = ParamSet::<f32>::new();
        for (i, s) in shapes.iter().enumerate() {
            params.insert(format!("g{i}.w"), tensor(s, seed + i as u64).cast());
        }
        let ck = Checkpoint { meta: CheckpointMeta { model: "acvnet".into(), config: PipelineConfig::desk() }, params };
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::<f32>::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        let wide = Checkpoint::<f64>::decode(&ck.encode().unwrap()).unwrap();
        prop_assert_eq!(wide.params.cast::<f32>(), ck.params);
    }

    #[test]
    fn metric_fractions_are_ordered(seed: u64, spread in 0.1f64..20.0) {
        let gt = tensor(&[4, 5], seed).map(|v| (v + 1.0) * 60.0);
        let pred = gt.zip_map(&tensor(&[4, 5], seed ^ 1), |g, e| g + e * spread);
        let r = EvalReport::compute(&pred, &gt, &[true; 20]).unwrap();
        for f in [r.d1, r.bad1, r.bad2, r.bad3] {
            prop_assert!((0.0..=1.0).contains(&f));
        }
        prop_assert!(r.bad1 >= r.bad2 && r.bad2 >= r.bad3 && r.bad3 >= r.d1 && r.epe >= 0.0);
        let perfect = EvalReport::compute(&gt, &gt, &[true; 20]).unwrap();
        prop_assert_eq!((perfect.epe, perfect.d1, perfect.bad1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn smooth_l1_is_nonnegative_and_zero_only_at_target(seed: u64, offset in -3.0f64..3.0) {
        let gt = tensor(&[3, 4], seed).map(|v| v.abs() * 10.0 + 0.5);
        let pred = gt.map(|v| v + offset);
        let mut tape = Tape::inference();
        let p = tape.constant(pred);
        let t = trainloss::smooth_l1(&mut tape, p, &gt, &trainloss::valid_mask(&gt)).unwrap();
        let v = tape.value(t.loss).data()[0];
        let e = offset.abs();
        let want = if e < 1.0 { 0.5 * e * e } else { e - 0.5 };
        prop_assert!(v >= 0.0 && (v - want).abs() < 1e-9);
    }

    #[test]
    fn integer_rds_warp_is_exact(d in 0usize..12, seed: u64) {
        let s = rds::gen_rds(8, 24, &DisparityField::Constant { disparity: d as f64 }, 16, seed).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in d..24 {
                    prop_assert_eq!(s.left.at(&[c, y, x]), s.right.at(&[c, y, x - d]));
                }
            }
        }
        prop_assert_eq!(s.mask.iter().filter(|&&m| m).count(), 8 * (24 - d));
    }

    #[test]
    fn block_matching_recovers_constant_disparity(d in 0usize..10, seed: u64) {
        let s = rds::gen_rds(16, 32, &DisparityField::Constant { disparity: d as f64 }, 16, seed).unwrap();
        let pred = block_match(&s.left, &s.right, 5, 16).unwrap();
        for y in 2..14 {
            for x in (d + 2)..30 {
                prop_assert_eq!(pred.at(&[y, x]), d as f64);
            }
        }
    }
}

#[test]
fn perfect_predictions_score_zero() {
    let s = rds::two_plane_set(2, 16, 24, 6, 8, 1).unwrap();
    for sample in &s {
        let r = EvalReport::compute(&sample.gt, &sample.gt, &sample.mask).unwrap();
        assert_eq!((r.epe, r.d1, r.bad3), (0.0, 0.0, 0.0));
    }
    assert!(evalio::epe(&s[0].gt, &s[0].gt, &vec![false; s[0].gt.numel()]).is_err());
}

#[test]
fn block_matching_with_too_small_range_is_far_off() {
    let s = rds::gen_rds(16, 48, &DisparityField::Constant { disparity: 12.0 }, 16, 4).unwrap();
    let pred = block_match(&s.left, &s.right, 5, 4).unwrap();
    let r = EvalReport::compute(&pred, &s.gt, &s.mask).unwrap();
    assert!(r.epe > 5.0, "epe {}", r.epe);
    assert!(block_match(&s.left, &s.right, 17, 4).is_err());
    assert!(block_match(&s.left, &s.right, 4, 4).is_err());
}
