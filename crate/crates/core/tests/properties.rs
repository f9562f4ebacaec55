//! Invariants checked on randomly generated inputs.

mod common;

use proptest::prelude::*;
use tumorreg::dataio::{
    generate_phantom, read_deformation, read_volume, write_deformation, write_volume, PhantomSpec,
    RegistrationPair,
};
use tumorreg::deformation::{compose, exp_svf, invert_svf, jacobian_det, random_smooth_velocity};
use tumorreg::engine::{
    checkpoint_bytes, forward_register, parse_checkpoint, Adam, AdamConfig, NetworkParams,
};
use tumorreg::losses::{
    masked_similarity, smoothness, total_loss, tumor_obliteration, tumor_preservation, PairVars,
};
use tumorreg::metrics::{delta_t, dsc, hd95, m_lexs, vba_filter, MetricsReport};
use tumorreg::tensor::grid_sample_value;
use tumorreg::{DeformationField, EngineConfig, LossWeights, SmoothnessMode, Tape, Tensor, Volume};

fn extents() -> impl Strategy<Value = [usize; 3]> {
    [2usize..6, 2usize..6, 2usize..6]
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-2.0f32..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn field(e: [usize; 3]) -> impl Strategy<Value = Tensor> {
    tensor(vec![3, e[0], e[1], e[2]])
}

fn mask(e: [usize; 3]) -> impl Strategy<Value = Volume> {
    prop::collection::vec(prop::bool::weighted(0.4), e.iter().product::<usize>()).prop_map(
        move |b| Volume::new(e, [1.0; 3], b.into_iter().map(|x| x as u8 as f32).collect()).unwrap(),
    )
}

fn interior(e: [usize; 3], margin: usize) -> impl Iterator<Item = usize> {
    (0..e[0] * e[1] * e[2]).filter(move |&p| {
        let c = [p / (e[1] * e[2]), (p / e[2]) % e[1], p % e[2]];
        (0..3).all(|a| c[a] >= margin && c[a] + margin < e[a])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identity_kernel_convolution_is_identity(x in extents().prop_flat_map(|e| tensor(vec![2, e[0], e[1], e[2]]))) {
        let mut w = Tensor::zeros([2, 2, 1, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv3d(tape.constant(w), 1, 0).unwrap();
        prop_assert_eq!(&*y.value(), &x);
    }

    #[test]
    fn zero_displacement_sampling_is_identity(x in extents().prop_flat_map(|e| tensor(vec![2, e[0], e[1], e[2]]))) {
        let s = x.spatial().unwrap();
        let y = grid_sample_value(&x, &Tensor::zeros([3, s[0], s[1], s[2]])).unwrap();
        prop_assert_eq!(y, x);
    }

    #[test]
    fn integer_displacement_is_a_voxel_shift(
        (x, shift) in extents().prop_flat_map(|e| (tensor(vec![1, e[0], e[1], e[2]]), [-2i32..3, -2i32..3, -2i32..3]))
    ) {
        let s = x.spatial().unwrap();
        let disp = DeformationField::constant(s, shift.map(|v| v as f32));
        let y = grid_sample_value(&x, disp.tensor()).unwrap();
        for p in 0..x.len() {
            let c = [p / (s[1] * s[2]), (p / s[2]) % s[1], p % s[2]];
            let q: Vec<i32> = (0..3).map(|a| c[a] as i32 + shift[a]).collect();
            if (0..3).all(|a| q[a] >= 0 && (q[a] as usize) < s[a]) {
                let qi = (q[0] as usize * s[1] + q[1] as usize) * s[2] + q[2] as usize;
                prop_assert_eq!(y.data()[p], x.data()[qi]);
            }
        }
    }

    #[test]
    fn forward_values_are_deterministic(
        (x, d) in extents().prop_flat_map(|e| (tensor(vec![2, e[0], e[1], e[2]]), field(e)))
    ) {
        let run = || {
            let tape = Tape::new();
            let w = Tensor::full([3, 2, 3, 3, 3], 0.1);
            let v = tape.constant(x.clone()).conv3d(tape.constant(w), 1, 1).unwrap();
            let v = v.grid_sample(tape.constant(d.clone())).unwrap().tanh();
            (*v.value()).clone()
        };
        let (a, b) = (run(), run());
        prop_assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn backward_fills_every_parameter(
        (x, d) in extents().prop_flat_map(|e| (tensor(vec![1, e[0], e[1], e[2]]), field(e)))
    ) {
        let tape = Tape::new();
        let (xv, dv) = (tape.param(x.clone()), tape.param(d.clone()));
        let loss = xv.grid_sample(dv).unwrap().square().sum();
        let g = tape.backward(loss).unwrap();
        prop_assert_eq!(g.get(xv).map(|t| t.shape().to_vec()), Some(x.shape().to_vec()));
        prop_assert_eq!(g.get(dv).map(|t| t.shape().to_vec()), Some(d.shape().to_vec()));
    }

    #[test]
    fn exp_of_zero_is_identity(e in extents(), n in 1usize..9) {
        let v = tumorreg::VelocityField::zeros(e);
        prop_assert_eq!(exp_svf(&v, n).unwrap(), DeformationField::identity(e));
    }

    #[test]
    fn jacobian_of_translation_is_one(e in [3usize..7, 3usize..7, 3usize..7], u in [-3.0f32..3.0, -3.0f32..3.0, -3.0f32..3.0]) {
        let phi = DeformationField::constant(e, u);
        let jac = jacobian_det(&phi, [1.0; 3]);
        for p in interior(e, 1) {
            prop_assert!((jac.data()[p] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn metric_invariants(
        (a, b) in [4usize..8, 4usize..8, 4usize..8].prop_flat_map(|e| (mask(e), mask(e)))
    ) {
        if a.count() + b.count() > 0 {
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            let d = dsc(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
        if a.count() > 0 && b.count() > 0 {
            let (h1, h2) = (hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
            prop_assert_eq!(h1, h2);
            prop_assert!(h1 >= 0.0);
        }
        if a.count() > 0 {
            let jac = jacobian_det(&DeformationField::identity(a.extents()), [1.0; 3]);
            prop_assert_eq!(m_lexs(&jac, &a).unwrap(), 0.0);
            prop_assert!(delta_t(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn translation_of_both_masks_keeps_overlap_metrics(
        (a, b, shift) in (mask([5, 5, 5]), mask([5, 5, 5]), [0usize..4, 0usize..4, 0usize..4])
    ) {
        // Embed both masks in a larger grid at two offsets, away from the border.
        let place = |m: &Volume, o: [usize; 3]| {
            Volume::from_fn([12, 12, 12], [1.0; 3], |i, j, k| {
                let c = [i as i64 - o[0] as i64 - 2, j as i64 - o[1] as i64 - 2, k as i64 - o[2] as i64 - 2];
                if c.iter().all(|&x| (0..5).contains(&x)) {
                    m.get(c[0] as usize, c[1] as usize, c[2] as usize)
                } else {
                    0.0
                }
            })
        };
        prop_assume!(a.count() > 0 && b.count() > 0);
        let (a0, b0) = (place(&a, [0; 3]), place(&b, [0; 3]));
        let (a1, b1) = (place(&a, shift), place(&b, shift));
        prop_assert_eq!(dsc(&a0, &b0).unwrap(), dsc(&a1, &b1).unwrap());
        prop_assert!((hd95(&a0, &b0).unwrap() - hd95(&a1, &b1).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn delta_t_ignores_values_below_the_mask_threshold(
        (a, b, noise) in (mask([5, 5, 5]), mask([5, 5, 5]), prop::collection::vec(0.0f32..0.49, 125))
    ) {
        prop_assume!(a.count() > 0);
        let relabel = |m: &Volume| {
            let data = m.data().iter().zip(&noise).map(|(&v, &n)| if v >= 0.5 { v } else { n }).collect();
            Volume::new(m.extents(), m.spacing(), data).unwrap()
        };
        prop_assert_eq!(delta_t(&a, &b).unwrap(), delta_t(&relabel(&a), &relabel(&b)).unwrap());
    }

    #[test]
    fn vba_filter_is_monotone(l in 0.0f64..1.0, r in 0.0f64..1.0, dl in 0.0f64..0.5, dr in 0.0f64..0.5) {
        let report = |l: f64, r: f64| {
            let mut m = MetricsReport::default();
            m.dsc.insert("lung_left".into(), l);
            m.dsc.insert("lung_right".into(), r);
            m
        };
        let before = vba_filter(&report(l, r), 0.8).unwrap().excluded;
        let after = vba_filter(&report(l - dl, r - dr), 0.8).unwrap().excluded;
        prop_assert!(!before || after);
    }

    #[test]
    fn volume_and_field_files_round_trip_bit_identical(
        (v, d) in extents().prop_flat_map(|e| (tensor(vec![1, e[0], e[1], e[2]]), field(e))),
        spacing in [0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0]
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let vol = Volume::from_tensor(&v, spacing).unwrap();
        write_volume(tmp.path().join("v.json"), &vol, "normalized", None).unwrap();
        let back = read_volume(tmp.path().join("v.json")).unwrap();
        prop_assert!(back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.spacing(), spacing);
        let phi = DeformationField::new(d).unwrap();
        write_deformation(tmp.path().join("d.json"), &phi, spacing).unwrap();
        let (phi2, s2) = read_deformation(tmp.path().join("d.json")).unwrap();
        prop_assert_eq!(phi2, phi);
        prop_assert_eq!(s2, spacing);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn smooth_velocities_integrate_to_invertible_maps(seed in any::<u64>(), max in 0.2f32..2.0) {
        let v = random_smooth_velocity([16, 16, 16], 2.0, max, seed);
        let phi = exp_svf(&v, 7).unwrap();
        let jac = jacobian_det(&phi, [1.0; 3]);
        let residual = compose(&phi, &invert_svf(&v, 7).unwrap()).unwrap();
        for p in interior([16, 16, 16], 3) {
            prop_assert!(jac.data()[p] > 0.0);
            let r = residual.at(p);
            prop_assert!((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() <= 0.1);
        }
    }

    #[test]
    fn composition_is_nearly_associative(seed in any::<u64>()) {
        let f = |s: u64| exp_svf(&random_smooth_velocity([16, 16, 16], 2.0, 1.0, s), 7).unwrap();
        let (a, b, c) = (f(seed), f(seed.wrapping_add(1)), f(seed.wrapping_add(2)));
        let left = compose(&compose(&a, &b).unwrap(), &c).unwrap();
        let right = compose(&a, &compose(&b, &c).unwrap()).unwrap();
        for p in interior([16, 16, 16], 4) {
            let (l, r) = (left.at(p), right.at(p));
            prop_assert!((0..3).all(|k| (l[k] - r[k]).abs() <= 0.05));
        }
    }

    #[test]
    fn losses_are_nonnegative_and_vanish_on_self_registration(
        (img, m, v) in (tensor(vec![1, 6, 6, 6]), mask([6, 6, 6]), field([6, 6, 6]))
    ) {
        let img = img.map(|x| x.abs() / 2.0);
        let tape = Tape::new();
        let pair = PairVars {
            moving: tape.constant(img.clone()),
            moving_mask: tape.constant(m.to_tensor()),
            fixed: tape.constant(img.clone()),
            fixed_mask: tape.constant(m.to_tensor()),
        };
        let w = LossWeights { lambda_smooth: 1.0, lambda_pre: 1.0, lambda_ob: 1.0 };
        let zero = tape.constant(Tensor::zeros([3, 6, 6, 6]));
        let steps = common::record_steps(&pair, &[zero, zero]).unwrap();
        let (_, b) = total_loss(&pair, &steps, &w, SmoothnessMode::GridUnits).unwrap();
        prop_assert_eq!((b.sim, b.sim_inv, b.smooth, b.smooth_inv, b.pre, b.ob, b.total), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0));

        let moved = common::record_steps(&pair, &[tape.constant(v.map(|x| x / 2.0))]).unwrap();
        let (_, b) = total_loss(&pair, &moved, &w, SmoothnessMode::GridUnits).unwrap();
        for term in [b.sim, b.sim_inv, b.smooth, b.smooth_inv, b.pre, b.ob] {
            prop_assert!(term >= 0.0);
        }
    }

    #[test]
    fn empty_moving_tumor_disables_preservation(
        (img, fm, v) in (tensor(vec![1, 6, 6, 6]), mask([6, 6, 6]), field([6, 6, 6]))
    ) {
        let tape = Tape::new();
        let pair = PairVars {
            moving: tape.constant(img.clone()),
            moving_mask: tape.constant(Tensor::zeros([1, 6, 6, 6])),
            fixed: tape.constant(img.map(|x| x * 0.5)),
            fixed_mask: tape.constant(fm.to_tensor()),
        };
        let steps = common::record_steps(&pair, &[tape.constant(v)]).unwrap();
        let (pre, empty) = tumor_preservation(&steps).unwrap();
        prop_assert_eq!(pre.item(), 0.0);
        prop_assert!(empty);
    }

    #[test]
    fn total_loss_is_linear_in_each_weight(
        (img, m, fm, v) in (tensor(vec![1, 6, 6, 6]), mask([6, 6, 6]), mask([6, 6, 6]), field([6, 6, 6])),
        ls in 0.0f64..10.0, lp in 0.0f64..10.0, lo in 0.0f64..10.0
    ) {
        let tape = Tape::new();
        let pair = PairVars {
            moving: tape.constant(img.map(f32::abs)),
            moving_mask: tape.constant(m.to_tensor()),
            fixed: tape.constant(img.map(|x| 0.3 * x.abs())),
            fixed_mask: tape.constant(fm.to_tensor()),
        };
        let steps = common::record_steps(&pair, &[tape.constant(v.map(|x| x / 2.0))]).unwrap();
        let total = |w: LossWeights| total_loss(&pair, &steps, &w, SmoothnessMode::GridUnits).unwrap().1;
        let base = total(LossWeights { lambda_smooth: 0.0, lambda_pre: 0.0, lambda_ob: 0.0 });
        let sim = masked_similarity(
            &steps.iter().map(|s| s.warped_moving).collect::<Vec<_>>(),
            &steps.iter().map(|s| s.warped_moving_mask).collect::<Vec<_>>(),
            pair.fixed,
            pair.fixed_mask,
        ).unwrap().item();
        prop_assert!((base.sim - sim).abs() <= 1e-7);
        let smooth = smoothness(&steps.iter().map(|s| s.phi).collect::<Vec<_>>(), SmoothnessMode::GridUnits).unwrap().item()
            + smoothness(&steps.iter().map(|s| s.phi_hat).collect::<Vec<_>>(), SmoothnessMode::GridUnits).unwrap().item();
        let pre = tumor_preservation(&steps).unwrap().0.item();
        let ob = tumor_obliteration(&steps).unwrap().0.item();
        let full = total(LossWeights { lambda_smooth: ls, lambda_pre: lp, lambda_ob: lo });
        let expected = base.total + ls * smooth + lp * pre + lo * ob;
        prop_assert!((full.total - expected).abs() <= 1e-5 * expected.abs().max(1.0), "{} vs {}", full.total, expected);
    }

    #[test]
    fn adam_with_zero_learning_rate_keeps_parameters(p in tensor(vec![4, 3]), g in tensor(vec![4, 3])) {
        let mut q = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &[&q]);
        adam.update(&mut [&mut q], &[g], 0.0);
        prop_assert!(q.data().iter().zip(p.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn untrained_model_is_the_identity_registration(seed in any::<u64>()) {
        let s = [8, 8, 8];
        let img = |o: f32| Volume::from_fn(s, [1.0; 3], move |i, j, k| ((i + 2 * j + 3 * k) as f32 * 0.05 + o).sin().abs());
        let m = |c: usize| Volume::from_fn(s, [1.0; 3], move |i, j, k| (i == c && j == c && k == c) as u8 as f32);
        let pair = RegistrationPair::new(img(0.0), m(2), img(0.4), m(5)).unwrap();
        let cfg = EngineConfig { steps: 2, levels: 2, channels: vec![4, 4], seed, ..EngineConfig::default() };
        let params = NetworkParams::init(&cfg).unwrap();
        let reg = forward_register(&pair, &params, &cfg).unwrap();
        prop_assert_eq!(&reg.phi_final, &DeformationField::identity(s));
        prop_assert_eq!(&reg.phi_hat_final, &DeformationField::identity(s));
        prop_assert_eq!(reg.warped_moving(&pair.moving).unwrap(), pair.moving.clone());

        let bytes = checkpoint_bytes(&cfg, &params).unwrap();
        let (cfg2, params2) = parse_checkpoint(&bytes, std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(cfg2, cfg);
        prop_assert_eq!(params2, params);
    }

    #[test]
    fn phantoms_are_deterministic(seed in any::<u64>()) {
        let spec = PhantomSpec { seed, ..PhantomSpec::default().with_extents([16, 16, 12]) };
        prop_assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
    }
}
