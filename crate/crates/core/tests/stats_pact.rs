use fxq_core::fixnum::fix_quant;
use fxq_core::pact::{eta_fix, pact, pact_ste_grad, pact_via_fixquant};
use fxq_core::stats::{
    fl_from_std, log_spaced, rectify, relative_error, sample_gaussian, std_dev, sweep,
    threshold_fit, threshold_sigmas, SweepConfig,
};
use fxq_core::{ClipParam, FixFormat, Signedness};
use proptest::prelude::*;

#[test]
fn closed_form_fl_values() {
    // floor(log2(40/σ)) and floor(log2(70/σ))
    assert_eq!(fl_from_std(40.0, Signedness::Signed, 8).unwrap(), 0);
    assert_eq!(fl_from_std(1.0, Signedness::Signed, 8).unwrap(), 5);
    assert_eq!(fl_from_std(70.0, Signedness::Unsigned, 8).unwrap(), 0);
    assert_eq!(fl_from_std(0.01, Signedness::Unsigned, 8).unwrap(), 8);
    assert!(fl_from_std(0.0, Signedness::Signed, 8).is_err());
}

#[test]
fn closed_form_steps_match_powers_of_two() {
    // independent oracle: count halvings of 40/σ until it drops below 2
    for &sigma in &log_spaced(0.05, 60.0, 400) {
        let mut r = 40.0 / sigma;
        let mut fl = 0i32;
        while r >= 2.0 {
            r /= 2.0;
            fl += 1;
        }
        if r < 1.0 {
            fl = 0;
        }
        assert_eq!(
            fl_from_std(sigma, Signedness::Signed, 8).unwrap() as i32,
            fl.min(7),
            "σ={sigma}"
        );
    }
}

#[test]
fn eta_values() {
    let p = ClipParam::new(1.0, 8).unwrap();
    assert_eq!(
        eta_fix(&p, FixFormat::unsigned(8, 7).unwrap()),
        128.0 / 255.0
    );
    let p = ClipParam::new(2.0, 8).unwrap();
    assert_eq!(eta_fix(&p, FixFormat::unsigned(8, 0).unwrap()), 2.0 / 255.0);
    for fl in 0..=8 {
        let f = FixFormat::unsigned(8, fl).unwrap();
        let p = ClipParam::new(255.0 / 2f64.powi(fl), 8).unwrap();
        assert_eq!(eta_fix(&p, f), 1.0);
    }
}

#[test]
fn unit_sigma_signed_fl5_is_below_one_percent() {
    let v = sample_gaussian(1.0, 10_000, 3).unwrap();
    assert!(relative_error(&v, FixFormat::signed(8, 5).unwrap()).unwrap() < 0.01);
}

#[test]
fn argmin_is_non_increasing_in_sigma() {
    for signedness in [Signedness::Signed, Signedness::Unsigned] {
        let t = sweep(&SweepConfig {
            seed: 5,
            ..SweepConfig::log_spaced(0.05, 200.0, 60, signedness)
        })
        .unwrap();
        assert!(
            t.argmin_fl.windows(2).all(|w| w[1] <= w[0]),
            "{:?}",
            t.argmin_fl
        );
    }
}

#[test]
fn thresholds_are_roughly_octaves() {
    let t = sweep(&SweepConfig {
        seed: 2,
        ..SweepConfig::log_spaced(0.05, 60.0, 200, Signedness::Signed)
    })
    .unwrap();
    let th = threshold_sigmas(&t);
    assert!(th.len() >= 5);
    for w in th.windows(2) {
        let ratio = w[0].1 / w[1].1;
        assert!((1.6..2.5).contains(&ratio), "{:?}", th);
    }
    let (slope, icpt) = threshold_fit(&th).unwrap();
    assert!((-1.1..=-0.9).contains(&slope), "{slope}");
    // intercept near log2(40), up to one grid step of the σ axis
    assert!((icpt - 40f64.log2()).abs() < 0.6, "{icpt}");
}

#[test]
fn sweep_rows_do_not_depend_on_grid_neighbours() {
    let a = sweep(&SweepConfig {
        seed: 9,
        ..SweepConfig::log_spaced(0.1, 40.0, 10, Signedness::Signed)
    })
    .unwrap();
    let b = sweep(&SweepConfig {
        seed: 9,
        ..SweepConfig::log_spaced(0.1, 40.0, 10, Signedness::Signed)
    })
    .unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pact_output_in_range_and_monotone(a in -50f64..50.0, b in -50f64..50.0, alpha in 0.0625f64..16.0) {
        let p = ClipParam::new(alpha, 8).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (pl, ph) = (pact(lo, &p), pact(hi, &p));
        prop_assert!((0.0..=alpha).contains(&pl) && (0.0..=alpha).contains(&ph));
        prop_assert!(pl <= ph);
    }

    #[test]
    fn pact_equals_scaled_fixed_point_quantizer(u in -1f64..1.0, alpha in 0.0625f64..16.0, fl in 0u8..=8) {
        let x = 2.0 * alpha * u;
        let p = ClipParam::new(alpha, 8).unwrap();
        let f = FixFormat::unsigned(8, fl as i32).unwrap();
        let lhs = pact(x, &p);
        let rhs = pact_via_fixquant(x, &p, f).unwrap();
        prop_assert!((lhs - rhs).abs() <= alpha * 2f64.powi(-40), "{lhs} vs {rhs}");
    }

    #[test]
    fn eta_halves_per_fl_step(alpha in 0.01f64..100.0, fl in 1u8..=8) {
        let p = ClipParam::new(alpha, 8).unwrap();
        let hi = eta_fix(&p, FixFormat::unsigned(8, fl as i32).unwrap());
        let lo = eta_fix(&p, FixFormat::unsigned(8, fl as i32 - 1).unwrap());
        prop_assert_eq!(lo * 2.0, hi);
    }

    #[test]
    fn ste_mask_matches_clip_interior(x in -5f64..5.0, alpha in 0.1f64..4.0) {
        let p = ClipParam::new(alpha, 8).unwrap();
        let g = pact_ste_grad(x, &p);
        prop_assert_eq!(g.input_mask, if x > 0.0 && x < alpha { 1.0 } else { 0.0 });
        prop_assert_eq!(g.alpha_grad, if x >= alpha { 1.0 } else { 0.0 });
    }

    #[test]
    fn relative_error_is_power_of_two_covariant(seed in 0u64..1000, sigma in 0.05f64..2.0, fl in 0u8..=6) {
        let v = sample_gaussian(sigma, 256, seed).unwrap();
        let f = FixFormat::signed(8, fl as i32).unwrap();
        let fine = f.with_frac_length(fl as i32 + 1).unwrap();
        let doubled: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let no_sat = doubled.iter().all(|x| fix_quant(*x, f).abs() < f.max_value::<f64>());
        prop_assume!(no_sat);
        prop_assert_eq!(relative_error(&doubled, f).unwrap(), relative_error(&v, fine).unwrap());
    }

    #[test]
    fn rectify_is_max_with_zero(v in proptest::collection::vec(-10f64..10.0, 0..50)) {
        let r = rectify(&v);
        prop_assert!(r.iter().zip(&v).all(|(a, b)| *a == b.max(0.0)));
    }
}

#[test]
fn sample_std_is_close() {
    let v: Vec<f64> = sample_gaussian(1.0, 10_000, 11).unwrap();
    assert!((std_dev(&v) - 1.0).abs() < 0.03);
    assert_eq!(v, sample_gaussian(1.0, 10_000, 11).unwrap());
}
