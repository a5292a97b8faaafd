mod common;

use common::normal;
use friendbounds::diagnostics::{
    barrett_donald_test, cdf_difference_curve, dominance_p_value, placebo_battery, residual_variation,
};
use friendbounds::regress::RegressionSpec;
use friendbounds::Frame;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn controls() -> RegressionSpec {
    RegressionSpec::ols("", &[], "c")
}

/// Treatment `t`, instrument `z`, clusters `c`, three noise columns.
fn sample(rng: &mut ChaCha8Rng, n: usize, treatment: impl Fn(f64, f64) -> f64) -> Frame {
    let z: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let t: Vec<f64> = z.iter().map(|&z| treatment(z, normal(rng))).collect();
    let c: Vec<f64> = (0..n).map(|i| (i % 40) as f64).collect();
    let w: Vec<Vec<f64>> = (0..3).map(|_| (0..n).map(|_| normal(rng)).collect()).collect();
    Frame::from_columns([
        ("t", t),
        ("z", z),
        ("c", c),
        ("w1", w[0].clone()),
        ("w2", w[1].clone()),
        ("w3", w[2].clone()),
    ])
    .unwrap()
}

#[test]
fn p_value_formula() {
    assert!((dominance_p_value(0.5) - (-0.5f64).exp()).abs() < 1e-15);
    assert!((dominance_p_value(0.5) - 0.6065).abs() < 1e-4);
    assert_eq!(dominance_p_value(0.0), 1.0);
    assert_eq!(dominance_p_value(-3.0), 1.0);
}

#[test]
fn identical_groups_give_p_one() {
    // the same treatment values on both sides of the split
    let z: Vec<f64> = (0..20).map(|i| i as f64).collect();
    let t: Vec<f64> = (0..20).map(|i| (i % 10) as f64).collect();
    let data = Frame::from_columns([("t", t), ("z", z)]).unwrap();
    let r = barrett_donald_test(&data, "t", "z").unwrap();
    assert_eq!(r.s_hat, 0.0);
    assert_eq!(r.p_value, 1.0);
}

#[test]
fn dominance_in_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    // high instrument lowers the treatment: dominance holds
    let ok = sample(&mut rng, 2000, |z, u| u - if z > 0.0 { 1.0 } else { 0.0 });
    assert!(barrett_donald_test(&ok, "t", "z").unwrap().p_value > 0.9);
    // high instrument raises it by one standard deviation: violation
    let bad = sample(&mut rng, 2000, |z, u| u + if z > 0.0 { 1.0 } else { 0.0 });
    assert!(barrett_donald_test(&bad, "t", "z").unwrap().p_value < 0.05);
}

#[test]
fn median_ties_go_to_the_low_group() {
    let data = Frame::from_columns([
        ("t", vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        ("z", vec![0.0, 1.0, 1.0, 1.0, 2.0, 3.0]),
    ])
    .unwrap();
    let r = barrett_donald_test(&data, "t", "z").unwrap();
    assert_eq!((r.split, r.n_low, r.n_high), (1.0, 4, 2));
}

#[test]
fn cdf_curve_on_a_mirrored_treatment() {
    let z: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let t: Vec<f64> = z.iter().map(|z| -z).collect();
    let c: Vec<f64> = (0..10).map(|i| (i % 5) as f64).collect();
    let data = Frame::from_columns([("t", t), ("z", z), ("c", c)]).unwrap();
    let curve = cdf_difference_curve(&data, "t", "z", &controls(), &[]).unwrap();
    assert_eq!(curve.len(), 10);
    for p in &curve[..9] {
        assert!(p.coefficient > 0.0);
    }
    let last = curve.last().unwrap();
    assert!(last.degenerate && last.coefficient == 0.0);
    let below = cdf_difference_curve(&data, "t", "z", &controls(), &[-100.0, 100.0]).unwrap();
    assert!(below.iter().all(|p| p.degenerate && p.coefficient == 0.0));
}

#[test]
fn cdf_curve_flat_under_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let data = sample(&mut rng, 3000, |_, u| u);
    let grid: Vec<f64> = (-15..=15).map(|k| k as f64 * 0.1).collect();
    let curve = cdf_difference_curve(&data, "t", "z", &controls(), &grid).unwrap();
    let inside = curve.iter().filter(|p| p.coefficient.abs() <= 2.0 * p.se).count();
    assert!(inside as f64 / curve.len() as f64 >= 0.85, "{inside} of {}", curve.len());
}

#[test]
fn residual_sd_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let data = sample(&mut rng, 200, |z, u| z + u);
    let z = data.get("z").unwrap();
    let mean = z.iter().sum::<f64>() / 200.0;
    let raw = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
    let mut data = data.clone();
    data.insert("z_copy", z.to_vec()).unwrap();
    let sets = vec![
        ("none".to_string(), controls()),
        ("itself".to_string(), RegressionSpec::ols("", &["z_copy"], "c")),
    ];
    let out = residual_variation(&data, "z", &sets).unwrap();
    assert!((out[0].sd - raw).abs() <= 1e-12);
    assert!(out[1].sd <= 1e-12);
}

#[test]
fn placebo_size_under_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    let reps = 500;
    let (mut small_t, mut joint_reject, mut joint_sum) = (0, 0, 0.0);
    for _ in 0..reps {
        let data = sample(&mut rng, 400, |_, u| u);
        let rep = placebo_battery(&data, "z", &["w1", "w2", "w3"], &controls(), None).unwrap();
        if rep.rows[0].t.abs() < 1.96 {
            small_t += 1;
        }
        if rep.reverse.p_value < 0.05 {
            joint_reject += 1;
        }
        joint_sum += rep.reverse.p_value;
    }
    let n = reps as f64;
    // two Monte Carlo standard errors around the nominal rates
    assert!((small_t as f64 / n - 0.95).abs() <= 0.03, "{small_t}");
    assert!((joint_reject as f64 / n - 0.05).abs() <= 0.03, "{joint_reject}");
    assert!((joint_sum / n - 0.5).abs() <= 0.05, "{}", joint_sum / n);
}

#[test]
fn placebo_flags_an_instrument_copy() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut data = sample(&mut rng, 400, |_, u| u);
    let z = data.get("z").unwrap().to_vec();
    data.insert("w1", z.iter().map(|v| v + 0.01 * normal(&mut rng)).collect()).unwrap();
    let rep = placebo_battery(&data, "z", &["w1", "w2"], &controls(), Some("t")).unwrap();
    assert!(rep.flags_failure(0.05));
    assert!(rep.earnings.unwrap().r_squared_with >= 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn p_value_range(s in -5.0f64..5.0) {
        let p = dominance_p_value(s);
        prop_assert!(p > 0.0 && p <= 1.0);
        prop_assert_eq!(p == 1.0, s <= 0.0);
    }

    #[test]
    fn residual_sd_is_monotone(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = sample(&mut rng, 150, |z, u| 0.5 * z + u);
        let mut data = data.clone();
        let z: Vec<f64> = data.get("z").unwrap().iter().zip(data.get("w1").unwrap()).map(|(a, b)| a + 0.4 * b).collect();
        data.insert("z", z).unwrap();
        let sets = vec![
            ("none".to_string(), controls()),
            ("w1".to_string(), RegressionSpec::ols("", &["w1"], "c")),
            ("w1 w2".to_string(), RegressionSpec::ols("", &["w1", "w2"], "c")),
            ("w1 w2 cells".to_string(), RegressionSpec::ols("", &["w1", "w2"], "c").with_absorb("c")),
        ];
        let out = residual_variation(&data, "z", &sets).unwrap();
        for w in out.windows(2) {
            prop_assert!(w[1].sd <= w[0].sd + 1e-12);
        }
    }

    #[test]
    fn cdf_above_the_maximum_is_zero(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = sample(&mut rng, 100, |z, u| z + u);
        let max = data.get("t").unwrap().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let curve = cdf_difference_curve(&data, "t", "z", &controls(), &[max, max + 1.0]).unwrap();
        prop_assert!(curve.iter().all(|p| p.coefficient == 0.0));
    }

    #[test]
    fn dominance_statistic_is_non_negative(seed in any::<u64>(), shift in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = sample(&mut rng, 60, |z, u| u + shift * z);
        let r = barrett_donald_test(&data, "t", "z").unwrap();
        prop_assert!(r.s_hat >= 0.0);
        prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
        prop_assert!(r.n_low >= r.n_high);
    }
}
