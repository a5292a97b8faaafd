mod common;

use common::{close, iv_instance};
use friendbounds::bounds::{estimate_bounds, im_confidence_interval, im_critical_value, BoundSpec, Endpoint};
use friendbounds::regress::{self, RegressionSpec, INTERCEPT};
use friendbounds::Frame;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn base() -> RegressionSpec {
    RegressionSpec::ols("y", &["x1", "x2"], "c").with_endogenous(&["f"], &["z1", "z2", "z3"])
}

fn spec(r_lower: f64, r_upper: f64) -> BoundSpec {
    BoundSpec {
        r_lower,
        r_upper,
        ..BoundSpec::new(base(), "e")
    }
}

/// Replace `e` by `a * f + b * x1 + 7` plus `noise` times a fixed pattern.
fn with_education(data: &Frame, a: f64, b: f64, noise: f64) -> Frame {
    let mut out = data.clone();
    let f = data.get("f").unwrap();
    let x1 = data.get("x1").unwrap();
    let z2 = data.get("z2").unwrap();
    let e = (0..f.len())
        .map(|i| 7.0 + a * f[i] + b * x1[i] + noise * (z2[i] * 1.7).sin())
        .collect();
    out.insert("e", e).unwrap();
    out
}

#[test]
fn endpoints_are_linear_in_the_return() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data = iv_instance(&mut rng, 400, 20);
    let res = estimate_bounds(&spec(0.05, 0.15), &data).unwrap();
    let fy = regress::iv_gmm(&base(), &data).unwrap();
    let fe = regress::iv_gmm(&base().with_outcome("e"), &data).unwrap();
    for (endpoint, r) in [(&res.fit_at_lower, 0.05), (&res.fit_at_upper, 0.15)] {
        for name in fy.names() {
            let expect = fy.coef(name).unwrap() - r * fe.coef(name).unwrap();
            assert!(close(endpoint.coef(name).unwrap(), expect, 1e-10), "{name} at {r}");
        }
    }
    for b in &res.bounds {
        let lo = res.fit_at_lower.coef(&b.name).unwrap();
        let hi = res.fit_at_upper.coef(&b.name).unwrap();
        assert_eq!(b.theta_lower, lo.min(hi));
        assert_eq!(b.theta_upper, lo.max(hi));
    }
}

#[test]
fn degenerate_interval_is_calibrated_iv() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut data = iv_instance(&mut rng, 300, 15);
    let r = 0.1;
    let adj: Vec<f64> = data
        .get("y")
        .unwrap()
        .iter()
        .zip(data.get("e").unwrap())
        .map(|(y, e)| y - r * e)
        .collect();
    data.insert("y_adj", adj).unwrap();
    let calibrated = regress::iv_gmm(&base().with_outcome("y_adj"), &data).unwrap();
    let res = estimate_bounds(&spec(r, r), &data).unwrap();
    let z = 1.959963984540054;
    for b in &res.bounds {
        let c = calibrated.coef(&b.name).unwrap();
        let se = calibrated.se(&b.name).unwrap();
        assert!((b.theta_lower - c).abs() <= 1e-12 * c.abs().max(1.0), "{}", b.name);
        assert_eq!(b.theta_lower, b.theta_upper);
        assert!((b.critical_value - z).abs() < 1e-9);
        assert!(close(b.ci_lower, c - z * se, 1e-9));
        assert!(close(b.ci_upper, c + z * se, 1e-9));
    }
}

#[test]
fn confidence_interval_helper_matches_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let data = iv_instance(&mut rng, 300, 15);
    let res = estimate_bounds(&spec(0.05, 0.15), &data).unwrap();
    let ci = im_confidence_interval(&res, 0.05).unwrap();
    for (b, (lo, hi)) in res.bounds.iter().zip(ci) {
        assert_eq!((b.ci_lower, b.ci_upper), (lo, hi));
        assert!(b.ci_lower <= b.theta_lower && b.theta_upper <= b.ci_upper);
    }
}

#[test]
fn sign_probe_picks_the_endpoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let data = iv_instance(&mut rng, 500, 25);

    let pos = with_education(&data, 0.6, 0.0, 1.0);
    let res = estimate_bounds(&spec(0.05, 0.15), &pos).unwrap();
    assert!(res.sign_probe.estimate > 0.0);
    assert_eq!(res.sign_probe.upper_bound_at, Endpoint::Lower);
    let f = res.get("f").unwrap();
    assert_eq!(f.theta_upper, res.fit_at_lower.coef("f").unwrap());

    let neg = with_education(&data, -0.6, 0.0, 1.0);
    let res = estimate_bounds(&spec(0.05, 0.15), &neg).unwrap();
    assert!(res.sign_probe.estimate < 0.0);
    assert_eq!(res.sign_probe.upper_bound_at, Endpoint::Upper);
    let f = res.get("f").unwrap();
    assert_eq!(f.theta_upper, res.fit_at_upper.coef("f").unwrap());
}

#[test]
fn unrelated_education_gives_point_identification() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let data = iv_instance(&mut rng, 400, 20);
    let flat = with_education(&data, 0.0, 0.0, 0.0);
    let res = estimate_bounds(&spec(0.05, 0.15), &flat).unwrap();
    // the constant in `e` still moves the intercept
    for b in res.bounds.iter().filter(|b| b.name != INTERCEPT) {
        assert!(b.width() <= 1e-10, "{} width {}", b.name, b.width());
    }
}

#[test]
fn control_without_education_loading_has_zero_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let data = iv_instance(&mut rng, 400, 20);
    // exact linear education: the probe has no x2 component
    let e = with_education(&data, 0.5, 0.3, 0.0);
    let res = estimate_bounds(&spec(0.05, 0.15), &e).unwrap();
    assert!(res.get("x2").unwrap().width() <= 1e-10);
    assert!(close(res.get("f").unwrap().width(), 0.1 * 0.5, 1e-9));
    assert!(close(res.get("x1").unwrap().width(), 0.1 * 0.3, 1e-9));
}

#[test]
fn critical_value_limits() {
    let c0 = im_critical_value(0.0, 1.0, 0.05).unwrap();
    assert!((c0 - 1.95996).abs() <= 1e-4);
    let c20 = im_critical_value(20.0, 1.0, 0.05).unwrap();
    assert!((c20 - 1.64485).abs() <= 1e-3);
}

#[test]
fn critical_value_matches_grid_search() {
    let n = Normal::new(0.0, 1.0).unwrap();
    let h = |c: f64| (n.cdf(c + 1.0) - n.cdf(-c) - 0.95).abs();
    let steps = 4_000_000;
    let best = (0..=steps)
        .map(|k| 1.6 + 0.4 * k as f64 / steps as f64)
        .min_by(|a, b| h(*a).total_cmp(&h(*b)))
        .unwrap();
    let c = im_critical_value(1.0, 1.0, 0.05).unwrap();
    assert!((c - best).abs() <= 1e-6, "{c} vs {best}");
}

#[test]
fn critical_value_decreases_in_width() {
    let n = Normal::new(0.0, 1.0).unwrap();
    let (one, two) = (n.inverse_cdf(0.95), n.inverse_cdf(0.975));
    let cs: Vec<f64> = (0..100)
        .map(|k| im_critical_value(k as f64 * 0.05, 1.0, 0.05).unwrap())
        .collect();
    for w in cs.windows(2) {
        assert!(w[1] < w[0]);
    }
    assert!(cs.iter().all(|c| (one - 1e-12..=two + 1e-12).contains(c)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bounds_are_ordered(seed in any::<u64>(), a in -1.0f64..1.0, lo in 0.0f64..0.2, width in 0.0f64..0.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = with_education(&iv_instance(&mut rng, 200, 10), a, 0.2, 1.0);
        let res = estimate_bounds(&spec(lo, lo + width), &data).unwrap();
        for b in &res.bounds {
            prop_assert!(b.theta_lower <= b.theta_upper);
            prop_assert!(b.ci_lower <= b.theta_lower);
            prop_assert!(b.ci_upper >= b.theta_upper);
        }
    }

    #[test]
    fn critical_value_solves_its_equation(ratio in 0.0f64..50.0, alpha in 0.01f64..0.3) {
        let n = Normal::new(0.0, 1.0).unwrap();
        let c = im_critical_value(ratio, 1.0, alpha).unwrap();
        prop_assert!((n.cdf(c + ratio) - n.cdf(-c) - (1.0 - alpha)).abs() <= 1e-10);
        // the quantile function itself is accurate to roughly 1e-9
        prop_assert!(c >= n.inverse_cdf(1.0 - alpha) - 1e-8 && c <= n.inverse_cdf(1.0 - alpha / 2.0) + 1e-8);
    }
}
