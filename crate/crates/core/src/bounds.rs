//! Interval bounds for IV coefficients when the return to a secondary
//! endogenous regressor (schooling) is only known to lie in `[r_lower, r_upper]`.
//!
//! For a fixed return `r` the coefficient vector solves the IV moment
//! condition with outcome `Y - r E`, and is linear in `r`. Evaluating at the
//! two ends of the interval and taking componentwise min/max gives ordered
//! bounds; inference follows Imbens and Manski (2004), which covers the true
//! parameter rather than the whole identified set.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::frame::{ColumnSource, Frame};
use crate::regress::{self, FitResult, FitSummary, Overlay, RegressionSpec, Weighting};

const ADJUSTED_LOW: &str = "__outcome_at_r_lower";
const ADJUSTED_HIGH: &str = "__outcome_at_r_upper";
const PROBE_OUTCOME: &str = "__secondary_on_sample";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundSpec {
    /// Outcome, instrumented primary regressor(s) and controls.
    pub base: RegressionSpec,
    /// Secondary endogenous regressor whose return is interval-known.
    pub secondary: String,
    pub r_lower: f64,
    pub r_upper: f64,
    pub alpha: f64,
}

impl Default for BoundSpec {
    fn default() -> Self {
        BoundSpec {
            base: RegressionSpec::default(),
            secondary: "education".into(),
            r_lower: 0.05,
            r_upper: 0.15,
            alpha: 0.05,
        }
    }
}

impl BoundSpec {
    pub fn new(base: RegressionSpec, secondary: &str) -> Self {
        BoundSpec {
            base,
            secondary: secondary.into(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(self.r_lower.is_finite() && self.r_upper.is_finite()) {
            return Err(Error::NonFinite("return interval"));
        }
        if self.r_lower > self.r_upper {
            return Err(Error::InvalidSpec(format!(
                "r_lower ({}) exceeds r_upper ({})",
                self.r_lower, self.r_upper
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidSpec(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.base.endogenous.is_empty() {
            return Err(Error::InvalidSpec("bounds need an instrumented primary regressor".into()));
        }
        if self.base.columns().contains(&self.secondary.as_str()) {
            return Err(Error::InvalidSpec(format!(
                "secondary regressor `{}` must not appear in the base specification",
                self.secondary
            )));
        }
        if self.base.weighting != Weighting::TwoSls {
            return Err(Error::InvalidSpec(
                "bounds require the common weighting W = (Z'Z)^-1".into(),
            ));
        }
        Ok(())
    }
}

/// Which end of the return interval produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBound {
    pub name: String,
    pub theta_lower: f64,
    pub theta_upper: f64,
    pub se_lower: f64,
    pub se_upper: f64,
    /// Return endpoint at which `theta_lower` is attained.
    pub lower_at: Endpoint,
    pub critical_value: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

impl CoefficientBound {
    pub fn width(&self) -> f64 {
        self.theta_upper - self.theta_lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.theta_lower <= value && value <= self.theta_upper
    }

    pub fn ci_contains(&self, value: f64) -> bool {
        self.ci_lower <= value && value <= self.ci_upper
    }
}

/// IV regression of the secondary regressor on the instrumented primary one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignProbe {
    pub regressor: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
    /// Endpoint giving the upper bound of the primary coefficient.
    pub upper_bound_at: Endpoint,
}

impl SignProbe {
    /// Point identification cannot be rejected at level `alpha`.
    pub fn point_identified(&self, alpha: f64) -> bool {
        self.p_value >= alpha
    }
}

#[derive(Debug, Clone)]
pub struct BoundResult {
    pub r_lower: f64,
    pub r_upper: f64,
    pub alpha: f64,
    pub bounds: Vec<CoefficientBound>,
    pub sign_probe: SignProbe,
    pub probe_fit: FitResult,
    pub fit_at_lower: FitResult,
    pub fit_at_upper: FitResult,
}

impl BoundResult {
    pub fn get(&self, name: &str) -> Option<&CoefficientBound> {
        self.bounds.iter().find(|b| b.name == name)
    }

    pub fn summary(&self) -> BoundSummary {
        BoundSummary {
            r_lower: self.r_lower,
            r_upper: self.r_upper,
            alpha: self.alpha,
            bounds: self.bounds.clone(),
            sign_probe: self.sign_probe.clone(),
            fit_at_lower: self.fit_at_lower.summary(),
            fit_at_upper: self.fit_at_upper.summary(),
        }
    }
}

/// Serializable view of a [`BoundResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub r_lower: f64,
    pub r_upper: f64,
    pub alpha: f64,
    pub bounds: Vec<CoefficientBound>,
    pub sign_probe: SignProbe,
    pub fit_at_lower: FitSummary,
    pub fit_at_upper: FitSummary,
}

impl fmt::Display for BoundSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.bounds.iter().map(|b| b.name.len()).max().unwrap_or(8).max(8);
        writeln!(
            f,
            "bounds for r in [{}, {}], {:.0}% Imbens-Manski CI",
            self.r_lower,
            self.r_upper,
            100.0 * (1.0 - self.alpha)
        )?;
        for b in &self.bounds {
            writeln!(f, "{:<width$} [{:.4}, {:.4}]", b.name, b.theta_lower, b.theta_upper)?;
            writeln!(f, "{:<width$} [{:.4}, {:.4}]  c = {:.4}", "", b.ci_lower, b.ci_upper, b.critical_value)?;
        }
        let p = &self.sign_probe;
        writeln!(
            f,
            "sign probe ({}): {:.4} (se {:.4}, t {:.2}, p {:.4}); upper bound at r_{}",
            p.regressor,
            p.estimate,
            p.se,
            p.t,
            p.p_value,
            match p.upper_bound_at {
                Endpoint::Lower => "lower",
                Endpoint::Upper => "upper",
            }
        )
    }
}

fn normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

/// Critical value `c` solving `Phi(c + delta/se_max) - Phi(-c) = 1 - alpha`.
///
/// The root lies between the one- and two-sided normal quantiles; it is
/// bracketed, bisected, then polished with Newton steps.
pub fn im_critical_value(delta: f64, se_max: f64, alpha: f64) -> Result<f64> {
    if !(delta.is_finite() && se_max.is_finite() && alpha.is_finite()) {
        return Err(Error::NonFinite("critical value inputs"));
    }
    if delta < 0.0 {
        return Err(Error::InvalidSpec(format!("bound width must be non-negative, got {delta}")));
    }
    if se_max <= 0.0 {
        return Err(Error::InvalidSpec(format!("standard error must be positive, got {se_max}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidSpec(format!("alpha must lie in (0,1), got {alpha}")));
    }
    let n = normal();
    let shift = delta / se_max;
    let h = |c: f64| n.cdf(c + shift) - n.cdf(-c) - (1.0 - alpha);
    let dh = |c: f64| n.pdf(c + shift) + n.pdf(c);

    let mut lo = n.inverse_cdf(1.0 - alpha) - 0.1;
    let mut hi = n.inverse_cdf(1.0 - alpha / 2.0) + 0.1;
    debug_assert!(h(lo) <= 0.0 && h(hi) >= 0.0);
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut c = 0.5 * (lo + hi);
    for _ in 0..5 {
        let r = h(c);
        if r.abs() <= 1e-15 {
            break;
        }
        let step = r / dh(c);
        if !step.is_finite() {
            break;
        }
        c -= step;
    }
    Ok(c)
}

/// Imbens-Manski interval for every coefficient at level `alpha`, each with
/// its own critical value.
pub fn im_confidence_interval(result: &BoundResult, alpha: f64) -> Result<Vec<(f64, f64)>> {
    result
        .bounds
        .iter()
        .map(|b| {
            let c = im_critical_value(b.width(), b.se_lower.max(b.se_upper), alpha)?;
            Ok((b.theta_lower - c * b.se_lower, b.theta_upper + c * b.se_upper))
        })
        .collect()
}

/// Adds the two endpoint outcomes and the sample-aligned secondary column.
fn adjusted_frame<S: ColumnSource + ?Sized>(spec: &BoundSpec, source: &S) -> Result<Frame> {
    let y = source.column(&spec.base.outcome)?;
    let e = source.column(&spec.secondary)?;
    let mut frame = Frame::new(source.n_rows());
    frame.insert(ADJUSTED_LOW, y.iter().zip(&e).map(|(y, e)| y - spec.r_lower * e).collect())?;
    frame.insert(ADJUSTED_HIGH, y.iter().zip(&e).map(|(y, e)| y - spec.r_upper * e).collect())?;
    frame.insert(
        PROBE_OUTCOME,
        y.iter().zip(&e).map(|(y, e)| if y.is_finite() { *e } else { f64::NAN }).collect(),
    )?;
    Ok(frame)
}

/// IV regression of the secondary regressor on the instrumented primary
/// regressor and controls, on the bound-estimation sample.
pub fn sign_probe<S: ColumnSource + ?Sized + Sync>(spec: &BoundSpec, source: &S) -> Result<FitResult> {
    spec.validate()?;
    let extra = adjusted_frame(spec, source)?;
    let merged = Overlay { base: source, top: &extra };
    regress::iv_gmm(&spec.base.with_outcome(PROBE_OUTCOME), &merged)
}

fn probe_summary(spec: &BoundSpec, fit: &FitResult) -> Result<SignProbe> {
    let name = &spec.base.endogenous[0];
    let estimate = fit.coef(name)?;
    Ok(SignProbe {
        regressor: name.clone(),
        estimate,
        se: fit.se(name)?,
        t: fit.t_stat(name)?,
        p_value: fit.p_value(name)?,
        upper_bound_at: if estimate >= 0.0 { Endpoint::Lower } else { Endpoint::Upper },
    })
}

/// Bounds on every coefficient of the IV regression of `Y - r E`.
pub fn estimate_bounds<S: ColumnSource + ?Sized + Sync>(spec: &BoundSpec, source: &S) -> Result<BoundResult> {
    spec.validate()?;
    let extra = adjusted_frame(spec, source)?;
    let merged = Overlay { base: source, top: &extra };
    let spec_low = spec.base.with_outcome(ADJUSTED_LOW);
    let spec_high = spec.base.with_outcome(ADJUSTED_HIGH);
    let spec_probe = spec.base.with_outcome(PROBE_OUTCOME);
    let ((low, high), probe) = rayon::join(
        || rayon::join(|| regress::iv_gmm(&spec_low, &merged), || regress::iv_gmm(&spec_high, &merged)),
        || regress::iv_gmm(&spec_probe, &merged),
    );
    let (low, high, probe) = (low?, high?, probe?);

    let se_low = low.standard_errors();
    let se_high = high.standard_errors();
    let mut bounds = Vec::with_capacity(low.coefficients.len());
    for (i, (name, &b_low)) in low.coefficients.iter().enumerate() {
        let b_high = high.coefficients[i];
        // ties resolve to the natural order of the endpoints
        let (theta_lower, se_lower, lower_at, theta_upper, se_upper) = if b_high < b_low {
            (b_high, se_high[i], Endpoint::Upper, b_low, se_low[i])
        } else {
            (b_low, se_low[i], Endpoint::Lower, b_high, se_high[i])
        };
        let delta = theta_upper - theta_lower;
        let se_max = se_lower.max(se_upper);
        let critical_value = if se_max > 0.0 {
            im_critical_value(delta, se_max, spec.alpha)?
        } else {
            f64::NAN
        };
        bounds.push(CoefficientBound {
            name: name.clone(),
            theta_lower,
            theta_upper,
            se_lower,
            se_upper,
            lower_at,
            critical_value,
            ci_lower: theta_lower - critical_value * se_lower,
            ci_upper: theta_upper + critical_value * se_upper,
        });
    }
    Ok(BoundResult {
        r_lower: spec.r_lower,
        r_upper: spec.r_upper,
        alpha: spec.alpha,
        bounds,
        sign_probe: probe_summary(spec, &probe)?,
        probe_fit: probe,
        fit_at_lower: low,
        fit_at_upper: high,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn critical_value_limits() {
        assert_abs_diff_eq!(im_critical_value(0.0, 1.0, 0.05).unwrap(), 1.959964, epsilon = 1e-6);
        assert_abs_diff_eq!(im_critical_value(20.0, 1.0, 0.05).unwrap(), 1.644854, epsilon = 1e-6);
    }

    #[test]
    fn critical_value_solves_equation() {
        let n = normal();
        for &(d, s, a) in &[(0.3, 0.2, 0.05), (1.0, 1.0, 0.1), (0.0, 0.5, 0.01), (5.0, 0.1, 0.2)] {
            let c = im_critical_value(d, s, a).unwrap();
            let r = n.cdf(c + d / s) - n.cdf(-c) - (1.0 - a);
            assert!(r.abs() <= 1e-10, "residual {r}");
        }
    }

    #[test]
    fn critical_value_errors() {
        assert!(matches!(im_critical_value(f64::NAN, 1.0, 0.05), Err(Error::NonFinite(_))));
        assert!(matches!(im_critical_value(1.0, f64::INFINITY, 0.05), Err(Error::NonFinite(_))));
        assert!(im_critical_value(-1.0, 1.0, 0.05).is_err());
        assert!(im_critical_value(1.0, 0.0, 0.05).is_err());
        assert!(im_critical_value(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn spec_validation() {
        let base = RegressionSpec::ols("y", &["w"], "c").with_endogenous(&["f"], &["z"]);
        let mut spec = BoundSpec::new(base, "e");
        assert!(spec.validate().is_ok());
        spec.r_lower = 0.2;
        assert!(spec.validate().is_err());
        spec.r_lower = 0.05;
        spec.secondary = "w".into();
        assert!(spec.validate().is_err());
    }
}
