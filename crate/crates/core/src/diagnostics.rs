//! Checks on the excluded instrument: placebo regressions, CDF shifts,
//! a one-sided stochastic dominance test and residual-variation accounting.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::{ColumnSource, Frame};
use crate::regress::{self, JointTest, Overlay, RegressionSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboRow {
    pub variable: String,
    pub coefficient: f64,
    pub se: f64,
    pub t: f64,
    pub p_value: f64,
    pub n_obs: usize,
}

/// Does adding the predetermined variables to an earnings regression with
/// the basic controls explain anything?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarningsAugmentation {
    pub outcome: String,
    pub r_squared_without: f64,
    pub r_squared_with: f64,
    pub joint: JointTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboReport {
    pub instrument: String,
    /// One regression of each variable on the instrument and controls.
    pub rows: Vec<PlaceboRow>,
    /// The instrument on all predetermined variables and controls.
    pub reverse: JointTest,
    pub earnings: Option<EarningsAugmentation>,
}

impl PlaceboReport {
    /// True when any individual or joint test rejects at `alpha`.
    pub fn flags_failure(&self, alpha: f64) -> bool {
        self.rows.iter().any(|r| r.p_value < alpha) || self.reverse.p_value < alpha
    }
}

impl fmt::Display for PlaceboReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Placebo regressions on `{}`", self.instrument)?;
        writeln!(f, "{:<24} {:>12} {:>10} {:>8} {:>8} {:>7}", "variable", "coef", "se", "t", "p", "N")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<24} {:>12.5} {:>10.5} {:>8.3} {:>8.3} {:>7}",
                r.variable, r.coefficient, r.se, r.t, r.p_value, r.n_obs
            )?;
        }
        writeln!(
            f,
            "reverse regression: F({}, {}) = {:.3}, p = {:.3}",
            self.reverse.df_num, self.reverse.df_den, self.reverse.f, self.reverse.p_value
        )?;
        if let Some(e) = &self.earnings {
            writeln!(
                f,
                "{}: R2 {:.4} -> {:.4}, F({}, {}) = {:.3}, p = {:.3}",
                e.outcome, e.r_squared_without, e.r_squared_with, e.joint.df_num, e.joint.df_den, e.joint.f, e.joint.p_value
            )?;
        }
        Ok(())
    }
}

/// Regress each predetermined variable on the instrument plus the controls
/// in `controls` (its outcome and endogenous fields are ignored), then the
/// instrument on all of them jointly. When `earnings` is given, also test
/// whether the predetermined variables add explanatory power for it.
pub fn placebo_battery<S: ColumnSource + ?Sized + Sync>(
    source: &S,
    instrument: &str,
    predetermined: &[&str],
    controls: &RegressionSpec,
    earnings: Option<&str>,
) -> Result<PlaceboReport> {
    if predetermined.is_empty() {
        return Err(Error::EmptySubset);
    }
    for c in predetermined.iter().chain([&instrument]) {
        source.column(c)?;
    }
    // a predetermined variable listed among the controls is tested, not controlled for
    let base = RegressionSpec {
        endogenous: Vec::new(),
        excluded_instruments: Vec::new(),
        exogenous: controls
            .exogenous
            .iter()
            .filter(|c| !predetermined.contains(&c.as_str()))
            .cloned()
            .collect(),
        ..controls.clone()
    };
    let rows = predetermined
        .par_iter()
        .map(|v| {
            let mut spec = base.with_outcome(v);
            spec.exogenous.insert(0, instrument.to_string());
            let fit = regress::ols(&spec, source)?;
            Ok(PlaceboRow {
                variable: v.to_string(),
                coefficient: fit.coef(instrument)?,
                se: fit.se(instrument)?,
                t: fit.t_stat(instrument)?,
                p_value: fit.p_value(instrument)?,
                n_obs: fit.n_obs,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut spec = base.with_outcome(instrument);
    spec.exogenous.splice(0..0, predetermined.iter().map(|s| s.to_string()));
    let reverse = regress::joint_f(&regress::ols(&spec, source)?, predetermined)?;

    let earnings = earnings
        .map(|y| {
            // both regressions on the sample of the larger one
            let mut with = base.with_outcome(y);
            with.exogenous.splice(0..0, predetermined.iter().map(|s| s.to_string()));
            let fit_with = regress::ols(&with, source)?;
            let mut mask = vec![false; source.n_rows()];
            for &r in &fit_with.sample {
                mask[r] = true;
            }
            let mut yv = source.column(y)?;
            for (v, m) in yv.iter_mut().zip(&mask) {
                if !m {
                    *v = f64::NAN;
                }
            }
            let top = Frame::from_columns([(y.to_string(), yv)])?;
            let fit_without = regress::ols(&base.with_outcome(y), &Overlay { base: source, top: &top })?;
            Ok::<_, Error>(EarningsAugmentation {
                outcome: y.to_string(),
                r_squared_without: fit_without.r_squared,
                r_squared_with: fit_with.r_squared,
                joint: regress::joint_f(&fit_with, predetermined)?,
            })
        })
        .transpose()?;

    Ok(PlaceboReport {
        instrument: instrument.to_string(),
        rows,
        reverse,
        earnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub threshold: f64,
    /// Change in Pr(treatment <= threshold) per unit of the instrument.
    pub coefficient: f64,
    pub se: f64,
    /// Indicator constant on the sample; coefficient set to zero.
    pub degenerate: bool,
}

/// Most thresholds used when no grid is given.
pub const MAX_DEFAULT_GRID: usize = 200;

/// Distinct finite values, or evenly spaced order statistics when there are
/// more than [`MAX_DEFAULT_GRID`] of them.
pub fn default_grid(values: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    v.dedup();
    if v.len() <= MAX_DEFAULT_GRID {
        return v;
    }
    let last = v.len() - 1;
    let mut g: Vec<f64> = (0..MAX_DEFAULT_GRID)
        .map(|k| v[k * last / (MAX_DEFAULT_GRID - 1)])
        .collect();
    g.dedup();
    g
}

const INDICATOR: &str = "__below_threshold";

/// OLS of 1{treatment <= x} on the instrument and controls for each
/// threshold `x`. An empty grid means [`default_grid`] of the treatment.
pub fn cdf_difference_curve<S: ColumnSource + ?Sized + Sync>(
    source: &S,
    treatment: &str,
    instrument: &str,
    controls: &RegressionSpec,
    grid: &[f64],
) -> Result<Vec<CdfPoint>> {
    let t = source.column(treatment)?;
    let grid = if grid.is_empty() { default_grid(&t) } else { grid.to_vec() };
    if grid.is_empty() {
        return Err(Error::EmptyTable);
    }
    let mut spec = RegressionSpec {
        endogenous: Vec::new(),
        excluded_instruments: Vec::new(),
        ..controls.with_outcome(INDICATOR)
    };
    spec.exogenous.insert(0, instrument.to_string());
    grid.par_iter()
        .map(|&x| {
            let ind: Vec<f64> = t
                .iter()
                .map(|v| if v.is_nan() { f64::NAN } else if *v <= x { 1.0 } else { 0.0 })
                .collect();
            let top = Frame::from_columns([(INDICATOR, ind)])?;
            let src = Overlay { base: source, top: &top };
            let rows = regress::build_design(&spec, &src)?.rows;
            let ind = top.get(INDICATOR).unwrap();
            if rows.iter().all(|&r| ind[r] == ind[rows[0]]) {
                return Ok(CdfPoint {
                    threshold: x,
                    coefficient: 0.0,
                    se: 0.0,
                    degenerate: true,
                });
            }
            let fit = regress::ols(&spec, &src)?;
            Ok(CdfPoint {
                threshold: x,
                coefficient: fit.coef(instrument)?,
                se: fit.se(instrument)?,
                degenerate: false,
            })
        })
        .collect()
}

/// The same curve after partialling the controls out of both the treatment
/// and the instrument.
pub fn residual_cdf_difference_curve<S: ColumnSource + ?Sized + Sync>(
    source: &S,
    treatment: &str,
    instrument: &str,
    controls: &RegressionSpec,
    grid: &[f64],
) -> Result<Vec<CdfPoint>> {
    let frame = residualized_pair(source, treatment, instrument, controls)?;
    let plain = RegressionSpec {
        exogenous: Vec::new(),
        absorb_fe: None,
        dummy_fe: None,
        ..controls.clone()
    };
    cdf_difference_curve(&frame, treatment, instrument, &plain, grid)
}

fn residualized_pair<S: ColumnSource + ?Sized>(
    source: &S,
    treatment: &str,
    instrument: &str,
    controls: &RegressionSpec,
) -> Result<Frame> {
    let mut res = regress::residualize(controls, source, &[treatment, instrument])?;
    let inst = res.pop().unwrap();
    let treat = res.pop().unwrap();
    let mut frame = Frame::from_columns([(treatment.to_string(), treat), (instrument.to_string(), inst)])?;
    frame.insert(controls.cluster.clone(), source.column(&controls.cluster)?)?;
    Ok(frame)
}

pub fn write_cdf_grid(path: &Path, points: &[CdfPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    /// Instrument median; observations at or below it form the low group.
    pub split: f64,
    pub n_high: usize,
    pub n_low: usize,
    /// Unclamped statistic.
    pub s_hat: f64,
    pub p_value: f64,
    /// (x, F_L(x) - F_H(x)) at every pooled treatment value.
    pub cdf_grid: Vec<(f64, f64)>,
}

impl fmt::Display for DominanceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "split {:.4}  N_H {}  N_L {}  S {:.4}  p {:.4}",
            self.split, self.n_high, self.n_low, self.s_hat, self.p_value
        )
    }
}

/// p-value of the one-sided sup statistic.
pub fn dominance_p_value(s: f64) -> f64 {
    let s = s.max(0.0);
    (-2.0 * s * s).exp()
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Test that the treatment distribution of the high-instrument half is
/// first-order dominated by that of the low half (F_H >= F_L everywhere).
/// Large values of sup(F_L - F_H) are evidence against.
pub fn barrett_donald_test<S: ColumnSource + ?Sized>(source: &S, treatment: &str, instrument: &str) -> Result<DominanceReport> {
    let t = source.column(treatment)?;
    let z = source.column(instrument)?;
    let pairs: Vec<(f64, f64)> = t
        .iter()
        .zip(&z)
        .filter(|(a, b)| a.is_finite() && b.is_finite())
        .map(|(a, b)| (*a, *b))
        .collect();
    let mut zs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    zs.sort_by(f64::total_cmp);
    if zs.is_empty() {
        return Err(Error::EmptyTable);
    }
    let split = median(&zs);
    let mut low: Vec<f64> = pairs.iter().filter(|p| p.1 <= split).map(|p| p.0).collect();
    let mut high: Vec<f64> = pairs.iter().filter(|p| p.1 > split).map(|p| p.0).collect();
    if low.len() < 2 || high.len() < 2 {
        return Err(Error::InvalidSpec(format!(
            "median split leaves {} low and {} high observations; need at least 2 each",
            low.len(),
            high.len()
        )));
    }
    low.sort_by(f64::total_cmp);
    high.sort_by(f64::total_cmp);
    let mut xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let ecdf = |s: &[f64], x: f64| s.partition_point(|v| *v <= x) as f64 / s.len() as f64;
    let cdf_grid: Vec<(f64, f64)> = xs.iter().map(|&x| (x, ecdf(&low, x) - ecdf(&high, x))).collect();
    let sup = cdf_grid.iter().map(|g| g.1).fold(f64::NEG_INFINITY, f64::max);
    let (nh, nl) = (high.len() as f64, low.len() as f64);
    let s_hat = (nh * nl / (nh + nl)).sqrt() * sup;
    Ok(DominanceReport {
        split,
        n_high: high.len(),
        n_low: low.len(),
        s_hat,
        p_value: dominance_p_value(s_hat),
        cdf_grid,
    })
}

/// The dominance test on treatment and instrument residualized on controls.
pub fn residual_barrett_donald_test<S: ColumnSource + ?Sized>(
    source: &S,
    treatment: &str,
    instrument: &str,
    controls: &RegressionSpec,
) -> Result<DominanceReport> {
    let frame = residualized_pair(source, treatment, instrument, controls)?;
    barrett_donald_test(&frame, treatment, instrument)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSd {
    pub label: String,
    pub sd: f64,
    pub n_obs: usize,
}

const TARGET: &str = "__residual_target";

/// Standard deviation (n-1 denominator) of the residual of `target` after
/// each control set. All sets use the rows complete for every set, so
/// nested sets give a non-increasing sequence.
pub fn residual_variation<S: ColumnSource + ?Sized>(
    source: &S,
    target: &str,
    control_sets: &[(String, RegressionSpec)],
) -> Result<Vec<ResidualSd>> {
    let n = source.n_rows();
    let mut complete: Vec<bool> = source.column(target)?.iter().map(|v| v.is_finite()).collect();
    for (_, spec) in control_sets {
        let cols: Vec<&str> = spec
            .exogenous
            .iter()
            .map(String::as_str)
            .chain(spec.absorb_fe.as_deref())
            .chain(spec.dummy_fe.as_deref())
            .chain([spec.cluster.as_str()])
            .collect();
        for c in cols {
            for (ok, v) in complete.iter_mut().zip(source.column(c)?) {
                *ok &= v.is_finite();
            }
        }
    }
    let y: Vec<f64> = source
        .column(target)?
        .into_iter()
        .zip(&complete)
        .map(|(v, ok)| if *ok { v } else { f64::NAN })
        .collect();
    let top = Frame::from_columns([(TARGET, y)])?;
    let src = Overlay { base: source, top: &top };
    control_sets
        .iter()
        .map(|(label, spec)| {
            let spec = RegressionSpec {
                endogenous: Vec::new(),
                excluded_instruments: Vec::new(),
                ..spec.with_outcome(TARGET)
            };
            let r = regress::residualize(&spec, &src, &[TARGET])?.pop().unwrap();
            let vals: Vec<f64> = r.into_iter().filter(|v| v.is_finite()).collect();
            let m = vals.len();
            if m < 2 {
                return Err(Error::EmptyTable);
            }
            let mean = vals.iter().sum::<f64>() / m as f64;
            let ss: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum();
            debug_assert_eq!(m, complete.iter().filter(|c| **c).count().min(n));
            Ok(ResidualSd {
                label: label.clone(),
                sd: (ss / (m as f64 - 1.0)).sqrt(),
                n_obs: m,
            })
        })
        .collect()
}
