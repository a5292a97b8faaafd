//! The estimation sequence run on one dataset: derived columns, first
//! stage, reduced form, OLS, IV, calibrated IV and bounds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bounds::{estimate_bounds, BoundSpec, BoundSummary};
use crate::data::{self, compute_age_distance, compute_cohort_means, compute_degree_measures, EdgeList, ObservationTable};
use crate::error::{Error, Result};
use crate::frame::{ColumnSource, Frame};
use crate::regress::{self, FitSummary, Overlay, RegressionSpec};
use crate::sim::Truth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub outcome: String,
    pub education: String,
    pub friends: String,
    pub instrument: String,
    pub controls: Vec<String>,
    /// Columns whose school-grade means are added as controls.
    pub cohort_means: Vec<String>,
    pub absorb: Option<String>,
    pub dummies: Option<String>,
    pub cluster: String,
    pub r_lower: f64,
    pub r_upper: f64,
    pub alpha: f64,
    /// Education return imposed in the calibrated IV; midpoint of the
    /// range when absent.
    pub calibrated_return: Option<f64>,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            outcome: "outcome".into(),
            education: "education".into(),
            friends: data::columns::GRADE_INDEGREE.into(),
            instrument: data::columns::AGE_DISTANCE.into(),
            controls: vec!["age".into()],
            cohort_means: Vec::new(),
            absorb: Some(data::COHORT.into()),
            dummies: None,
            cluster: "school".into(),
            r_lower: 0.05,
            r_upper: 0.15,
            alpha: 0.05,
            calibrated_return: None,
        }
    }
}

impl EstimationConfig {
    fn control_names(&self) -> Vec<String> {
        self.controls
            .iter()
            .cloned()
            .chain(self.cohort_means.iter().map(|c| data::mean_column_name(c)))
            .collect()
    }

    /// The bound regression: outcome on instrumented friends and controls.
    pub fn base_spec(&self) -> RegressionSpec {
        let controls = self.control_names();
        let controls: Vec<&str> = controls.iter().map(String::as_str).collect();
        let mut spec = RegressionSpec::ols(&self.outcome, &controls, &self.cluster)
            .with_endogenous(&[&self.friends], &[&self.instrument]);
        spec.absorb_fe = self.absorb.clone();
        spec.dummy_fe = self.dummies.clone();
        spec
    }

    pub fn bound_spec(&self) -> BoundSpec {
        BoundSpec {
            r_lower: self.r_lower,
            r_upper: self.r_upper,
            alpha: self.alpha,
            ..BoundSpec::new(self.base_spec(), &self.education)
        }
    }

    /// Every column the estimation reads, after derivation.
    pub fn required_columns(&self) -> Vec<String> {
        let mut cols = vec![
            self.outcome.clone(),
            self.education.clone(),
            self.friends.clone(),
            self.instrument.clone(),
            self.cluster.clone(),
        ];
        cols.extend(self.control_names());
        cols.extend(self.absorb.iter().cloned());
        cols.extend(self.dummies.iter().cloned());
        cols
    }
}

/// Add degree measures, age distances and cohort means the config refers
/// to but the table lacks, then check every needed column exists.
pub fn prepare(table: &ObservationTable, edges: Option<&EdgeList>, cfg: &EstimationConfig) -> Result<ObservationTable> {
    let mut t = table.clone();
    let degree = [
        data::columns::GRADE_INDEGREE,
        data::columns::SCHOOL_INDEGREE,
        data::columns::INDEGREE,
        data::columns::OUTDEGREE,
        data::columns::RECIPROCATED,
        data::columns::NETWORK_SIZE,
    ];
    let needs = |t: &ObservationTable, name: &str| cfg.required_columns().iter().any(|c| c == name) && !t.has_column(name);
    if degree.iter().any(|c| needs(&t, c)) {
        let edges = edges.ok_or_else(|| Error::InvalidSpec("degree measures need an edge list".into()))?;
        t = compute_degree_measures(&t, edges)?;
    }
    if [
        data::columns::AGE_DISTANCE,
        data::columns::AGE_DISTANCE_OLDER,
        data::columns::AGE_DISTANCE_YOUNGER,
    ]
    .iter()
    .any(|c| needs(&t, c))
    {
        t = compute_age_distance(&t)?;
    }
    if !cfg.cohort_means.is_empty() {
        let cols: Vec<&str> = cfg.cohort_means.iter().map(String::as_str).collect();
        t = compute_cohort_means(&t, &cols)?;
    }
    for c in cfg.required_columns() {
        if !t.has_column(&c) {
            return Err(Error::UnknownColumn(c));
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub fit: FitSummary,
    pub instrument_coef: f64,
    pub instrument_se: f64,
    pub instrument_t: f64,
    pub instrument_p: f64,
    /// Cluster-robust F on the excluded instrument.
    pub f_stat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthComparison {
    pub return_education: f64,
    pub return_friends: f64,
    pub within_education_range: bool,
    pub in_bounds: bool,
    pub in_ci: bool,
    pub ols_error: f64,
    pub calibrated_error: f64,
}

/// OLS error of the education and friendship coefficients split by the
/// covariance of the structural residual with each regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasDecomposition {
    /// Covariances of the partialled regressors with the residual.
    pub cov_education: f64,
    pub cov_friends: f64,
    /// Implied OLS bias in the friendship coefficient from each covariance.
    pub friends_from_education: f64,
    pub friends_from_friends: f64,
    pub implied_friends_bias: f64,
    pub implied_education_bias: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub n_obs: usize,
    pub first_stage: FirstStage,
    pub reduced_form: FitSummary,
    pub ols: FitSummary,
    pub iv: FitSummary,
    pub calibrated_return: f64,
    pub calibrated_iv: FitSummary,
    pub bounds: BoundSummary,
    pub truth: Option<TruthComparison>,
    pub bias: Option<BiasDecomposition>,
}

impl EstimationReport {
    pub fn friends_coef(summary: &FitSummary, name: &str) -> Option<f64> {
        summary.coefficients.iter().find(|c| c.name == name).map(|c| c.estimate)
    }
}

const CALIBRATED: &str = "__calibrated_outcome";
const STRUCTURAL_RESIDUAL: &str = "__structural_residual";

/// Run the full sequence on a prepared table.
pub fn estimate<S: ColumnSource + ?Sized + Sync>(
    source: &S,
    cfg: &EstimationConfig,
    truth: Option<&Truth>,
) -> Result<EstimationReport> {
    let base = cfg.base_spec();
    base.validate()?;
    let bspec = cfg.bound_spec();
    bspec.validate()?;

    let mut fs_spec = base.with_outcome(&cfg.friends);
    fs_spec.endogenous.clear();
    fs_spec.excluded_instruments.clear();
    fs_spec.exogenous.insert(0, cfg.instrument.clone());
    let fs = regress::ols(&fs_spec, source)?;

    let rf_spec = fs_spec.with_outcome(&cfg.outcome);
    let rf = regress::ols(&rf_spec, source)?;

    let mut ols_spec = base.clone();
    ols_spec.endogenous.clear();
    ols_spec.excluded_instruments.clear();
    ols_spec.exogenous.splice(0..0, [cfg.education.clone(), cfg.friends.clone()]);
    let ols = regress::ols(&ols_spec, source)?;

    let mut iv_spec = base.clone();
    iv_spec.exogenous.insert(0, cfg.education.clone());
    let iv = regress::iv_gmm(&iv_spec, source)?;

    let r_cal = cfg.calibrated_return.unwrap_or(0.5 * (cfg.r_lower + cfg.r_upper));
    let y = source.column(&cfg.outcome)?;
    let e = source.column(&cfg.education)?;
    let adjusted: Vec<f64> = y.iter().zip(&e).map(|(y, e)| y - r_cal * e).collect();
    let top = Frame::from_columns([(CALIBRATED, adjusted)])?;
    let cal = regress::iv_gmm(&base.with_outcome(CALIBRATED), &Overlay { base: source, top: &top })?;

    let bounds = estimate_bounds(&bspec, source)?;
    let fb = bounds
        .get(&cfg.friends)
        .ok_or_else(|| Error::UnknownCoefficient(cfg.friends.clone()))?
        .clone();

    let (truth_cmp, bias) = match truth {
        None => (None, None),
        Some(t) => {
            let ols_f = ols.coef(&cfg.friends)?;
            let cmp = TruthComparison {
                return_education: t.return_education,
                return_friends: t.return_friends,
                within_education_range: cfg.r_lower <= t.return_education && t.return_education <= cfg.r_upper,
                in_bounds: fb.contains(t.return_friends),
                in_ci: fb.ci_contains(t.return_friends),
                ols_error: ols_f - t.return_friends,
                calibrated_error: cal.coef(&cfg.friends)? - t.return_friends,
            };
            (Some(cmp), Some(bias_decomposition(source, cfg, &ols_spec, t)?))
        }
    };

    Ok(EstimationReport {
        n_obs: iv.n_obs,
        first_stage: FirstStage {
            instrument_coef: fs.coef(&cfg.instrument)?,
            instrument_se: fs.se(&cfg.instrument)?,
            instrument_t: fs.t_stat(&cfg.instrument)?,
            instrument_p: fs.p_value(&cfg.instrument)?,
            f_stat: iv.first_stage_f.get(&cfg.friends).copied().unwrap_or(f64::NAN),
            fit: fs.summary(),
        },
        reduced_form: rf.summary(),
        ols: ols.summary(),
        iv: iv.summary(),
        calibrated_return: r_cal,
        calibrated_iv: cal.summary(),
        bounds: bounds.summary(),
        truth: truth_cmp,
        bias,
    })
}

fn bias_decomposition<S: ColumnSource + ?Sized>(
    source: &S,
    cfg: &EstimationConfig,
    ols_spec: &RegressionSpec,
    truth: &Truth,
) -> Result<BiasDecomposition> {
    let y = source.column(&cfg.outcome)?;
    let e = source.column(&cfg.education)?;
    let f = source.column(&cfg.friends)?;
    let u: Vec<f64> = (0..y.len())
        .map(|i| y[i] - truth.return_education * e[i] - truth.return_friends * f[i])
        .collect();
    let top = Frame::from_columns([(STRUCTURAL_RESIDUAL, u)])?;
    let src = Overlay { base: source, top: &top };
    let controls = RegressionSpec {
        exogenous: ols_spec.exogenous[2..].to_vec(),
        ..ols_spec.with_outcome(STRUCTURAL_RESIDUAL)
    };
    let targets = [cfg.education.as_str(), cfg.friends.as_str(), STRUCTURAL_RESIDUAL];
    let res = regress::residualize(&controls, &src, &targets)?;
    let rows: Vec<usize> = (0..y.len()).filter(|&i| res.iter().all(|c| c[i].is_finite())).collect();
    let n = rows.len() as f64;
    let cov = |a: usize, b: usize| rows.iter().map(|&i| res[a][i] * res[b][i]).sum::<f64>() / n;
    let moment = nalgebra::DMatrix::from_row_slice(2, 2, &[cov(0, 0), cov(0, 1), cov(1, 0), cov(1, 1)]);
    let minv = crate::linalg::spd_inverse(&moment)?;
    let (ce, cf) = (cov(0, 2), cov(1, 2));
    Ok(BiasDecomposition {
        cov_education: ce,
        cov_friends: cf,
        friends_from_education: minv[(1, 0)] * ce,
        friends_from_friends: minv[(1, 1)] * cf,
        implied_friends_bias: minv[(1, 0)] * ce + minv[(1, 1)] * cf,
        implied_education_bias: minv[(0, 0)] * ce + minv[(0, 1)] * cf,
    })
}

impl fmt::Display for EstimationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "== First stage ==")?;
        write!(f, "{}", self.first_stage.fit)?;
        writeln!(f, "excluded-instrument F: {:.2}", self.first_stage.f_stat)?;
        writeln!(f, "\n== Reduced form ==")?;
        write!(f, "{}", self.reduced_form)?;
        writeln!(f, "\n== OLS ==")?;
        write!(f, "{}", self.ols)?;
        writeln!(f, "\n== IV (education exogenous) ==")?;
        write!(f, "{}", self.iv)?;
        writeln!(f, "\n== Calibrated IV (education return {}) ==", self.calibrated_return)?;
        write!(f, "{}", self.calibrated_iv)?;
        writeln!(f, "\n== Bounds ==")?;
        write!(f, "{}", self.bounds)?;
        if let Some(t) = &self.truth {
            writeln!(f, "\n== Truth ==")?;
            writeln!(
                f,
                "r_e {} (inside range: {}), r_f {}: in bounds {}, in CI {}, OLS error {:.4}, calibrated IV error {:.4}",
                t.return_education, t.within_education_range, t.return_friends, t.in_bounds, t.in_ci, t.ols_error, t.calibrated_error
            )?;
        }
        if let Some(b) = &self.bias {
            writeln!(
                f,
                "OLS bias in friends: {:.4} (via education {:.4}, via friends {:.4})",
                b.implied_friends_bias, b.friends_from_education, b.friends_from_friends
            )?;
        }
        Ok(())
    }
}
