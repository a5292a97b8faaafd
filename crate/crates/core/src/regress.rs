//! Linear estimation: OLS and linear IV (2SLS / GMM) with absorbed or dummy
//! fixed effects and one-way cluster-robust covariance.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor, StudentsT};

use crate::error::{Error, Result};
use crate::frame::{group_key, ColumnSource, Frame};
use crate::linalg::{self, RankScreen};

pub const INTERCEPT: &str = "_cons";

/// GMM weighting for IV fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// W = (Z'Z)^-1, i.e. 2SLS.
    #[default]
    TwoSls,
    /// Efficient two-step GMM with a cluster-robust weight matrix.
    TwoStep,
}

/// Declarative model description; columns are referenced by name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSpec {
    pub outcome: String,
    pub endogenous: Vec<String>,
    pub excluded_instruments: Vec<String>,
    pub exogenous: Vec<String>,
    /// Grouping column whose fixed effects are absorbed by demeaning.
    pub absorb_fe: Option<String>,
    /// Grouping column expanded into indicator columns (first level dropped).
    pub dummy_fe: Option<String>,
    pub cluster: String,
    pub weighting: Weighting,
}

impl RegressionSpec {
    pub fn ols(outcome: &str, exogenous: &[&str], cluster: &str) -> Self {
        RegressionSpec {
            outcome: outcome.into(),
            exogenous: exogenous.iter().map(|s| s.to_string()).collect(),
            cluster: cluster.into(),
            ..Default::default()
        }
    }

    pub fn with_absorb(mut self, group: &str) -> Self {
        self.absorb_fe = Some(group.into());
        self
    }

    pub fn with_dummies(mut self, group: &str) -> Self {
        self.dummy_fe = Some(group.into());
        self
    }

    pub fn with_endogenous(mut self, endogenous: &[&str], instruments: &[&str]) -> Self {
        self.endogenous = endogenous.iter().map(|s| s.to_string()).collect();
        self.excluded_instruments = instruments.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Same controls, different outcome.
    pub fn with_outcome(&self, outcome: &str) -> Self {
        RegressionSpec {
            outcome: outcome.into(),
            ..self.clone()
        }
    }

    /// Every column the spec reads.
    pub fn columns(&self) -> Vec<&str> {
        let mut cols = vec![self.outcome.as_str(), self.cluster.as_str()];
        cols.extend(self.endogenous.iter().map(String::as_str));
        cols.extend(self.excluded_instruments.iter().map(String::as_str));
        cols.extend(self.exogenous.iter().map(String::as_str));
        cols.extend(self.absorb_fe.as_deref());
        cols.extend(self.dummy_fe.as_deref());
        cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcome.is_empty() {
            return Err(Error::InvalidSpec("outcome column not set".into()));
        }
        if self.cluster.is_empty() {
            return Err(Error::InvalidSpec("cluster column not set".into()));
        }
        let mut roles: HashMap<String, &str> = HashMap::new();
        let mut claim = |col: &'static str, names: &[String]| -> Result<()> {
            for n in names {
                if let Some(prev) = roles.insert(n.clone(), col) {
                    return Err(Error::InvalidSpec(format!("column `{n}` used as both {prev} and {col}")));
                }
            }
            Ok(())
        };
        let outcome = [self.outcome.clone()];
        claim("outcome", &outcome)?;
        claim("endogenous", &self.endogenous)?;
        claim("instrument", &self.excluded_instruments)?;
        claim("exogenous", &self.exogenous)?;
        for fe in [&self.absorb_fe, &self.dummy_fe].into_iter().flatten() {
            if self.endogenous.contains(fe) || self.exogenous.contains(fe) || *fe == self.outcome {
                return Err(Error::InvalidSpec(format!("fixed-effect column `{fe}` also used as a regressor")));
            }
        }
        if self.excluded_instruments.len() < self.endogenous.len() {
            return Err(Error::Underidentified {
                instruments: self.excluded_instruments.len(),
                endogenous: self.endogenous.len(),
            });
        }
        Ok(())
    }
}

/// Finite-sample factor applied to the clustered meat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmallSample {
    None,
    /// G/(G-1) * (N-1)/(N-K).
    Cluster { n: usize, k: usize },
}

impl SmallSample {
    fn factor(self, g: usize) -> f64 {
        match self {
            SmallSample::None => 1.0,
            SmallSample::Cluster { n, k } => {
                let g = g as f64;
                let (n, k) = (n as f64, k as f64);
                g / (g - 1.0) * (n - 1.0) / (n - k).max(1.0)
            }
        }
    }
}

/// Cluster-robust sandwich `(X'X)^-1 (sum_c X_c'e_c e_c'X_c) (X'X)^-1`.
///
/// For IV fits pass the projected regressors as `x`.
pub fn cluster_vcov(
    x: &DMatrix<f64>,
    resid: &DVector<f64>,
    clusters: &[u64],
    correction: SmallSample,
) -> Result<DMatrix<f64>> {
    let bread = linalg::spd_inverse(&(x.transpose() * x))?;
    let (meat, g) = cluster_meat(x, resid, clusters)?;
    let v = &bread * meat * &bread * correction.factor(g);
    Ok(symmetrize(v))
}

/// Sum over clusters of score outer products, with the cluster count.
pub(crate) fn cluster_meat(x: &DMatrix<f64>, resid: &DVector<f64>, clusters: &[u64]) -> Result<(DMatrix<f64>, usize)> {
    let k = x.ncols();
    let mut sums: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
    for (i, &c) in clusters.iter().enumerate() {
        let s = sums.entry(c).or_insert_with(|| DVector::zeros(k));
        let e = resid[i];
        for j in 0..k {
            s[j] += x[(i, j)] * e;
        }
    }
    if sums.len() < 2 {
        return Err(Error::TooFewClusters(sums.len()));
    }
    let mut meat = DMatrix::zeros(k, k);
    for s in sums.values() {
        meat.ger(1.0, s, s, 1.0);
    }
    Ok((meat, sums.len()))
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ols,
    TwoSls,
    TwoStepGmm,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimator: Estimator,
    pub coefficients: IndexMap<String, f64>,
    pub vcov: DMatrix<f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
    /// Joint F of the excluded instruments in each first stage.
    pub first_stage_f: IndexMap<String, f64>,
    pub residuals: Vec<f64>,
    /// Source rows used in estimation.
    pub sample: Vec<usize>,
    /// Generated columns dropped for collinearity.
    pub omitted: Vec<String>,
    /// Residual degrees of freedom, N - K - absorbed groups.
    pub df_resid: usize,
}

impl FitResult {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.coefficients.keys().map(String::as_str)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.coefficients
            .get_index_of(name)
            .ok_or_else(|| Error::UnknownCoefficient(name.to_string()))
    }

    pub fn coef(&self, name: &str) -> Result<f64> {
        Ok(self.coefficients[self.index(name)?])
    }

    pub fn se(&self, name: &str) -> Result<f64> {
        let i = self.index(name)?;
        Ok(self.vcov[(i, i)].max(0.0).sqrt())
    }

    pub fn t_stat(&self, name: &str) -> Result<f64> {
        Ok(self.coef(name)? / self.se(name)?)
    }

    /// Two-sided p-value from a t distribution with G-1 degrees of freedom.
    pub fn p_value(&self, name: &str) -> Result<f64> {
        Ok(t_p_value(self.t_stat(name)?, self.n_clusters))
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.coefficients.len()).map(|i| self.vcov[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn summary(&self) -> FitSummary {
        let ses = self.standard_errors();
        FitSummary {
            estimator: self.estimator,
            coefficients: self
                .coefficients
                .iter()
                .zip(ses)
                .map(|((name, &estimate), se)| {
                    let t = estimate / se;
                    CoefficientRow {
                        name: name.clone(),
                        estimate,
                        se,
                        t,
                        p: t_p_value(t, self.n_clusters),
                    }
                })
                .collect(),
            first_stage_f: self.first_stage_f.clone(),
            n_obs: self.n_obs,
            n_clusters: self.n_clusters,
            r_squared: self.r_squared,
            omitted: self.omitted.clone(),
        }
    }
}

pub(crate) fn t_p_value(t: f64, n_clusters: usize) -> f64 {
    if !t.is_finite() {
        return if t.is_nan() { f64::NAN } else { 0.0 };
    }
    let df = (n_clusters.saturating_sub(1)).max(1) as f64;
    let dist = StudentsT::new(0.0, 1.0, df).expect("valid t distribution");
    (2.0 * dist.sf(t.abs())).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub p: f64,
}

/// Serializable view of a [`FitResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub estimator: Estimator,
    pub coefficients: Vec<CoefficientRow>,
    pub first_stage_f: IndexMap<String, f64>,
    pub n_obs: usize,
    pub n_clusters: usize,
    pub r_squared: f64,
    pub omitted: Vec<String>,
}

impl fmt::Display for FitSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.coefficients.iter().map(|c| c.name.len()).max().unwrap_or(8).max(8);
        writeln!(
            f,
            "{:<width$} {:>12} {:>12} {:>9} {:>8}",
            "", "coef", "se", "t", "p"
        )?;
        for c in &self.coefficients {
            writeln!(
                f,
                "{:<width$} {:>12.6} {:>12.6} {:>9.3} {:>8.4}",
                c.name, c.estimate, c.se, c.t, c.p
            )?;
        }
        for (name, fstat) in &self.first_stage_f {
            writeln!(f, "first-stage F ({name}): {fstat:.3}")?;
        }
        writeln!(
            f,
            "N = {}, clusters = {}, R2 = {:.4}",
            self.n_obs, self.n_clusters, self.r_squared
        )
    }
}

/// Replace each named column by its deviation from the group mean.
pub fn within_transform<S: ColumnSource + ?Sized>(source: &S, columns: &[&str], group: &str) -> Result<Frame> {
    let groups: Vec<u64> = source.column(group)?.into_iter().map(group_key).collect();
    let mut out = Frame::new(source.n_rows());
    for &c in columns {
        let mut v = source.column(c)?;
        demean_in_place(&mut v, &groups);
        out.insert(c, v)?;
    }
    Ok(out)
}

/// Two-pass group demeaning; groups are given as keys per row.
pub(crate) fn demean_in_place(values: &mut [f64], groups: &[u64]) {
    let mut acc: HashMap<u64, (f64, usize)> = HashMap::new();
    for (v, g) in values.iter().zip(groups) {
        let e = acc.entry(*g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let mut means: HashMap<u64, f64> = acc.iter().map(|(g, (s, n))| (*g, s / *n as f64)).collect();
    // correction pass
    let mut corr: HashMap<u64, f64> = HashMap::new();
    for (v, g) in values.iter().zip(groups) {
        *corr.entry(*g).or_insert(0.0) += v - means[g];
    }
    for (g, c) in corr {
        *means.get_mut(&g).unwrap() += c / acc[&g].1 as f64;
    }
    for (v, g) in values.iter_mut().zip(groups) {
        *v -= means[g];
    }
}

/// Design matrices after missing-row deletion, fixed-effect handling and the
/// collinearity screen.
#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub rows: Vec<usize>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub z: DMatrix<f64>,
    pub n_endog: usize,
    pub n_excluded: usize,
    pub clusters: Vec<u64>,
    pub n_absorbed: usize,
    pub omitted: Vec<String>,
    pub tss: f64,
}

fn fmt_level(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

pub(crate) fn build_design<S: ColumnSource + ?Sized>(spec: &RegressionSpec, source: &S) -> Result<Design> {
    spec.validate()?;
    let cols = spec.columns();
    let data = Frame::gather(source, &cols)?;
    let n_all = source.n_rows();
    let rows: Vec<usize> = (0..n_all)
        .filter(|&i| cols.iter().all(|c| data.get(c).unwrap()[i].is_finite()))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    let pick = |name: &str| -> Vec<f64> {
        let c = data.get(name).unwrap();
        rows.iter().map(|&i| c[i]).collect()
    };
    let n = rows.len();

    // numeric blocks: (name, values, raw norm, user-specified)
    let mut y = pick(&spec.outcome);
    let mut endog: Vec<(String, Vec<f64>)> = spec.endogenous.iter().map(|c| (c.clone(), pick(c))).collect();
    let mut excl: Vec<(String, Vec<f64>)> = spec.excluded_instruments.iter().map(|c| (c.clone(), pick(c))).collect();
    let mut exog: Vec<(String, Vec<f64>)> = spec.exogenous.iter().map(|c| (c.clone(), pick(c))).collect();
    let mut dummies: Vec<(String, Vec<f64>)> = Vec::new();
    if let Some(fe) = &spec.dummy_fe {
        let vals = pick(fe);
        let mut levels: Vec<f64> = vals.clone();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for lvl in levels.iter().skip(1) {
            let ind = vals.iter().map(|v| if v == lvl { 1.0 } else { 0.0 }).collect();
            dummies.push((format!("{fe}={}", fmt_level(*lvl)), ind));
        }
    }
    let clusters: Vec<u64> = pick(&spec.cluster).into_iter().map(group_key).collect();

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let raw_norms: HashMap<String, f64> = endog
        .iter()
        .chain(&excl)
        .chain(&exog)
        .chain(&dummies)
        .map(|(n, v)| (n.clone(), norm(v)))
        .collect();

    let mut n_absorbed = 0;
    let tss;
    if let Some(fe) = &spec.absorb_fe {
        let groups: Vec<u64> = pick(fe).into_iter().map(group_key).collect();
        n_absorbed = groups.iter().collect::<std::collections::HashSet<_>>().len();
        demean_in_place(&mut y, &groups);
        for (_, v) in endog.iter_mut().chain(excl.iter_mut()).chain(exog.iter_mut()).chain(dummies.iter_mut()) {
            demean_in_place(v, &groups);
        }
        tss = y.iter().map(|v| v * v).sum();
    } else {
        let mean = y.iter().sum::<f64>() / n as f64;
        tss = y.iter().map(|v| (v - mean).powi(2)).sum();
        dummies.push((INTERCEPT.to_string(), vec![1.0; n]));
    }

    // collinearity screen
    let mut screen = RankScreen::new();
    let mut omitted = Vec::new();
    let mut controls: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, v) in exog {
        if !screen.push(&linalg::column_vec(&v), raw_norms[&name]) {
            return Err(Error::RankDeficient(name));
        }
        controls.push((name, v));
    }
    for (name, v) in dummies {
        let scale = raw_norms.get(&name).copied().unwrap_or(0.0);
        if screen.push(&linalg::column_vec(&v), scale) {
            controls.push((name, v));
        } else {
            log::warn!("dropping `{name}`: collinear with other regressors");
            omitted.push(name);
        }
    }
    let mut x_screen = screen.clone();
    for (name, v) in &excl {
        if !screen.push(&linalg::column_vec(v), raw_norms[name]) {
            return Err(Error::RankDeficient(name.clone()));
        }
    }
    for (name, v) in &endog {
        if !x_screen.push(&linalg::column_vec(v), raw_norms[name]) {
            return Err(Error::RankDeficient(name.clone()));
        }
    }

    let build = |first: &[(String, Vec<f64>)]| -> DMatrix<f64> {
        let k = first.len() + controls.len();
        let mut m = DMatrix::zeros(n, k);
        for (j, (_, v)) in first.iter().chain(controls.iter()).enumerate() {
            m.set_column(j, &DVector::from_column_slice(v));
        }
        m
    };
    let x = build(&endog);
    let z = build(&excl);
    let x_names = endog.iter().chain(controls.iter()).map(|(n, _)| n.clone()).collect();
    Ok(Design {
        rows,
        y: DVector::from_vec(y),
        x,
        x_names,
        z,
        n_endog: endog.len(),
        n_excluded: excl.len(),
        clusters,
        n_absorbed,
        omitted,
        tss,
    })
}

fn finish(
    design: &Design,
    estimator: Estimator,
    beta: DVector<f64>,
    vcov: DMatrix<f64>,
    first_stage_f: IndexMap<String, f64>,
) -> FitResult {
    let resid = &design.y - &design.x * &beta;
    let ssr = resid.norm_squared();
    let g = design.clusters.iter().collect::<std::collections::HashSet<_>>().len();
    let k = design.x.ncols() + design.n_absorbed;
    FitResult {
        estimator,
        coefficients: design.x_names.iter().cloned().zip(beta.iter().copied()).collect(),
        vcov,
        n_obs: design.rows.len(),
        n_clusters: g,
        r_squared: if design.tss > 0.0 { 1.0 - ssr / design.tss } else { f64::NAN },
        first_stage_f,
        residuals: resid.iter().copied().collect(),
        sample: design.rows.clone(),
        omitted: design.omitted.clone(),
        df_resid: design.rows.len().saturating_sub(k),
    }
}

impl Design {
    fn correction(&self, k: usize) -> SmallSample {
        SmallSample::Cluster {
            n: self.rows.len(),
            k: k + self.n_absorbed,
        }
    }
}

/// Ordinary least squares with clustered covariance. Endogenous and
/// instrument lists are ignored: endogenous columns enter as regressors.
pub fn ols<S: ColumnSource + ?Sized>(spec: &RegressionSpec, source: &S) -> Result<FitResult> {
    let spec = RegressionSpec {
        excluded_instruments: Vec::new(),
        exogenous: spec.endogenous.iter().chain(&spec.exogenous).cloned().collect(),
        endogenous: Vec::new(),
        ..spec.clone()
    };
    let d = build_design(&spec, source)?;
    let beta = linalg::lstsq(&d.x, &d.y)?;
    let resid = &d.y - &d.x * &beta;
    let vcov = cluster_vcov(&d.x, &resid, &d.clusters, d.correction(d.x.ncols()))?;
    Ok(finish(&d, Estimator::Ols, beta, vcov, IndexMap::new()))
}

/// Linear IV by GMM. With the default weighting `W = (Z'Z)^-1` this is 2SLS.
/// Weak identification is reported through `first_stage_f`, never an error.
pub fn iv_gmm<S: ColumnSource + ?Sized>(spec: &RegressionSpec, source: &S) -> Result<FitResult> {
    if spec.endogenous.is_empty() {
        return Err(Error::InvalidSpec("IV estimation needs at least one endogenous regressor".into()));
    }
    let d = build_design(spec, source)?;
    iv_from_design(&d, spec.weighting)
}

pub(crate) fn iv_from_design(d: &Design, weighting: Weighting) -> Result<FitResult> {
    let q = linalg::orthonormal_basis(&d.z);
    let xhat = &q * (q.transpose() * &d.x);
    let mut screen = RankScreen::new();
    for j in 0..xhat.ncols() {
        let col = xhat.column(j).into_owned();
        if !screen.push(&col, d.x.column(j).norm()) {
            return Err(Error::RankDeficient(d.x_names[j].clone()));
        }
    }
    let beta = linalg::lstsq(&xhat, &d.y)?;
    let first_stage_f = first_stage(d)?;
    let k = d.x.ncols();
    match weighting {
        Weighting::TwoSls => {
            let resid = &d.y - &d.x * &beta;
            let vcov = cluster_vcov(&xhat, &resid, &d.clusters, d.correction(k))?;
            Ok(finish(d, Estimator::TwoSls, beta, vcov, first_stage_f))
        }
        Weighting::TwoStep => {
            let resid = &d.y - &d.x * &beta;
            let (s, _) = cluster_meat(&d.z, &resid, &d.clusters)?;
            let w = linalg::spd_inverse(&s)?;
            let zx = d.z.transpose() * &d.x;
            let zy = d.z.transpose() * &d.y;
            let g = zx.transpose() * &w * &zx;
            let g_inv = linalg::spd_inverse(&g)?;
            let beta2 = &g_inv * (zx.transpose() * &w * zy);
            let resid2 = &d.y - &d.x * &beta2;
            let (s2, groups) = cluster_meat(&d.z, &resid2, &d.clusters)?;
            let a = &w * &zx;
            let v = &g_inv * (a.transpose() * s2 * &a) * &g_inv * d.correction(k).factor(groups);
            Ok(finish(d, Estimator::TwoStepGmm, beta2, symmetrize(v), first_stage_f))
        }
    }
}

/// Cluster-robust F of the excluded instruments in each first stage.
fn first_stage(d: &Design) -> Result<IndexMap<String, f64>> {
    let mut out = IndexMap::new();
    if d.n_excluded == 0 {
        return Ok(out);
    }
    let corr = d.correction(d.z.ncols());
    for j in 0..d.n_endog {
        let target = d.x.column(j).into_owned();
        let pi = linalg::lstsq(&d.z, &target)?;
        let resid = &target - &d.z * &pi;
        let v = cluster_vcov(&d.z, &resid, &d.clusters, corr)?;
        let idx: Vec<usize> = (0..d.n_excluded).collect();
        let f = wald_f(&pi, &v, &idx)?;
        out.insert(d.x_names[j].clone(), f);
    }
    Ok(out)
}

fn wald_f(beta: &DVector<f64>, vcov: &DMatrix<f64>, idx: &[usize]) -> Result<f64> {
    let q = idx.len();
    let b = DVector::from_iterator(q, idx.iter().map(|&i| beta[i]));
    let v = DMatrix::from_fn(q, q, |r, c| vcov[(idx[r], idx[c])]);
    let vi = linalg::spd_inverse(&v)?;
    Ok((b.transpose() * vi * &b)[(0, 0)] / q as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointTest {
    pub f: f64,
    pub p_value: f64,
    pub df_num: usize,
    pub df_den: usize,
}

/// Wald F test that the named coefficients are jointly zero, using the fit's
/// clustered covariance; p-value from F(q, G-1).
pub fn joint_f(fit: &FitResult, subset: &[&str]) -> Result<JointTest> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    let idx: Vec<usize> = subset.iter().map(|n| fit.index(n)).collect::<Result<_>>()?;
    let beta = DVector::from_iterator(fit.coefficients.len(), fit.coefficients.values().copied());
    let f = wald_f(&beta, &fit.vcov, &idx)?;
    let df_den = fit.n_clusters.saturating_sub(1).max(1);
    let dist = FisherSnedecor::new(idx.len() as f64, df_den as f64).expect("valid F distribution");
    Ok(JointTest {
        f,
        p_value: dist.sf(f),
        df_num: idx.len(),
        df_den,
    })
}

/// Residuals of each target column after projecting on the controls in
/// `spec` (exogenous columns, fixed effects, intercept). The outcome field of
/// `spec` is ignored. Rows with a missing value in any used column get `NaN`.
pub fn residualize<S: ColumnSource + ?Sized>(
    spec: &RegressionSpec,
    source: &S,
    targets: &[&str],
) -> Result<Vec<Vec<f64>>> {
    let n = source.n_rows();
    // common sample across targets
    let mut frame = Frame::gather(source, targets)?;
    let missing: Vec<bool> = (0..n)
        .map(|i| targets.iter().any(|t| !frame.get(t).unwrap()[i].is_finite()))
        .collect();
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let mut col = frame.get(t).unwrap().to_vec();
        for (v, m) in col.iter_mut().zip(&missing) {
            if *m {
                *v = f64::NAN;
            }
        }
        frame.insert(*t, col)?;
    }
    for t in targets {
        let s = RegressionSpec {
            outcome: t.to_string(),
            endogenous: Vec::new(),
            excluded_instruments: Vec::new(),
            ..spec.clone()
        };
        let merged = Overlay { base: source, top: &frame };
        let d = build_design(&s, &merged)?;
        let beta = linalg::lstsq(&d.x, &d.y)?;
        let resid = &d.y - &d.x * beta;
        let mut col = vec![f64::NAN; n];
        for (r, e) in d.rows.iter().zip(resid.iter()) {
            col[*r] = *e;
        }
        out.push(col);
    }
    Ok(out)
}

/// A source whose columns shadow those of another.
pub(crate) struct Overlay<'a, A: ColumnSource + ?Sized, B: ColumnSource + ?Sized> {
    pub base: &'a A,
    pub top: &'a B,
}

impl<A: ColumnSource + ?Sized, B: ColumnSource + ?Sized> ColumnSource for Overlay<'_, A, B> {
    fn n_rows(&self) -> usize {
        self.base.n_rows()
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        if self.top.has_column(name) {
            self.top.column(name)
        } else {
            self.base.column(name)
        }
    }
}

/// Partialled second-moment matrix of the regressors in `targets` given the
/// controls, `E[K K'] - E[K X'] E[X X']^-1 E[X K']`, together with its inverse.
/// Its inverse maps the covariances of the targets with the error into the
/// OLS bias of their coefficients.
pub fn partialled_moment<S: ColumnSource + ?Sized>(
    controls: &RegressionSpec,
    source: &S,
    targets: &[&str],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let resid = residualize(controls, source, targets)?;
    let k = targets.len();
    let n_rows = source.n_rows();
    let rows: Vec<usize> = (0..n_rows).filter(|&i| resid.iter().all(|c| c[i].is_finite())).collect();
    let n = rows.len() as f64;
    let m = DMatrix::from_fn(k, k, |a, b| rows.iter().map(|&i| resid[a][i] * resid[b][i]).sum::<f64>() / n);
    let inv = linalg::spd_inverse(&m)?;
    Ok((m, inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn within_transform_examples() {
        let f = Frame::from_columns([("x", vec![1.0, 2.0, 3.0]), ("g", vec![1.0, 1.0, 1.0])]).unwrap();
        assert_eq!(within_transform(&f, &["x"], "g").unwrap().get("x").unwrap(), &[-1.0, 0.0, 1.0]);
        let f = Frame::from_columns([("x", vec![1.0, 2.0, 10.0, 20.0]), ("g", vec![1.0, 1.0, 2.0, 2.0])]).unwrap();
        assert_eq!(within_transform(&f, &["x"], "g").unwrap().get("x").unwrap(), &[-0.5, 0.5, -5.0, 5.0]);
        let f = Frame::from_columns([("x", vec![0.1, 0.1, 0.1, 7.0]), ("g", vec![1.0, 1.0, 1.0, 2.0])]).unwrap();
        assert!(within_transform(&f, &["x"], "g").unwrap().get("x").unwrap().iter().all(|v| *v == 0.0));
        assert!(matches!(within_transform(&f, &["nope"], "g"), Err(Error::UnknownColumn(_))));
        assert!(matches!(within_transform(&f, &["x"], "nope"), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn exact_line() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c: Vec<f64> = (0..10).map(|i| (i % 3) as f64).collect();
        let f = Frame::from_columns([("x", x), ("y", y), ("c", c)]).unwrap();
        let fit = ols(&RegressionSpec::ols("y", &["x"], "c"), &f).unwrap();
        assert_abs_diff_eq!(fit.coef(INTERCEPT).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.coef("x").unwrap(), 2.0, epsilon = 1e-12);
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn rank_deficiency_names_column() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let x2: Vec<f64> = x.iter().map(|v| 3.0 * v).collect();
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let c: Vec<f64> = (0..10).map(|i| (i % 3) as f64).collect();
        let f = Frame::from_columns([("x", x), ("x2", x2), ("y", y), ("c", c)]).unwrap();
        let err = ols(&RegressionSpec::ols("y", &["x", "x2"], "c"), &f).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(ref c) if c == "x2"), "{err}");
    }

    #[test]
    fn single_cluster_is_an_error() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| v.cos()).collect();
        let f = Frame::from_columns([("x", x), ("y", y), ("c", vec![1.0; 10])]).unwrap();
        assert!(matches!(ols(&RegressionSpec::ols("y", &["x"], "c"), &f), Err(Error::TooFewClusters(1))));
    }

    #[test]
    fn roles_and_order_condition() {
        let spec = RegressionSpec::ols("y", &["x"], "c").with_endogenous(&["x"], &["z"]);
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));
        let spec = RegressionSpec::ols("y", &["w"], "c").with_endogenous(&["x", "x2"], &["z"]);
        assert!(matches!(spec.validate(), Err(Error::Underidentified { .. })));
    }

    #[test]
    fn zero_residuals_give_zero_vcov() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i * (j + 1)) as f64 + 1.0);
        let e = DVector::zeros(6);
        let v = cluster_vcov(&x, &e, &[1, 1, 2, 2, 3, 3], SmallSample::Cluster { n: 6, k: 2 }).unwrap();
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn three_cluster_sandwich_by_hand() {
        // x = [1, t], residuals e, clusters {0,1},{2,3},{4,5}
        let t = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let e = [0.5, -0.25, 1.0, -1.0, 0.25, 0.75];
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { t[i] });
        let v = cluster_vcov(&x, &DVector::from_column_slice(&e), &[0, 0, 1, 1, 2, 2], SmallSample::None).unwrap();
        // X'X = [[6, 15], [15, 55]], det = 105
        let bread = [[55.0 / 105.0, -15.0 / 105.0], [-15.0 / 105.0, 6.0 / 105.0]];
        // cluster scores u_c = sum x_i e_i
        let u = [[0.25, -0.25], [0.0, -1.0], [1.0, 4.75]];
        let mut meat = [[0.0; 2]; 2];
        for uc in u {
            for a in 0..2 {
                for b in 0..2 {
                    meat[a][b] += uc[a] * uc[b];
                }
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for c in 0..2 {
                    for d in 0..2 {
                        s += bread[a][c] * meat[c][d] * bread[d][b];
                    }
                }
                assert_abs_diff_eq!(v[(a, b)], s, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn singleton_clusters_match_hc0_up_to_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let x = DMatrix::from_fn(n, 3, |_, _| rng.random::<f64>());
        let e = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let ids: Vec<u64> = (0..n as u64).collect();
        let v = cluster_vcov(&x, &e, &ids, SmallSample::None).unwrap();
        let bread = (x.transpose() * &x).try_inverse().unwrap();
        let mut meat = DMatrix::zeros(3, 3);
        for i in 0..n {
            let xi = x.row(i).transpose();
            meat += &xi * xi.transpose() * e[i] * e[i];
        }
        let hc0 = &bread * meat * &bread;
        assert!((v - hc0).abs().max() < 1e-12);
    }

    #[test]
    fn joint_f_single_coefficient_is_t_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().zip(&w).map(|(a, b)| 0.3 * a - b + rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..n).map(|i| (i % 20) as f64).collect();
        let f = Frame::from_columns([("x", x), ("w", w), ("y", y), ("c", c)]).unwrap();
        let fit = ols(&RegressionSpec::ols("y", &["x", "w"], "c"), &f).unwrap();
        let jt = joint_f(&fit, &["x"]).unwrap();
        assert_abs_diff_eq!(jt.f, fit.t_stat("x").unwrap().powi(2), epsilon = 1e-10);
        assert!(matches!(joint_f(&fit, &[]), Err(Error::EmptySubset)));
        assert!(matches!(joint_f(&fit, &["nope"]), Err(Error::UnknownCoefficient(_))));
    }

    #[test]
    fn dominant_coefficient_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 300;
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let y: Vec<f64> = x.iter().map(|a| 10.0 * a + rng.random::<f64>()).collect();
        let c: Vec<f64> = (0..n).map(|i| (i % 30) as f64).collect();
        let f = Frame::from_columns([("x", x), ("y", y), ("c", c)]).unwrap();
        let fit = ols(&RegressionSpec::ols("y", &["x"], "c"), &f).unwrap();
        assert!(joint_f(&fit, &["x"]).unwrap().p_value < 1e-6);
    }

    #[test]
    fn dummy_fe_levels_and_intercept() {
        let g = vec![7.0, 7.0, 8.0, 8.0, 9.0, 9.0];
        let x = vec![1.0, 2.0, 3.0, 5.0, 4.0, 8.0];
        let y = vec![1.0, 2.5, 3.0, 4.0, 2.0, 7.0];
        let c = vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0];
        let f = Frame::from_columns([("g", g), ("x", x), ("y", y), ("c", c)]).unwrap();
        let fit = ols(&RegressionSpec::ols("y", &["x"], "c").with_dummies("g"), &f).unwrap();
        let names: Vec<&str> = fit.names().collect();
        assert_eq!(names, vec!["x", "g=8", "g=9", INTERCEPT]);
    }
}
