//! Pairwise homophily instrument: enumerate within-cohort dyads, fit a
//! dyadic Probit of nominations on pairwise distance, and sum predicted
//! nomination probabilities by receiver.

use std::collections::{BTreeMap, HashMap, HashSet};

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::data::{mean_column_name, EdgeList, ObservationTable};
use crate::error::{Error, Result};
use crate::frame::{group_key, ColumnSource, Frame};
use crate::linalg;
use crate::regress::symmetrize;

pub mod columns {
    pub const SENDER: &str = "sender";
    pub const RECEIVER: &str = "receiver";
    pub const SCHOOL: &str = "school";
    pub const GRADE: &str = "grade";
    pub const PAIR_DISTANCE: &str = "pair_distance";
    pub const SENDER_OLDER: &str = "pair_distance_sender_older";
    pub const SENDER_YOUNGER: &str = "pair_distance_sender_younger";
    pub const LABEL: &str = "label";
    pub const PREDICTED_INDEGREE: &str = "pred_indegree";
}

/// Prefix for receiver characteristics copied onto dyads.
pub const RECEIVER_PREFIX: &str = "recv_";

/// Ordered within-cohort pairs. Row `k` is a potential nomination from
/// `sender` to `receiver`; `label` is 1 when it was made.
#[derive(Debug, Clone, PartialEq)]
pub struct DyadTable {
    frame: Frame,
    /// Dyads skipped because a receiver characteristic was missing.
    pub excluded_missing: usize,
    /// Dyads per cohort, before exclusions.
    pub per_cohort: BTreeMap<(i64, i64), usize>,
}

impl DyadTable {
    pub fn len(&self) -> usize {
        self.frame.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self) -> &Frame {
        &self.frame
    }

    /// Write as comma-separated text for inspection.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let names: Vec<&str> = self.frame.names().collect();
        w.write_record(&names)?;
        let cols: Vec<&[f64]> = names.iter().map(|n| self.frame.get(n).unwrap()).collect();
        for i in 0..self.len() {
            w.write_record(cols.iter().map(|c| c[i].to_string()))?;
        }
        w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

impl ColumnSource for DyadTable {
    fn n_rows(&self) -> usize {
        self.frame.n_rows()
    }

    fn column(&self, name: &str) -> Result<Vec<f64>> {
        self.frame.column(name)
    }

    fn has_column(&self, name: &str) -> bool {
        self.frame.has_column(name)
    }
}

/// Enumerate all ordered same-school same-grade pairs.
///
/// `receiver_columns` are copied from the receiver's row as
/// `recv_<name>`; school-grade means (`mean_<name>`) are copied unprefixed
/// since both members share the cohort. Sender characteristics are not
/// included: with the sender's age as a control the pairwise distance has
/// no variation left.
pub fn build_dyads(table: &ObservationTable, edges: &EdgeList, receiver_columns: &[&str]) -> Result<DyadTable> {
    let nominated: HashSet<(i64, i64)> = edges.edges().iter().copied().collect();
    let inds = table.individuals();
    let recv: Vec<(String, Vec<f64>)> = receiver_columns
        .iter()
        .map(|c| {
            let name = if c.starts_with(&mean_column_name("")) {
                c.to_string()
            } else {
                format!("{RECEIVER_PREFIX}{c}")
            };
            Ok((name, table.column(c)?))
        })
        .collect::<Result<_>>()?;

    let mut cols: IndexMap<&str, Vec<f64>> = IndexMap::new();
    for name in [
        columns::SENDER,
        columns::RECEIVER,
        columns::SCHOOL,
        columns::GRADE,
        columns::PAIR_DISTANCE,
        columns::SENDER_OLDER,
        columns::SENDER_YOUNGER,
        columns::LABEL,
    ] {
        cols.insert(name, Vec::new());
    }
    let mut extra: Vec<Vec<f64>> = vec![Vec::new(); recv.len()];
    let mut excluded = 0;
    let mut per_cohort = BTreeMap::new();
    for (key, rows) in table.cohorts() {
        per_cohort.insert(key, rows.len() * (rows.len() - 1));
        for &s in &rows {
            for &r in rows.iter().filter(|&&r| r != s) {
                if recv.iter().any(|(_, v)| !v[r].is_finite()) {
                    excluded += 1;
                    continue;
                }
                let (a_s, a_r) = (inds[s].age, inds[r].age);
                let gap = a_s - a_r;
                let push = |cols: &mut IndexMap<&str, Vec<f64>>, k: &str, v: f64| cols.get_mut(k).unwrap().push(v);
                push(&mut cols, columns::SENDER, inds[s].id as f64);
                push(&mut cols, columns::RECEIVER, inds[r].id as f64);
                push(&mut cols, columns::SCHOOL, key.0 as f64);
                push(&mut cols, columns::GRADE, key.1 as f64);
                push(&mut cols, columns::PAIR_DISTANCE, gap.abs());
                push(&mut cols, columns::SENDER_OLDER, gap.max(0.0));
                push(&mut cols, columns::SENDER_YOUNGER, (-gap).max(0.0));
                let label = nominated.contains(&(inds[s].id, inds[r].id));
                push(&mut cols, columns::LABEL, if label { 1.0 } else { 0.0 });
                for (e, (_, v)) in extra.iter_mut().zip(&recv) {
                    e.push(v[r]);
                }
            }
        }
    }
    if excluded > 0 {
        log::warn!("excluded {excluded} dyads with missing receiver characteristics");
    }
    let n = cols[columns::SENDER].len();
    let mut frame = Frame::new(n);
    for (k, v) in cols {
        frame.insert(k, v)?;
    }
    for ((name, _), v) in recv.iter().zip(extra) {
        frame.insert(name.clone(), v)?;
    }
    Ok(DyadTable {
        frame,
        excluded_missing: excluded,
        per_cohort,
    })
}

/// Probit formula over dyad columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbitSpec {
    pub label: String,
    pub regressors: Vec<String>,
    /// Subset of `regressors` tested jointly by likelihood ratio.
    pub homophily: Vec<String>,
    /// Grouping columns entered as dummy sets (first level dropped).
    pub fixed_effects: Vec<String>,
    pub cluster: Option<String>,
    pub intercept: bool,
    pub max_iterations: usize,
}

impl Default for ProbitSpec {
    fn default() -> Self {
        ProbitSpec {
            label: columns::LABEL.into(),
            regressors: vec![columns::PAIR_DISTANCE.into()],
            homophily: vec![columns::PAIR_DISTANCE.into()],
            fixed_effects: Vec::new(),
            cluster: Some(columns::SCHOOL.into()),
            intercept: true,
            max_iterations: 100,
        }
    }
}

/// How to rebuild the design matrix for prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitDesign {
    pub regressors: Vec<String>,
    /// Dummy sets: grouping column and the non-reference levels.
    pub dummies: Vec<(String, Vec<f64>)>,
    pub intercept: bool,
}

impl ProbitDesign {
    fn from_spec<S: ColumnSource + ?Sized>(spec: &ProbitSpec, source: &S, regressors: &[String]) -> Result<Self> {
        let mut dummies = Vec::new();
        for fe in &spec.fixed_effects {
            let mut levels = source.column(fe)?;
            levels.retain(|v| v.is_finite());
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            let keep = if spec.intercept || !dummies.is_empty() { 1 } else { 0 };
            dummies.push((fe.clone(), levels.into_iter().skip(keep).collect()));
        }
        Ok(ProbitDesign {
            regressors: regressors.to_vec(),
            dummies,
            intercept: spec.intercept,
        })
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = self.regressors.clone();
        for (fe, levels) in &self.dummies {
            names.extend(levels.iter().map(|l| format!("{fe}={l}")));
        }
        if self.intercept {
            names.push(crate::regress::INTERCEPT.into());
        }
        names
    }

    /// Design matrix over the rows where every input is finite.
    pub fn matrix<S: ColumnSource + ?Sized>(&self, source: &S) -> Result<(DMatrix<f64>, Vec<usize>)> {
        let regs: Vec<Vec<f64>> = self.regressors.iter().map(|c| source.column(c)).collect::<Result<_>>()?;
        let fes: Vec<Vec<f64>> = self.dummies.iter().map(|(c, _)| source.column(c)).collect::<Result<_>>()?;
        let n = source.n_rows();
        let rows: Vec<usize> = (0..n)
            .filter(|&i| regs.iter().chain(&fes).all(|c| c[i].is_finite()))
            .collect();
        let k = self.names().len();
        let mut x = DMatrix::zeros(rows.len(), k);
        for (r, &i) in rows.iter().enumerate() {
            let mut j = 0;
            for c in &regs {
                x[(r, j)] = c[i];
                j += 1;
            }
            for ((_, levels), c) in self.dummies.iter().zip(&fes) {
                for l in levels {
                    x[(r, j)] = if c[i] == *l { 1.0 } else { 0.0 };
                    j += 1;
                }
            }
            if self.intercept {
                x[(r, j)] = 1.0;
            }
        }
        Ok((x, rows))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbitFit {
    pub coefficients: IndexMap<String, f64>,
    #[serde(skip)]
    pub vcov: DMatrix<f64>,
    pub standard_errors: Vec<f64>,
    pub log_likelihood: f64,
    /// Likelihood-ratio statistic for the homophily block, with its p-value.
    pub lr_stat_instruments: Option<f64>,
    pub lr_p_value: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_score: f64,
    pub n_obs: usize,
    pub n_clusters: Option<usize>,
    pub design: ProbitDesign,
}

impl ProbitFit {
    pub fn coef(&self, name: &str) -> Result<f64> {
        self.coefficients
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownCoefficient(name.into()))
    }

    pub fn se(&self, name: &str) -> Result<f64> {
        let i = self
            .coefficients
            .get_index_of(name)
            .ok_or_else(|| Error::UnknownCoefficient(name.into()))?;
        Ok(self.standard_errors[i])
    }

    /// Fitted probabilities for every row of `source` (NaN where inputs are missing).
    pub fn predict<S: ColumnSource + ?Sized>(&self, source: &S) -> Result<Vec<f64>> {
        let (x, rows) = self.design.matrix(source)?;
        let beta = DVector::from_iterator(self.coefficients.len(), self.coefficients.values().copied());
        let xb = x * beta;
        let n = normal();
        let mut out = vec![f64::NAN; source.n_rows()];
        for (r, &i) in rows.iter().enumerate() {
            out[i] = n.cdf(xb[r]);
        }
        Ok(out)
    }
}

fn normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// ln Phi(t), accurate in the far left tail.
pub(crate) fn ln_norm_cdf(t: f64) -> f64 {
    if t > -30.0 {
        normal().cdf(t).ln()
    } else {
        // asymptotic series of the Mills ratio
        let t2 = t * t;
        -0.5 * t2 - (-t).ln() - LN_SQRT_2PI + (1.0 - 1.0 / t2 + 3.0 / (t2 * t2)).ln()
    }
}

/// phi(t) / Phi(t).
pub(crate) fn inverse_mills(t: f64) -> f64 {
    if t > -30.0 {
        let n = normal();
        let lnphi = -0.5 * t * t - LN_SQRT_2PI;
        (lnphi - n.cdf(t).ln()).exp()
    } else {
        let t2 = t * t;
        -t / (1.0 - 1.0 / t2 + 3.0 / (t2 * t2))
    }
}

/// Neumaier compensated sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> f64 {
        self.sum + self.comp
    }
}

fn log_likelihood(x: &DMatrix<f64>, sign: &[f64], beta: &DVector<f64>) -> f64 {
    let xb = x * beta;
    let mut acc = CompensatedSum::default();
    for (t, q) in xb.iter().zip(sign) {
        acc.add(ln_norm_cdf(q * t));
    }
    acc.value()
}

/// Score vector, per-row score weights and negative Hessian.
fn derivatives(x: &DMatrix<f64>, sign: &[f64], beta: &DVector<f64>) -> (DVector<f64>, Vec<f64>, DMatrix<f64>) {
    let xb = x * beta;
    let k = x.ncols();
    let mut g = DVector::zeros(k);
    let mut w = Vec::with_capacity(sign.len());
    let mut info = DMatrix::zeros(k, k);
    for (i, q) in sign.iter().enumerate() {
        let t = q * xb[i];
        let lam = inverse_mills(t);
        let gi = q * lam;
        w.push(gi);
        let hi = lam * (lam + t);
        let row = x.row(i);
        for a in 0..k {
            g[a] += gi * row[a];
            let ra = hi * row[a];
            for b in 0..=a {
                info[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            info[(b, a)] = info[(a, b)];
        }
    }
    (g, w, info)
}

struct Mle {
    beta: DVector<f64>,
    ll: f64,
    iterations: usize,
    converged: bool,
    max_score: f64,
    info: DMatrix<f64>,
    weights: Vec<f64>,
}

fn newton(x: &DMatrix<f64>, y: &[f64], max_iterations: usize) -> Result<Mle> {
    let sign: Vec<f64> = y.iter().map(|v| 2.0 * v - 1.0).collect();
    let n = normal();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    // one least-squares step on the linearised index, from the constant fit
    let c0 = n.inverse_cdf(ybar);
    let dens = (-0.5 * c0 * c0 - LN_SQRT_2PI).exp();
    let work = DVector::from_iterator(y.len(), y.iter().map(|v| c0 + (v - ybar) / dens));
    let mut beta = linalg::lstsq(x, &work)?;
    let mut ll = log_likelihood(x, &sign, &beta);
    if !ll.is_finite() {
        beta = DVector::zeros(x.ncols());
        ll = log_likelihood(x, &sign, &beta);
    }
    let mut iterations = 0;
    let mut converged = false;
    let (mut g, mut w, mut info) = derivatives(x, &sign, &beta);
    while iterations < max_iterations {
        if g.amax() <= 1e-8 {
            converged = true;
            break;
        }
        iterations += 1;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => info
                .clone()
                .lu()
                .solve(&g)
                .ok_or_else(|| Error::Separation("singular information matrix".into()))?,
        };
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand = &beta + &step * scale;
            let ll_new = log_likelihood(x, &sign, &cand);
            if ll_new.is_finite() && ll_new >= ll - 1e-12 * ll.abs() {
                accepted = Some((cand, ll_new));
                break;
            }
            scale *= 0.5;
        }
        let Some((cand, ll_new)) = accepted else {
            break;
        };
        let rel = (ll_new - ll).abs() / ll.abs().max(1e-300);
        beta = cand;
        ll = ll_new;
        (g, w, info) = derivatives(x, &sign, &beta);
        if rel <= 1e-12 {
            converged = true;
            break;
        }
    }
    if g.amax() <= 1e-8 {
        converged = true;
    }
    Ok(Mle {
        max_score: g.amax(),
        beta,
        ll,
        iterations,
        converged,
        info,
        weights: w,
    })
}

/// Screen for separation before fitting: any 0/1 regressor whose indicated
/// group has constant labels sends its coefficient to infinity.
fn check_indicator_separation(x: &DMatrix<f64>, y: &[f64], names: &[String]) -> Result<()> {
    for j in 0..x.ncols() {
        let col = x.column(j);
        if names[j] == crate::regress::INTERCEPT || !col.iter().all(|v| *v == 0.0 || *v == 1.0) {
            continue;
        }
        let labels: Vec<f64> = col.iter().zip(y).filter(|(v, _)| **v == 1.0).map(|(_, l)| *l).collect();
        if !labels.is_empty() && (labels.iter().all(|l| *l == 0.0) || labels.iter().all(|l| *l == 1.0)) {
            return Err(Error::Separation(format!(
                "`{}` predicts the label perfectly ({} rows)",
                names[j],
                labels.len()
            )));
        }
    }
    Ok(())
}

fn fit_design(x: &DMatrix<f64>, y: &[f64], names: &[String], max_iterations: usize) -> Result<Mle> {
    check_indicator_separation(x, y, names)?;
    let mle = newton(x, y, max_iterations)?;
    let xb = x * &mle.beta;
    // every row on the correct side of zero means the classes are linearly
    // separable and the likelihood has no maximum
    let all_correct = xb.iter().zip(y).all(|(t, l)| (2.0 * l - 1.0) * t > 0.0);
    if all_correct {
        return Err(Error::Separation("labels are linearly separable by the regressors".into()));
    }
    let at_bound = xb.iter().filter(|t| t.abs() > 8.2).count();
    if at_bound > 0 {
        return Err(Error::Separation(format!(
            "{at_bound} fitted probabilities at machine bounds"
        )));
    }
    if !mle.converged {
        return Err(Error::NoConvergence {
            what: "probit",
            iterations: mle.iterations,
            residual: mle.max_score,
            hint: "",
        });
    }
    Ok(mle)
}

/// Probit maximum likelihood by Newton iterations with step halving.
pub fn probit_fit<S: ColumnSource + ?Sized>(source: &S, spec: &ProbitSpec) -> Result<ProbitFit> {
    for h in &spec.homophily {
        if !spec.regressors.contains(h) {
            return Err(Error::InvalidSpec(format!("homophily column `{h}` is not a regressor")));
        }
    }
    let design = ProbitDesign::from_spec(spec, source, &spec.regressors)?;
    let labels = source.column(&spec.label)?;
    let cluster_col = spec.cluster.as_deref().map(|c| source.column(c)).transpose()?;
    let (x, mut rows) = design.matrix(source)?;
    let keep: Vec<bool> = rows.iter().map(|&i| labels[i].is_finite()).collect();
    let x = if keep.iter().all(|k| *k) {
        x
    } else {
        let idx: Vec<usize> = (0..rows.len()).filter(|&r| keep[r]).collect();
        rows = idx.iter().map(|&r| rows[r]).collect();
        x.select_rows(idx.iter())
    };
    if rows.is_empty() {
        return Err(Error::EmptyTable);
    }
    let y: Vec<f64> = rows.iter().map(|&i| labels[i]).collect();
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidSpec(format!("label `{}` must be 0/1", spec.label)));
    }
    if y.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateLabels(0));
    }
    if y.iter().all(|v| *v == 1.0) {
        return Err(Error::DegenerateLabels(1));
    }
    let names = design.names();
    let mut screen = linalg::RankScreen::new();
    for j in 0..x.ncols() {
        let c = x.column(j).into_owned();
        if !screen.push(&c, c.norm()) {
            return Err(Error::RankDeficient(names[j].clone()));
        }
    }
    let mle = fit_design(&x, &y, &names, spec.max_iterations)?;

    let info_inv = linalg::spd_inverse(&mle.info)?;
    let (vcov, n_clusters) = match &cluster_col {
        None => (info_inv, None),
        Some(c) => {
            let mut sums: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
            for (r, &i) in rows.iter().enumerate() {
                let s = sums.entry(group_key(c[i])).or_insert_with(|| DVector::zeros(x.ncols()));
                s.axpy(mle.weights[r], &x.row(r).transpose(), 1.0);
            }
            let g = sums.len();
            if g < 2 {
                return Err(Error::TooFewClusters(g));
            }
            let mut meat = DMatrix::zeros(x.ncols(), x.ncols());
            for s in sums.values() {
                meat.ger(1.0, s, s, 1.0);
            }
            let gf = g as f64 / (g as f64 - 1.0);
            (symmetrize(&info_inv * meat * &info_inv * gf), Some(g))
        }
    };

    let (lr_stat, lr_p) = if spec.homophily.is_empty() {
        (None, None)
    } else {
        let kept: Vec<usize> = (0..x.ncols())
            .filter(|&j| !spec.homophily.iter().any(|h| *h == names[j]))
            .collect();
        let xr = x.select_columns(kept.iter());
        let names_r: Vec<String> = kept.iter().map(|&j| names[j].clone()).collect();
        let restricted = if xr.ncols() == 0 {
            // constant-free null: every probability one half
            y.len() as f64 * 0.5f64.ln()
        } else {
            fit_design(&xr, &y, &names_r, spec.max_iterations)?.ll
        };
        let lr = (2.0 * (mle.ll - restricted)).max(0.0);
        let chi = ChiSquared::new(spec.homophily.len() as f64).expect("valid chi-squared");
        (Some(lr), Some(chi.sf(lr)))
    };

    let standard_errors = (0..vcov.nrows()).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect();
    Ok(ProbitFit {
        coefficients: names.into_iter().zip(mle.beta.iter().copied()).collect(),
        vcov,
        standard_errors,
        log_likelihood: mle.ll,
        lr_stat_instruments: lr_stat,
        lr_p_value: lr_p,
        converged: mle.converged,
        iterations: mle.iterations,
        max_score: mle.max_score,
        n_obs: rows.len(),
        n_clusters,
        design,
    })
}

/// Sum of fitted nomination probabilities over dyads pointing at each
/// individual, attached as `pred_indegree`. Individuals with no usable dyad
/// get `NaN`.
pub fn predicted_indegree(fit: &ProbitFit, dyads: &DyadTable, table: &ObservationTable) -> Result<ObservationTable> {
    if !fit.converged {
        return Err(Error::InvalidSpec("probit model is not fitted (did not converge)".into()));
    }
    let probs = fit.predict(dyads)?;
    let receivers = dyads.column(columns::RECEIVER)?;
    let mut sums: HashMap<i64, f64> = HashMap::new();
    for (p, r) in probs.iter().zip(&receivers) {
        if p.is_finite() {
            *sums.entry(*r as i64).or_insert(0.0) += p;
        }
    }
    let col = table
        .individuals()
        .iter()
        .map(|i| sums.get(&i.id).copied().unwrap_or(f64::NAN))
        .collect();
    table.clone().with_column(columns::PREDICTED_INDEGREE, col)
}
