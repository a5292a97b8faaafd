//! Synthetic data with known returns.
//!
//! Each student splits a unit of time between studying `H`, socializing `S`
//! and leisure `L = 1 - S - H`, and maximizes
//!
//! ```text
//! v_i log S + w_i log L - k H + r_e a_i(H) + r_f E[F_i]
//! ```
//!
//! where `a_i(H) = A_i sqrt(H)` is education production and `E[F_i]` the
//! expected number of nominations received. A nomination from `j` to `i`
//! happens with probability `min(cap, c_ij sqrt(S_i S_j))`, where
//! `c_ij = gamma exp(-delta |age_i - age_j|) (1 + theta_x x_i)` falls with age
//! distance and rises with the receiver's extroversion `x_i`. Students best
//! respond to peers' socializing; the cohort equilibrium is a fixed point.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{compute_age_distance, columns as data_cols, EdgeList, Individual, ObservationTable};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreferenceParams {
    /// log of the socializing taste is N(mean, sd^2)
    pub social_log_mean: f64,
    pub social_log_sd: f64,
    pub leisure_log_mean: f64,
    pub leisure_log_sd: f64,
    /// Extra socializing taste per unit of extroversion.
    pub social_extroversion: f64,
    /// Linear utility cost of studying time.
    pub study_cost: f64,
}

impl Default for PreferenceParams {
    fn default() -> Self {
        PreferenceParams {
            social_log_mean: -1.4,
            social_log_sd: 0.5,
            leisure_log_mean: -1.2,
            leisure_log_sd: 0.3,
            social_extroversion: 0.1,
            study_cost: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EducationParams {
    pub base: f64,
    pub iq: f64,
    pub shock_sd: f64,
}

impl Default for EducationParams {
    fn default() -> Self {
        EducationParams {
            base: 20.0,
            iq: 2.0,
            shock_sd: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkParams {
    pub scale: f64,
    /// Decay per year of age difference.
    pub decay: f64,
    pub extroversion: f64,
    pub cap: f64,
    /// Link exactly when the probability is at least one half.
    pub deterministic: bool,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            scale: 1.0,
            decay: 1.5,
            extroversion: 0.5,
            cap: 0.95,
            deterministic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarningsParams {
    pub intercept: f64,
    pub iq: f64,
    pub shock_sd: f64,
    /// Correlation of the earnings shock with the normal behind the
    /// socializing taste.
    pub corr_social: f64,
    /// Same, for the leisure taste.
    pub corr_leisure: f64,
}

impl Default for EarningsParams {
    fn default() -> Self {
        EarningsParams {
            intercept: 8.0,
            iq: 0.1,
            shock_sd: 0.5,
            corr_social: 0.0,
            corr_leisure: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgeParams {
    /// Each cohort draws its age spread uniformly from this range (years).
    pub spread_min: f64,
    pub spread_max: f64,
    /// Probability of being a year older than the grade norm.
    pub held_back: f64,
}

impl Default for AgeParams {
    fn default() -> Self {
        AgeParams {
            spread_min: 0.6,
            spread_max: 1.4,
            held_back: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub damping: f64,
    pub max_sweeps: usize,
    /// Stop when no agent's socializing moves by more than this.
    pub tolerance: f64,
    pub max_newton: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            damping: 0.5,
            max_sweeps: 500,
            tolerance: 1e-8,
            max_newton: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub schools: usize,
    pub grades: Vec<i64>,
    pub cohort_size_min: usize,
    pub cohort_size_max: usize,
    pub return_education: f64,
    pub return_friends: f64,
    pub preferences: PreferenceParams,
    pub education: EducationParams,
    pub links: LinkParams,
    pub earnings: EarningsParams,
    pub ages: AgeParams,
    pub solver: SolverParams,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            schools: 25,
            grades: vec![9, 10, 11, 12],
            cohort_size_min: 16,
            cohort_size_max: 24,
            return_education: 0.10,
            return_friends: 0.10,
            preferences: PreferenceParams::default(),
            education: EducationParams::default(),
            links: LinkParams::default(),
            earnings: EarningsParams::default(),
            ages: AgeParams::default(),
            solver: SolverParams::default(),
        }
    }
}

/// Relative slack for deciding a probability sits exactly at the cap.
const KINK_TOL: f64 = 1e-12;

/// Best-response first-order-condition tolerance.
pub const BR_TOL: f64 = 1e-10;

/// Largest |iq| drawn; keeps education productivity positive.
pub const IQ_BOUND: f64 = 3.0;

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.schools == 0 || self.grades.is_empty() {
            return bad("need at least one school and one grade".into());
        }
        if let Some(g) = self.grades.iter().find(|g| !crate::data::GRADES.contains(g)) {
            return bad(format!("grade {g} outside 7..=12"));
        }
        if self.cohort_size_min < 2 {
            return bad(format!("cohort size must be at least 2, got {}", self.cohort_size_min));
        }
        if self.cohort_size_max < self.cohort_size_min || self.cohort_size_max > 999 {
            return bad("cohort_size_max must lie in [cohort_size_min, 999]".into());
        }
        if !(self.return_education.is_finite() && self.return_education > 0.0) {
            return bad("return_education must be positive for an interior study choice".into());
        }
        if !self.return_friends.is_finite() || self.return_friends < 0.0 {
            return bad("return_friends must be finite and non-negative".into());
        }
        let p = &self.preferences;
        if p.social_log_sd < 0.0 || p.leisure_log_sd < 0.0 || p.social_extroversion < 0.0 || p.study_cost < 0.0 {
            return bad("preference dispersions, extroversion taste and study cost must be non-negative".into());
        }
        let e = &self.education;
        if e.base - IQ_BOUND * e.iq.abs() <= 0.0 || e.shock_sd < 0.0 {
            return bad("education productivity must stay positive over the iq range".into());
        }
        let l = &self.links;
        if l.scale <= 0.0 || l.decay <= 0.0 || l.extroversion < 0.0 || !(0.0 < l.cap && l.cap <= 1.0) {
            return bad("link scale and decay must be positive, cap in (0, 1]".into());
        }
        let w = &self.earnings;
        if w.shock_sd < 0.0 || w.corr_social.powi(2) + w.corr_leisure.powi(2) > 1.0 {
            return bad("earnings shock correlations must satisfy corr_social^2 + corr_leisure^2 <= 1".into());
        }
        let a = &self.ages;
        if a.spread_min < 0.0 || a.spread_max < a.spread_min || !(0.0..=1.0).contains(&a.held_back) {
            return bad("age spread range or held-back probability invalid".into());
        }
        let s = &self.solver;
        if !(s.damping > 0.0 && s.damping <= 1.0) || s.tolerance <= 0.0 || s.max_sweeps == 0 {
            return bad("damping must lie in (0, 1], tolerance positive, max_sweeps positive".into());
        }
        Ok(())
    }
}

/// One student's endowments and private shocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub iq: f64,
    pub extroversion: f64,
    pub age: f64,
    pub school: i64,
    pub grade: i64,
    /// Taste for socializing, including the extroversion term.
    pub upsilon: f64,
    pub omega: f64,
    pub xi: f64,
    pub epsilon: f64,
}

/// Agents sharing a school and grade, with pairwise link factors.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub agents: Vec<AgentParams>,
    /// `factor[i][j]` scales the probability that `j` nominates `i`.
    pub factor: Vec<Vec<f64>>,
    r_e: f64,
    r_f: f64,
    study_cost: f64,
    productivity: Vec<f64>,
    cap: f64,
}

impl Cohort {
    pub fn new(agents: Vec<AgentParams>, config: &SimConfig) -> Result<Self> {
        if agents.len() < 2 {
            return Err(Error::InvalidConfig(format!("cohort of size {} (need 2)", agents.len())));
        }
        let l = &config.links;
        let factor = agents
            .iter()
            .map(|a| {
                agents
                    .iter()
                    .map(|b| l.scale * (-l.decay * (a.age - b.age).abs()).exp() * (1.0 + l.extroversion * a.extroversion))
                    .collect()
            })
            .collect();
        let productivity = agents.iter().map(|a| config.education.base + config.education.iq * a.iq).collect();
        Ok(Cohort {
            agents,
            factor,
            r_e: config.return_education,
            r_f: config.return_friends,
            study_cost: config.preferences.study_cost,
            productivity,
            cap: l.cap,
        })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    /// Probability that `j` nominates `i`.
    pub fn link_probability(&self, i: usize, j: usize, s: &[f64]) -> f64 {
        if i == j {
            return 0.0;
        }
        (self.factor[i][j] * (s[i] * s[j]).sqrt()).min(self.cap)
    }

    /// Sums of `c_ij sqrt(S_j)` over senders whose nomination probability
    /// is still below the cap, just left and just right of `si`. They
    /// differ only when some probability sits exactly at the cap.
    fn social_pull(&self, i: usize, si: f64, s: &[f64]) -> (f64, f64) {
        let mut left = 0.0;
        let mut right = 0.0;
        for j in (0..self.len()).filter(|&j| j != i) {
            let m = self.factor[i][j] * s[j].sqrt();
            let q = m * si.sqrt();
            if q <= self.cap * (1.0 + KINK_TOL) {
                left += m;
            }
            if q < self.cap * (1.0 - KINK_TOL) {
                right += m;
            }
        }
        (left, right)
    }

    fn objective(&self, i: usize, si: f64, hi: f64, s: &[f64]) -> f64 {
        let a = &self.agents[i];
        let li = 1.0 - si - hi;
        let friends: f64 = (0..self.len())
            .filter(|&j| j != i)
            .map(|j| (self.factor[i][j] * (si * s[j]).sqrt()).min(self.cap))
            .sum();
        a.upsilon * si.ln() + a.omega * li.ln() - self.study_cost * hi
            + self.r_e * self.productivity[i] * hi.sqrt()
            + self.r_f * friends
    }

    /// One-sided derivatives of the objective in `S` (left, right).
    fn social_slopes(&self, i: usize, si: f64, hi: f64, s: &[f64]) -> (f64, f64) {
        let a = &self.agents[i];
        let li = 1.0 - si - hi;
        let (ml, mr) = self.social_pull(i, si, s);
        let base = a.upsilon / si - a.omega / li;
        let k = self.r_f / (2.0 * si.sqrt());
        (base + k * ml, base + k * mr)
    }

    fn study_slope(&self, i: usize, si: f64, hi: f64) -> f64 {
        let li = 1.0 - si - hi;
        self.r_e * self.productivity[i] / (2.0 * hi.sqrt()) - self.study_cost - self.agents[i].omega / li
    }

    /// First-order conditions `(dV/dS, dV/dH)` for agent `i` at `(si, hi)`,
    /// others fixed at `s`. Where a nomination probability sits at its cap
    /// the objective has a kink in `S`; the first component is then the
    /// distance of zero from the interval between the one-sided derivatives.
    pub fn foc(&self, i: usize, si: f64, hi: f64, s: &[f64]) -> (f64, f64) {
        let (left, right) = self.social_slopes(i, si, hi, s);
        let gs = if right > 0.0 {
            right
        } else if left < 0.0 {
            left
        } else {
            0.0
        };
        (gs, self.study_slope(i, si, hi))
    }

    /// Optimal `(S_i, H_i)` given the others' socializing. Damped Newton
    /// with a feasibility-preserving line search, falling back to
    /// bisection on `S` with `H` profiled out when Newton stalls at a kink.
    pub fn best_response(&self, i: usize, s: &[f64], start: (f64, f64), max_iter: usize) -> Result<(f64, f64)> {
        if let Some(found) = self.newton_response(i, s, start, max_iter) {
            return Ok(found);
        }
        let (si, hi) = self.profiled_response(i, s);
        let (gs, gh) = self.foc(i, si, hi, s);
        let resid = gs.abs().max(gh.abs());
        if resid <= BR_TOL {
            return Ok((si, hi));
        }
        Err(Error::NoConvergence {
            what: "best response",
            iterations: max_iter,
            residual: resid,
            hint: "",
        })
    }

    fn newton_response(&self, i: usize, s: &[f64], start: (f64, f64), max_iter: usize) -> Option<(f64, f64)> {
        let a = &self.agents[i];
        let (mut si, mut hi) = start;
        if !(si > 0.0 && hi > 0.0 && si + hi < 1.0) {
            (si, hi) = (1.0 / 3.0, 1.0 / 3.0);
        }
        for _ in 0..max_iter {
            let (gs, gh) = self.foc(i, si, hi, s);
            if gs.abs().max(gh.abs()) <= BR_TOL {
                return Some((si, hi));
            }
            let li = 1.0 - si - hi;
            let (_, m) = self.social_pull(i, si, s);
            let wl = a.omega / (li * li);
            let hss = -a.upsilon / (si * si) - self.r_f * m / (4.0 * si.powf(1.5)) - wl;
            let hhh = -self.r_e * self.productivity[i] / (4.0 * hi.powf(1.5)) - wl;
            let hsh = -wl;
            let det = hss * hhh - hsh * hsh;
            let ds = -(hhh * gs - hsh * gh) / det;
            let dh = -(hss * gh - hsh * gs) / det;
            let v0 = self.objective(i, si, hi, s);
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let (ns, nh) = (si + step * ds, hi + step * dh);
                if ns > 0.0 && nh > 0.0 && ns + nh < 1.0 && self.objective(i, ns, nh, s) >= v0 - 1e-14 * v0.abs().max(1.0) {
                    (si, hi) = (ns, nh);
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                return None;
            }
        }
        None
    }

    /// Optimal study time for fixed socializing: the study slope falls from
    /// +inf to -inf on (0, 1 - S), so bisect then polish.
    fn study_given_social(&self, i: usize, si: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0 - si);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.study_slope(i, si, mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Bisection on the (monotone) profiled derivative in `S`.
    fn profiled_response(&self, i: usize, s: &[f64]) -> (f64, f64) {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let h = self.study_given_social(i, mid);
            let (left, right) = self.social_slopes(i, mid, h, s);
            if right > 0.0 {
                lo = mid;
            } else if left < 0.0 {
                hi = mid;
            } else {
                return (mid, h);
            }
        }
        // the root sits between adjacent floats; pick the side with the
        // smaller slope
        let pick = |x: f64| {
            let h = self.study_given_social(i, x);
            let (gs, gh) = self.foc(i, x, h, s);
            (gs.abs().max(gh.abs()), x, h)
        };
        let (a, b) = (pick(lo.max(f64::MIN_POSITIVE)), pick(hi));
        if a.0 <= b.0 {
            (a.1, a.2)
        } else {
            (b.1, b.2)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumState {
    pub social: Vec<f64>,
    pub study: Vec<f64>,
    pub leisure: Vec<f64>,
    pub iterations: usize,
    /// Largest first-order-condition residual at the returned profile.
    pub max_residual: f64,
}

/// Residual target after the fixed point has settled.
const POLISH_RESIDUAL: f64 = 1e-9;

/// Damped simultaneous best-response iteration from S = H = 1/3.
pub fn find_equilibrium(cohort: &Cohort, solver: &SolverParams) -> Result<EquilibriumState> {
    let n = cohort.len();
    if n < 2 {
        return Err(Error::InvalidConfig("cohort size must be at least 2".into()));
    }
    let mut s = vec![1.0 / 3.0; n];
    let mut h = vec![1.0 / 3.0; n];
    let lambda = solver.damping;
    let mut last_change = f64::INFINITY;
    for sweep in 1..=solver.max_sweeps {
        // every agent responds to the same profile, so identical agents
        // stay identical
        let responses = (0..n)
            .map(|i| cohort.best_response(i, &s, (s[i], h[i]), solver.max_newton))
            .collect::<Result<Vec<_>>>()?;
        let mut change: f64 = 0.0;
        for (i, (bs, bh)) in responses.into_iter().enumerate() {
            change = change.max((bs - s[i]).abs());
            s[i] += lambda * (bs - s[i]);
            h[i] = bh;
        }
        last_change = change;
        if change <= solver.tolerance {
            let responses = (0..n)
                .map(|i| cohort.best_response(i, &s, (s[i], h[i]), solver.max_newton))
                .collect::<Result<Vec<_>>>()?;
            for (i, (bs, bh)) in responses.into_iter().enumerate() {
                s[i] = bs;
                h[i] = bh;
            }
            let resid = max_residual(cohort, &s, &h);
            if resid <= POLISH_RESIDUAL {
                let leisure = s.iter().zip(&h).map(|(a, b)| 1.0 - a - b).collect();
                return Ok(EquilibriumState {
                    social: s,
                    study: h,
                    leisure,
                    iterations: sweep,
                    max_residual: resid,
                });
            }
        }
    }
    Err(Error::NoConvergence {
        what: "equilibrium",
        iterations: solver.max_sweeps,
        residual: last_change,
        hint: "try a smaller damping factor",
    })
}

pub fn max_residual(cohort: &Cohort, s: &[f64], h: &[f64]) -> f64 {
    (0..cohort.len())
        .map(|i| {
            let (a, b) = cohort.foc(i, s[i], h[i], s);
            a.abs().max(b.abs())
        })
        .fold(0.0, f64::max)
}

/// Draw a cohort's students.
pub fn draw_agents<R: Rng + ?Sized>(config: &SimConfig, school: i64, grade: i64, rng: &mut R) -> Vec<AgentParams> {
    let size = rng.random_range(config.cohort_size_min..=config.cohort_size_max);
    let spread = rng.random_range(config.ages.spread_min..=config.ages.spread_max);
    let p = &config.preferences;
    let w = &config.earnings;
    let rest = (1.0 - w.corr_social.powi(2) - w.corr_leisure.powi(2)).max(0.0).sqrt();
    (0..size)
        .map(|_| {
            let mut normal = || -> f64 { StandardNormal.sample(rng) };
            let iq = normal().clamp(-IQ_BOUND, IQ_BOUND);
            let (zu, zw, ze, zx) = (normal(), normal(), normal(), normal());
            let extroversion: f64 = rng.random();
            let held = if rng.random::<f64>() < config.ages.held_back { 1.0 } else { 0.0 };
            let age = grade as f64 + 5.0 + spread * rng.random::<f64>() + held;
            AgentParams {
                iq,
                extroversion,
                age,
                school,
                grade,
                upsilon: (p.social_log_mean + p.social_log_sd * zu).exp() + p.social_extroversion * extroversion,
                omega: (p.leisure_log_mean + p.leisure_log_sd * zw).exp(),
                xi: config.education.shock_sd * zx,
                epsilon: w.shock_sd * (w.corr_social * zu + w.corr_leisure * zw + rest * ze),
            }
        })
        .collect()
}

/// Draw nominations and compute education and earnings at an equilibrium.
/// Ids are `first_id, first_id + 1, ...` in agent order.
pub fn realize_outcomes<R: Rng + ?Sized>(
    cohort: &Cohort,
    state: &EquilibriumState,
    config: &SimConfig,
    first_id: i64,
    rng: &mut R,
) -> Result<(ObservationTable, EdgeList)> {
    let (inds, edges) = realize_raw(cohort, state, config, first_id, rng);
    let table = ObservationTable::new(inds)?;
    let edges = EdgeList::new(edges, &table)?;
    Ok((table, edges))
}

fn realize_raw<R: Rng + ?Sized>(
    cohort: &Cohort,
    state: &EquilibriumState,
    config: &SimConfig,
    first_id: i64,
    rng: &mut R,
) -> (Vec<Individual>, Vec<(i64, i64)>) {
    let n = cohort.len();
    let s = &state.social;
    let mut indegree = vec![0usize; n];
    let mut edges = Vec::new();
    for j in 0..n {
        for i in 0..n {
            if i == j {
                continue;
            }
            let p = cohort.link_probability(i, j, s);
            let u: f64 = rng.random();
            let link = if config.links.deterministic { p >= 0.5 } else { u < p };
            if link {
                edges.push((first_id + j as i64, first_id + i as i64));
                indegree[i] += 1;
            }
        }
    }
    let w = &config.earnings;
    let inds = cohort
        .agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let education = cohort.productivity[i] * state.study[i].sqrt() + a.xi;
            let earnings = w.intercept
                + config.return_education * education
                + config.return_friends * indegree[i] as f64
                + w.iq * a.iq
                + a.epsilon;
            let mut ind = Individual::new(first_id + i as i64, a.school, a.grade, a.age);
            ind.covariates.insert("iq".into(), a.iq);
            ind.covariates.insert("extroversion".into(), a.extroversion);
            ind.education = Some(education);
            ind.outcome = Some(earnings);
            ind
        })
        .collect();
    (inds, edges)
}

/// Known parameters written next to simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub return_education: f64,
    pub return_friends: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub table: ObservationTable,
    pub edges: EdgeList,
    pub truth: Truth,
    /// Mean time shares (socializing, studying, leisure).
    pub mean_shares: (f64, f64, f64),
    pub max_residual: f64,
}

/// Cohort RNG: the master seed with the cohort index as stream id.
pub fn cohort_rng(seed: u64, cohort_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cohort_index);
    rng
}

/// Simulate every cohort (in parallel; results do not depend on scheduling).
pub fn simulate(config: &SimConfig, seed: u64) -> Result<SimOutput> {
    config.validate()?;
    let cells: Vec<(usize, i64, i64)> = (0..config.schools)
        .flat_map(|s| config.grades.iter().map(move |&g| (s + 1, g)))
        .enumerate()
        .map(|(k, (s, g))| (k, s as i64, g))
        .collect();
    let results = cells
        .par_iter()
        .map(|&(k, school, grade)| {
            let mut rng = cohort_rng(seed, k as u64);
            let agents = draw_agents(config, school, grade, &mut rng);
            let cohort = Cohort::new(agents, config)?;
            let state = find_equilibrium(&cohort, &config.solver)?;
            let (inds, edges) = realize_raw(&cohort, &state, config, (k as i64 + 1) * 1000, &mut rng);
            Ok((inds, edges, state))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut inds = Vec::new();
    let mut edges = Vec::new();
    let (mut ss, mut sh, mut sl, mut resid) = (0.0, 0.0, 0.0, 0.0f64);
    for (i, e, st) in results {
        inds.extend(i);
        edges.extend(e);
        ss += st.social.iter().sum::<f64>();
        sh += st.study.iter().sum::<f64>();
        sl += st.leisure.iter().sum::<f64>();
        resid = resid.max(st.max_residual);
    }
    let n = inds.len() as f64;
    let table = ObservationTable::new(inds)?;
    let edges = EdgeList::new(edges, &table)?;
    Ok(SimOutput {
        table,
        edges,
        truth: Truth {
            return_education: config.return_education,
            return_friends: config.return_friends,
            seed: Some(seed),
            config: Some(serde_json::to_value(config)?),
        },
        mean_shares: (ss / n, sh / n, sl / n),
        max_residual: resid,
    })
}

/// Reduced-form generator that skips the equilibrium: friendships load on
/// within-cohort age distance, and both regressors share shocks with
/// earnings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearDgpConfig {
    pub schools: usize,
    pub grades: Vec<i64>,
    pub cohort_size_min: usize,
    pub cohort_size_max: usize,
    pub ages: AgeParams,
    pub return_education: f64,
    pub return_friends: f64,
    /// Coefficient of age distance in the friendship equation.
    pub instrument_loading: f64,
    pub friends_mean: f64,
    pub friends_sd: f64,
    pub education_mean: f64,
    pub education_sd: f64,
    /// Loading of education on the friendship shock.
    pub education_on_friends: f64,
    pub earnings_sd: f64,
    /// Correlations of the earnings shock with the friendship and education shocks.
    pub corr_friends: f64,
    pub corr_education: f64,
}

impl Default for LinearDgpConfig {
    fn default() -> Self {
        LinearDgpConfig {
            schools: 25,
            grades: vec![9, 10, 11, 12],
            cohort_size_min: 16,
            cohort_size_max: 24,
            ages: AgeParams::default(),
            return_education: 0.10,
            return_friends: 0.10,
            instrument_loading: -4.0,
            friends_mean: 5.0,
            friends_sd: 2.0,
            education_mean: 13.0,
            education_sd: 2.0,
            education_on_friends: 0.3,
            earnings_sd: 0.5,
            corr_friends: -0.3,
            corr_education: 0.3,
        }
    }
}

/// Column holding friendships in linear-DGP tables.
pub const LINEAR_FRIENDS: &str = "friends";

pub fn simulate_linear_dgp(config: &LinearDgpConfig, seed: u64) -> Result<ObservationTable> {
    if config.corr_friends.powi(2) + config.corr_education.powi(2) > 1.0 {
        return Err(Error::InvalidConfig(
            "shock correlations must satisfy corr_friends^2 + corr_education^2 <= 1".into(),
        ));
    }
    if config.cohort_size_min < 2 || config.cohort_size_max < config.cohort_size_min || config.cohort_size_max > 999 {
        return Err(Error::InvalidConfig("cohort sizes must satisfy 2 <= min <= max <= 999".into()));
    }
    if config.friends_sd < 0.0 || config.education_sd < 0.0 || config.earnings_sd < 0.0 {
        return Err(Error::InvalidConfig("standard deviations must be non-negative".into()));
    }
    let mut inds = Vec::new();
    let mut shocks: BTreeMap<i64, (f64, f64, f64)> = BTreeMap::new();
    let mut k = 0u64;
    for school in 1..=config.schools as i64 {
        for &grade in &config.grades {
            let mut rng = cohort_rng(seed, k);
            k += 1;
            let size = rng.random_range(config.cohort_size_min..=config.cohort_size_max);
            let spread = rng.random_range(config.ages.spread_min..=config.ages.spread_max);
            for m in 0..size {
                let id = k as i64 * 1000 + m as i64;
                let held = if rng.random::<f64>() < config.ages.held_back { 1.0 } else { 0.0 };
                let age = grade as f64 + 5.0 + spread * rng.random::<f64>() + held;
                inds.push(Individual::new(id, school, grade, age));
                let z: [f64; 3] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
                shocks.insert(id, (z[0], z[1], z[2]));
            }
        }
    }
    let table = compute_age_distance(&ObservationTable::new(inds)?)?;
    let dist = crate::frame::ColumnSource::column(&table, data_cols::AGE_DISTANCE)?;
    let rest = (1.0 - config.corr_friends.powi(2) - config.corr_education.powi(2)).sqrt();
    let mut rebuilt = Vec::with_capacity(table.len());
    for (ind, d) in table.individuals().iter().zip(&dist) {
        let (uf, ue, un) = shocks[&ind.id];
        let friends = config.friends_mean + config.instrument_loading * d + config.friends_sd * uf;
        let education = config.education_mean + config.education_sd * ue + config.education_on_friends * config.friends_sd * uf;
        let eps = config.earnings_sd * (config.corr_friends * uf + config.corr_education * ue + rest * un);
        let mut out = ind.clone();
        out.covariates.insert(LINEAR_FRIENDS.into(), friends);
        out.education = Some(education);
        out.outcome = Some(config.return_education * education + config.return_friends * friends + eps);
        rebuilt.push(out);
    }
    ObservationTable::new(rebuilt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(age: f64, upsilon: f64, extroversion: f64) -> AgentParams {
        AgentParams {
            iq: 0.0,
            extroversion,
            age,
            school: 1,
            grade: 9,
            upsilon,
            omega: 0.3,
            xi: 0.0,
            epsilon: 0.0,
        }
    }

    #[test]
    fn symmetric_agents_share_a_response() {
        let cfg = SimConfig::default();
        let c = Cohort::new(vec![agent(14.0, 0.25, 0.5), agent(14.0, 0.25, 0.5)], &cfg).unwrap();
        let st = find_equilibrium(&c, &cfg.solver).unwrap();
        assert_eq!(st.social[0], st.social[1]);
        assert_eq!(st.study[0], st.study[1]);
        assert!(st.max_residual <= 1e-9);
    }

    #[test]
    fn no_friendship_return_still_socializes() {
        let cfg = SimConfig {
            return_friends: 0.0,
            ..Default::default()
        };
        let c = Cohort::new(vec![agent(14.0, 0.25, 0.5), agent(14.5, 0.2, 0.1)], &cfg).unwrap();
        let (s, h) = c.best_response(0, &[0.3, 0.3], (0.3, 0.3), 100).unwrap();
        assert!(s > 0.0);
        let l = 1.0 - s - h;
        assert!((0.25 / s - 0.3 / l).abs() <= 1e-10);
    }

    #[test]
    fn config_validation() {
        let cfg = SimConfig {
            cohort_size_min: 1,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        assert!(SimConfig::default().validate().is_ok());
    }
}
