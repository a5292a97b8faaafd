//! Repeated simulate-then-estimate runs.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{estimate, prepare, EstimationConfig};
use crate::sim::{simulate, simulate_linear_dgp, LinearDgpConfig, SimConfig, Truth, LINEAR_FRIENDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McConfig {
    pub replications: usize,
    /// Structural generator; used unless `linear` is set.
    pub structural: Option<SimConfig>,
    pub linear: Option<LinearDgpConfig>,
    pub estimation: EstimationConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            replications: 200,
            structural: None,
            linear: None,
            estimation: EstimationConfig {
                controls: vec!["age".into(), "iq".into(), "extroversion".into()],
                ..Default::default()
            },
        }
    }
}

impl McConfig {
    /// Linear-generator config with matching estimation columns.
    pub fn linear(dgp: LinearDgpConfig) -> Self {
        McConfig {
            linear: Some(dgp),
            estimation: EstimationConfig {
                friends: LINEAR_FRIENDS.into(),
                controls: vec!["age".into()],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 replications, got {}",
                self.replications
            )));
        }
        if self.structural.is_some() && self.linear.is_some() {
            return Err(Error::InvalidConfig("set only one of `structural` and `linear`".into()));
        }
        if let Some(s) = &self.structural {
            s.validate()?;
        }
        self.estimation.bound_spec().validate()
    }
}

/// Per-replication numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRep {
    pub replication: usize,
    pub seed: u64,
    pub ols_friends: f64,
    pub calibrated_friends: f64,
    pub theta_lower: f64,
    pub theta_upper: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub first_stage_coef: f64,
    pub first_stage_p: f64,
    pub first_stage_f: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub p10: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Quantiles> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let pos = p * (v.len() - 1) as f64;
            let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Quantiles {
            min: v[0],
            p10: q(0.1),
            median: q(0.5),
            p90: q(0.9),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub replications: usize,
    pub failures: usize,
    pub failure_messages: Vec<String>,
    pub truth: Truth,
    pub alpha: f64,
    /// Share of successful replications whose CI covers the true r_f.
    pub ci_coverage: f64,
    pub bounds_coverage: f64,
    pub mean_bound_width: f64,
    pub mean_ci_width: f64,
    pub ols_mean_bias: f64,
    pub ols_median: f64,
    pub calibrated_mean_bias: f64,
    /// Share with a negative first-stage coefficient significant at alpha.
    pub first_stage_negative_significant: f64,
    pub first_stage_f: Option<Quantiles>,
    pub reps: Vec<McRep>,
}

impl fmt::Display for McReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ok = self.replications - self.failures;
        writeln!(f, "replications {} (failed {})", self.replications, self.failures)?;
        writeln!(
            f,
            "true r_e {}  true r_f {}",
            self.truth.return_education, self.truth.return_friends
        )?;
        writeln!(f, "CI coverage of r_f       {:.3}  ({ok} reps)", self.ci_coverage)?;
        writeln!(f, "bounds contain r_f       {:.3}", self.bounds_coverage)?;
        writeln!(f, "mean bound width         {:.4}", self.mean_bound_width)?;
        writeln!(f, "mean CI width            {:.4}", self.mean_ci_width)?;
        writeln!(f, "OLS r_f mean bias        {:.4}  (median estimate {:.4})", self.ols_mean_bias, self.ols_median)?;
        writeln!(f, "calibrated IV mean bias  {:.4}", self.calibrated_mean_bias)?;
        writeln!(f, "first stage neg. & sig.  {:.3}", self.first_stage_negative_significant)?;
        if let Some(q) = &self.first_stage_f {
            writeln!(
                f,
                "first-stage F            min {:.1}  p10 {:.1}  median {:.1}  p90 {:.1}  max {:.1}",
                q.min, q.p10, q.median, q.p90, q.max
            )?;
        }
        Ok(())
    }
}

impl McReport {
    /// One row per successful replication.
    pub fn write_reps_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.reps {
            w.serialize(r)?;
        }
        w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }
}

/// Seed for replication `r`, drawn from stream `r` of the master seed.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64);
    rng.next_u64()
}

fn one_rep(cfg: &McConfig, seed: u64, r: usize) -> Result<McRep> {
    let rep_seed = replication_seed(seed, r);
    let (table, edges, truth) = match &cfg.linear {
        Some(l) => (
            simulate_linear_dgp(l, rep_seed)?,
            None,
            Truth {
                return_education: l.return_education,
                return_friends: l.return_friends,
                seed: Some(rep_seed),
                config: None,
            },
        ),
        None => {
            let sc = cfg.structural.clone().unwrap_or_default();
            let out = simulate(&sc, rep_seed)?;
            (out.table, Some(out.edges), out.truth)
        }
    };
    let prepared = prepare(&table, edges.as_ref(), &cfg.estimation)?;
    let rep = estimate(&prepared, &cfg.estimation, Some(&truth))?;
    let friends = &cfg.estimation.friends;
    let b = rep
        .bounds
        .bounds
        .iter()
        .find(|b| &b.name == friends)
        .ok_or_else(|| Error::UnknownCoefficient(friends.clone()))?;
    let coef = |s: &crate::regress::FitSummary| {
        s.coefficients
            .iter()
            .find(|c| &c.name == friends)
            .map(|c| c.estimate)
            .unwrap_or(f64::NAN)
    };
    Ok(McRep {
        replication: r,
        seed: rep_seed,
        ols_friends: coef(&rep.ols),
        calibrated_friends: coef(&rep.calibrated_iv),
        theta_lower: b.theta_lower,
        theta_upper: b.theta_upper,
        ci_lower: b.ci_lower,
        ci_upper: b.ci_upper,
        first_stage_coef: rep.first_stage.instrument_coef,
        first_stage_p: rep.first_stage.instrument_p,
        first_stage_f: rep.first_stage.f_stat,
    })
}

/// Run the replications on `jobs` threads (all cores when `None`).
/// Aggregation is in replication order, so results do not depend on `jobs`.
pub fn run_mc(cfg: &McConfig, seed: u64, jobs: Option<usize>) -> Result<McReport> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<McRep>> =
        pool.install(|| (0..cfg.replications).into_par_iter().map(|r| one_rep(cfg, seed, r)).collect());
    let (r_e, r_f) = match &cfg.linear {
        Some(l) => (l.return_education, l.return_friends),
        None => {
            let s = cfg.structural.clone().unwrap_or_default();
            (s.return_education, s.return_friends)
        }
    };
    let mut reps = Vec::new();
    let mut failure_messages = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rep) => reps.push(rep),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failure_messages.push(format!("replication {r}: {e}"));
            }
        }
    }
    let n = reps.len() as f64;
    let mean = |f: &dyn Fn(&McRep) -> f64| reps.iter().map(f).sum::<f64>() / n;
    let share = |f: &dyn Fn(&McRep) -> bool| reps.iter().filter(|r| f(r)).count() as f64 / n;
    let alpha = cfg.estimation.alpha;
    let ols: Vec<f64> = reps.iter().map(|r| r.ols_friends).collect();
    let fstats: Vec<f64> = reps.iter().map(|r| r.first_stage_f).collect();
    Ok(McReport {
        replications: cfg.replications,
        failures: failure_messages.len(),
        failure_messages,
        truth: Truth {
            return_education: r_e,
            return_friends: r_f,
            seed: Some(seed),
            config: None,
        },
        alpha,
        ci_coverage: share(&|r| r.ci_lower <= r_f && r_f <= r.ci_upper),
        bounds_coverage: share(&|r| r.theta_lower <= r_f && r_f <= r.theta_upper),
        mean_bound_width: mean(&|r| r.theta_upper - r.theta_lower),
        mean_ci_width: mean(&|r| r.ci_upper - r.ci_lower),
        ols_mean_bias: mean(&|r| r.ols_friends - r_f),
        ols_median: Quantiles::of(&ols).map_or(f64::NAN, |q| q.median),
        calibrated_mean_bias: mean(&|r| r.calibrated_friends - r_f),
        first_stage_negative_significant: share(&|r| r.first_stage_coef < 0.0 && r.first_stage_p < alpha),
        first_stage_f: Quantiles::of(&fstats),
        reps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_replication_is_rejected() {
        let cfg = McConfig {
            replications: 1,
            ..Default::default()
        };
        assert!(matches!(run_mc(&cfg, 1, Some(1)), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn quantiles_interpolate() {
        let q = Quantiles::of(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((q.min, q.median, q.max), (1.0, 3.0, 5.0));
        assert!((q.p10 - 1.4).abs() < 1e-12);
    }
}
