#![allow(dead_code)]

use friendbounds::data::{Individual, ObservationTable};
use friendbounds::sim::{Cohort, EquilibriumState, SimConfig};
use friendbounds::Frame;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Random IV data set: `f` endogenous with three excluded instruments,
/// `e` a second endogenous variable driven by the same instruments, two
/// exogenous controls, a grouping column `g` and clusters `c`.
pub fn iv_instance<R: Rng + ?Sized>(rng: &mut R, n: usize, clusters: usize) -> Frame {
    let mut cols: Vec<(&str, Vec<f64>)> = ["y", "f", "e", "x1", "x2", "z1", "z2", "z3", "g", "c"]
        .iter()
        .map(|&name| (name, Vec::with_capacity(n)))
        .collect();
    let b = [
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ];
    for i in 0..n {
        let (z1, z2, z3) = (normal(rng), normal(rng), normal(rng));
        let (x1, x2) = (normal(rng), rng.random_range(0.0..4.0));
        let u = normal(rng);
        let f = 1.0 + b[0] * z1 + 0.7 * z2 - 0.4 * z3 + 0.3 * x1 + u;
        let e = 12.0 + 0.5 * z1 + b[1] * z3 + 0.2 * x2 + 0.5 * u + normal(rng);
        let y = 2.0 + 0.1 * f + 0.1 * e + b[2] * x1 - 0.2 * x2 + 0.6 * u + normal(rng);
        let c = (i % clusters) as f64;
        let g = (i % 7) as f64;
        for (col, v) in cols.iter_mut().zip([y, f, e, x1, x2, z1, z2, z3, g, c]) {
            col.1.push(v);
        }
    }
    Frame::from_columns(cols).unwrap()
}

/// Columns of `frame` as a matrix, optionally followed by a constant.
pub fn matrix(frame: &Frame, names: &[&str], intercept: bool) -> DMatrix<f64> {
    let n = frame.get(names.first().copied().unwrap_or("y")).map_or(0, |c| c.len());
    let k = names.len() + usize::from(intercept);
    DMatrix::from_fn(n, k, |i, j| if j < names.len() { frame.get(names[j]).unwrap()[i] } else { 1.0 })
}

pub fn vector(frame: &Frame, name: &str) -> DVector<f64> {
    DVector::from_column_slice(frame.get(name).unwrap())
}

/// (X'X)^-1 X'y through an LU solve of the normal equations.
pub fn normal_equations(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let xtx = x.transpose() * x;
    xtx.lu().solve(&(x.transpose() * y)).expect("nonsingular")
}

/// First stage by OLS of each X column on Z, second stage by OLS of y on
/// the fitted values.
pub fn two_stage(x: &DMatrix<f64>, z: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let mut xhat = DMatrix::zeros(x.nrows(), x.ncols());
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let pi = normal_equations(z, &col);
        xhat.set_column(j, &(z * pi));
    }
    normal_equations(&xhat, y)
}

/// Individuals with ages in one school, for age-distance checks.
pub fn cohort_table(groups: &[(i64, i64, &[f64])]) -> ObservationTable {
    let mut id = 0;
    let mut inds = Vec::new();
    for &(school, grade, ages) in groups {
        for &a in ages {
            id += 1;
            inds.push(Individual::new(id, school, grade, a));
        }
    }
    ObservationTable::new(inds).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// First-order conditions recomputed from the agent parameters. At a cap
/// kink the social condition is the distance of zero from the interval of
/// one-sided derivatives.
pub fn oracle_foc(cohort: &Cohort, cfg: &SimConfig, i: usize, s: &[f64], h: &[f64]) -> (f64, f64) {
    let a = &cohort.agents[i];
    let l = 1.0 - s[i] - h[i];
    let base = a.upsilon / s[i] - a.omega / l;
    let (mut below, mut at) = (0.0, 0.0);
    for j in (0..cohort.len()).filter(|&j| j != i) {
        let c = cohort.factor[i][j];
        let p = c * (s[i] * s[j]).sqrt();
        let slope = cfg.return_friends * c * s[j].sqrt() / (2.0 * s[i].sqrt());
        if (p - cfg.links.cap).abs() <= 1e-9 * cfg.links.cap {
            at += slope;
        } else if p < cfg.links.cap {
            below += slope;
        }
    }
    let (right, left) = (base + below, base + below + at);
    let gs = if right > 0.0 {
        right
    } else if left < 0.0 {
        left
    } else {
        0.0
    };
    let prod = cfg.education.base + cfg.education.iq * a.iq;
    let gh = cfg.return_education * prod / (2.0 * h[i].sqrt()) - cfg.preferences.study_cost - a.omega / l;
    (gs, gh)
}

pub fn oracle_residual(cohort: &Cohort, cfg: &SimConfig, st: &EquilibriumState) -> f64 {
    (0..cohort.len())
        .map(|i| {
            let (a, b) = oracle_foc(cohort, cfg, i, &st.social, &st.study);
            a.abs().max(b.abs())
        })
        .fold(0.0, f64::max)
}

/// Probit labels from `a + b * d` with `d` uniform on [0, 2], and ten groups `g`.
pub fn probit_data<R: Rng + ?Sized>(rng: &mut R, n: usize, a: f64, b: f64) -> Frame {
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let label: Vec<f64> = d
        .iter()
        .map(|x| if a + b * x + normal(rng) > 0.0 { 1.0 } else { 0.0 })
        .collect();
    let g: Vec<f64> = (0..n).map(|i| (i % 10) as f64).collect();
    Frame::from_columns([("d", d), ("label", label), ("g", g)]).unwrap()
}

pub fn log_likelihood(d: &[f64], y: &[f64], a: f64, b: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    d.iter()
        .zip(y)
        .map(|(x, y)| {
            let t = a + b * x;
            if *y > 0.5 {
                n.cdf(t).ln()
            } else {
                n.cdf(-t).ln()
            }
        })
        .sum()
}

/// Coarse grid, then repeated 21 x 21 zooms around the best point.
pub fn grid_mle(d: &[f64], y: &[f64]) -> (f64, f64) {
    let (mut ca, mut cb, mut step) = (0.0, 0.0, 0.1);
    let mut best = f64::NEG_INFINITY;
    for i in -30..=30 {
        for j in -30..=30 {
            let (a, b) = (i as f64 * step, j as f64 * step);
            let ll = log_likelihood(d, y, a, b);
            if ll > best {
                (best, ca, cb) = (ll, a, b);
            }
        }
    }
    while step > 1e-7 {
        step /= 10.0;
        let (a0, b0) = (ca, cb);
        for i in -10..=10 {
            for j in -10..=10 {
                let (a, b) = (a0 + i as f64 * step, b0 + j as f64 * step);
                let ll = log_likelihood(d, y, a, b);
                if ll > best {
                    (best, ca, cb) = (ll, a, b);
                }
            }
        }
    }
    (ca, cb)
}
