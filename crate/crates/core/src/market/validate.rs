//! Sampled spot checks of the standing assumptions on a model: invertibility of `s`,
//! local Lipschitz continuity of `theta` and `s`, and the pathwise integrability of
//! `|b_i| + a_ii + theta_i^2`. None of these are proofs.

use serde::Serialize;

use super::{MarketModel, MAX_CONDITION};
use crate::linalg;
use crate::sde::PathBundle;

#[derive(Debug, Clone, Serialize)]
pub struct ProbeDiagnostic {
    pub x: Vec<f64>,
    pub condition: f64,
    pub singular: bool,
    /// `|s theta - b| / max(|b|, 1e-300)`; NaN when `theta` could not be formed.
    pub relative_residual: f64,
    pub min_alpha_eigenvalue: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzQuotient {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub theta: f64,
    pub vol: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub probes: Vec<ProbeDiagnostic>,
    pub pairs: Vec<LipschitzQuotient>,
    pub max_theta_quotient: f64,
    pub max_vol_quotient: f64,
    pub violations: Vec<String>,
}

impl Diagnostics {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

pub fn validate(model: &MarketModel, probe_points: &[Vec<f64>]) -> Diagnostics {
    let d = model.dim();
    let mut violations = Vec::new();
    let mut probes = Vec::with_capacity(probe_points.len());
    let mut thetas: Vec<Option<Vec<f64>>> = Vec::with_capacity(probe_points.len());

    for x in probe_points {
        if x.len() != d || x.iter().any(|&v| !(v > 0.0)) {
            violations.push(format!("probe {x:?} is not in the positive orthant of dimension {d}"));
            thetas.push(None);
            continue;
        }
        let s = model.volatility(x);
        let b = model.drift(x);
        let condition = linalg::condition_number(&s, d);
        let singular = !(condition <= MAX_CONDITION);
        let mut theta = vec![0.0; d];
        let solved = !singular && model.coefficients().theta_into(x, &mut theta);
        let relative_residual = if solved {
            let resid = norm((0..d).map(|i| (0..d).map(|k| s[i * d + k] * theta[k]).sum::<f64>() - b[i]));
            resid / norm(b.iter().copied()).max(1e-300)
        } else {
            f64::NAN
        };
        let alpha = model.absolute_covariance(x);
        let min_alpha_eigenvalue = if alpha.iter().all(|v| v.is_finite()) {
            linalg::min_symmetric_eigenvalue(&alpha, d)
        } else {
            f64::NAN
        };
        if singular {
            violations.push(format!("s is singular at x = {x:?} (condition {condition:e})"));
        } else if !(relative_residual <= 1e-12) {
            violations.push(format!("s theta = b fails at x = {x:?} (relative residual {relative_residual:e})"));
        }
        if !(min_alpha_eigenvalue >= -1e-12) {
            violations.push(format!("alpha is not positive semidefinite at x = {x:?}"));
        }
        thetas.push(solved.then_some(theta));
        probes.push(ProbeDiagnostic {
            x: x.clone(),
            condition,
            singular,
            relative_residual,
            min_alpha_eigenvalue,
        });
    }

    let mut pairs = Vec::new();
    for i in 0..probe_points.len() {
        for j in i + 1..probe_points.len() {
            let (Some(ti), Some(tj)) = (&thetas[i], &thetas[j]) else { continue };
            let (xi, xj) = (&probe_points[i], &probe_points[j]);
            let dist = norm(xi.iter().zip(xj).map(|(a, b)| a - b));
            if dist == 0.0 {
                continue;
            }
            let si = model.volatility(xi);
            let sj = model.volatility(xj);
            pairs.push(LipschitzQuotient {
                from: xi.clone(),
                to: xj.clone(),
                theta: norm(ti.iter().zip(tj).map(|(a, b)| a - b)) / dist,
                vol: norm(si.iter().zip(&sj).map(|(a, b)| a - b)) / dist,
            });
        }
    }
    let max_theta_quotient = pairs.iter().map(|p| p.theta).fold(0.0, f64::max);
    let max_vol_quotient = pairs.iter().map(|p| p.vol).fold(0.0, f64::max);

    Diagnostics { probes, pairs, max_theta_quotient, max_vol_quotient, violations }
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrabilityReport {
    pub cap: f64,
    pub max_sum: f64,
    pub mean_sum: f64,
    pub flagged_paths: Vec<usize>,
}

/// Left-point Riemann sum of `sum_i (|b_i| + a_ii + theta_i^2)` along each simulated path;
/// paths whose sum exceeds `cap` are flagged.
pub fn integrability_diagnostic(model: &MarketModel, bundle: &PathBundle, cap: f64) -> IntegrabilityReport {
    let d = model.dim();
    let dt = bundle.dt();
    let mut theta = vec![0.0; d];
    let mut sums = Vec::with_capacity(bundle.n_paths());
    for path in 0..bundle.n_paths() {
        let mut acc = 0.0;
        for step in 0..bundle.n_steps() {
            let x = bundle.x(path, step);
            let b = model.drift(x);
            let a = model.covariance(x);
            let th_ok = model.coefficients().theta_into(x, &mut theta);
            let th2: f64 = if th_ok { theta.iter().map(|t| t * t).sum() } else { f64::INFINITY };
            let local: f64 = (0..d).map(|i| b[i].abs() + a[i * d + i]).sum::<f64>() + th2;
            acc += local * dt;
        }
        sums.push(acc);
    }
    let flagged_paths = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| !(**s <= cap))
        .map(|(i, _)| i)
        .collect();
    IntegrabilityReport {
        cap,
        max_sum: sums.iter().copied().fold(0.0, f64::max),
        mean_sum: sums.iter().sum::<f64>() / sums.len().max(1) as f64,
        flagged_paths,
    }
}
