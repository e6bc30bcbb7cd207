//! Estimators built on sorted terminal samples `v_i = Z(T) g(X(T))`.
//!
//! The quantile-hedging value is the mean of the lowest `p`-mass of the sample, with
//! the order statistic on the boundary taken fractionally. This is the optimal
//! randomized test on the empirical law: accept everything strictly below the
//! threshold `a` and the atom at `a` with the probability that makes the mass up to `p`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::Payoff;
use crate::sde::TerminalDraws;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub scheme: String,
    pub model: String,
}

/// `F(a)` together with the left limit `F(a-)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CdfValue {
    pub f: f64,
    pub f_left: f64,
}

/// The optimal randomized test at level `p`: accept `v < threshold` surely and
/// `v = threshold` with probability `atom_weight`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RandomizedTest {
    pub threshold: f64,
    pub atom_weight: f64,
    pub cdf: CdfValue,
}

#[derive(Debug, Clone)]
pub struct SampleSet {
    values: Vec<f64>,
    /// `B(T) - B(t0)` per sample, aligned with `values`.
    aux: Option<Vec<f64>>,
    tau: f64,
    /// `prefix[k] = v_0 + .. + v_{k-1}`, Neumaier-compensated.
    prefix: Vec<f64>,
    provenance: Provenance,
}

fn compensated_prefix(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() + 1);
    out.push(0.0);
    let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
    for &v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
        out.push(sum + comp);
    }
    out
}

impl SampleSet {
    /// Sorts and validates raw values; every value must be finite and positive.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        Self::build(values, None, 0.0, Provenance::default())
    }

    /// Values paired with auxiliary Brownian increments over a horizon `tau`.
    pub fn with_aux(values: Vec<f64>, aux: Vec<f64>, tau: f64) -> Result<Self> {
        if aux.len() != values.len() {
            return Err(Error::InvalidSample { index: aux.len().min(values.len()), value: f64::NAN });
        }
        Self::build(values, Some(aux), tau, Provenance::default())
    }

    /// `v_i = Z_i g(X_i)` from simulated terminal draws, keeping the auxiliary increments.
    pub fn from_terminal(draws: &TerminalDraws, payoff: &Payoff) -> Result<Self> {
        let values = (0..draws.len()).map(|i| draws.z[i] * payoff.value(draws.x(i))).collect();
        let provenance = Provenance { seed: Some(draws.seed), scheme: draws.scheme.clone(), model: draws.model.clone() };
        Self::build(values, Some(draws.brownian_aux.clone()), draws.tau, provenance)
    }

    fn build(values: Vec<f64>, aux: Option<Vec<f64>>, tau: f64, provenance: Provenance) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySamples(0));
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidSample { index, value });
        }
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
        let sorted: Vec<f64> = order.iter().map(|&i| values[i]).collect();
        let aux = aux.map(|a| order.iter().map(|&i| a[i]).collect());
        let prefix = compensated_prefix(&sorted);
        Ok(Self { values: sorted, aux, tau, prefix, provenance })
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn aux(&self) -> Option<&[f64]> {
        self.aux.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn n(&self) -> f64 {
        self.values.len() as f64
    }

    /// Number of values `<= a`.
    fn count_le(&self, a: f64) -> usize {
        self.values.partition_point(|&v| v <= a)
    }

    fn count_lt(&self, a: f64) -> usize {
        self.values.partition_point(|&v| v < a)
    }

    /// Sample standard error of the mean of `f(v_i)` where `f` vanishes for `i >= k`.
    fn stderr_truncated(&self, k: usize, f: impl Fn(f64) -> f64) -> f64 {
        let n = self.values.len();
        if n < 2 || k == 0 {
            return 0.0;
        }
        let mean = self.values[..k].iter().map(|&v| f(v)).sum::<f64>() / n as f64;
        let ss: f64 = self.values[..k].iter().map(|&v| (f(v) - mean).powi(2)).sum::<f64>()
            + (n - k) as f64 * mean * mean;
        (ss / (n - 1) as f64 / n as f64).sqrt()
    }
}

/// Sample mean of the values: the superhedging price `V(T, x, 1)`.
pub fn superhedge_value(samples: &SampleSet) -> Result<Estimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::EmptySamples(n));
    }
    let mean = samples.prefix[n] / n as f64;
    let ss: f64 = samples.values.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(Estimate { value: mean, std_error: (ss / (n - 1) as f64 / n as f64).sqrt(), n })
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::POutOfRange(p))
    }
}

/// Index `k` of the marginal order statistic and its fractional weight `m - k` at level `p`.
fn marginal(n: usize, p: f64) -> (usize, f64) {
    let m = p * n as f64;
    let k = (m.floor() as usize).min(n);
    (k, m - k as f64)
}

/// `V(p)`: `(v_0 + .. + v_{k-1} + (m - k) v_k) / n` with `m = p n`, `k = floor(m)`.
///
/// The standard error is that of `p a - mean((a - v_i)^+)` with `a` held at the
/// marginal order statistic, i.e. the spread of `(a - v_i)^+`.
pub fn quantile_value(samples: &SampleSet, p: f64) -> Result<Estimate> {
    check_p(p)?;
    let n = samples.len();
    let (k, frac) = marginal(n, p);
    let mut value = samples.prefix[k];
    if k < n && frac > 0.0 {
        value += frac * samples.values[k];
    }
    let value = value / n as f64;
    let a = samples.values[k.min(n - 1)];
    let std_error = if p == 0.0 { 0.0 } else { samples.stderr_truncated(samples.count_lt(a), |v| a - v) };
    Ok(Estimate { value, std_error, n })
}

pub fn empirical_cdf(samples: &SampleSet, a: f64) -> CdfValue {
    let n = samples.n();
    CdfValue { f: samples.count_le(a) as f64 / n, f_left: samples.count_lt(a) as f64 / n }
}

/// The randomized test attaining [`quantile_value`] at level `p`.
pub fn optimal_test(samples: &SampleSet, p: f64) -> Result<RandomizedTest> {
    check_p(p)?;
    let n = samples.len();
    let (k, _) = marginal(n, p);
    let threshold = samples.values[k.min(n - 1)];
    let cdf = empirical_cdf(samples, threshold);
    let atom = cdf.f - cdf.f_left;
    let atom_weight = if atom > 0.0 { ((p - cdf.f_left) / atom).clamp(0.0, 1.0) } else { 0.0 };
    Ok(RandomizedTest { threshold, atom_weight, cdf })
}

/// Mean of `(q - v_i) 1{v_i <= a}`.
pub fn partial_expectation(samples: &SampleSet, q: f64, a: f64) -> f64 {
    let k = samples.count_le(a);
    (k as f64 * q - samples.prefix[k]) / samples.n()
}

/// `mean((q - v_i)^+)`.
pub fn dual_value(samples: &SampleSet, q: f64) -> Result<Estimate> {
    if !(q >= 0.0) || !q.is_finite() {
        return Err(Error::Domain(format!("q must be >= 0, got {q}")));
    }
    let k = samples.count_lt(q);
    let value = ((k as f64 * q - samples.prefix[k]) / samples.n()).max(0.0);
    Ok(Estimate { value, std_error: samples.stderr_truncated(k, |v| q - v), n: samples.len() })
}

fn multipliers<'a>(samples: &'a SampleSet, eps: f64) -> Result<impl Iterator<Item = f64> + Clone + 'a> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("epsilon must be >= 0, got {eps}")));
    }
    let aux = samples.aux.as_ref().ok_or(Error::MissingAux)?;
    let drift = -0.5 * eps * eps * samples.tau;
    Ok(aux.iter().map(move |&b| (drift + eps * b).exp()))
}

fn mean_se(n: usize, terms: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let nf = n as f64;
    let mean = terms.clone().sum::<f64>() / nf;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = terms.map(|t| (t - mean).powi(2)).sum();
    (mean, (ss / (nf - 1.0) / nf).sqrt())
}

/// `mean((q L_i - v_i)^+)` with `L_i = exp(-eps^2 tau / 2 + eps B_i)`.
pub fn dual_value_regularized(samples: &SampleSet, q: f64, eps: f64) -> Result<Estimate> {
    if !(q >= 0.0) || !q.is_finite() {
        return Err(Error::Domain(format!("q must be >= 0, got {q}")));
    }
    let terms = multipliers(samples, eps)?.zip(&samples.values).map(move |(l, &v)| (q * l - v).max(0.0));
    let (value, std_error) = mean_se(samples.len(), terms);
    Ok(Estimate { value, std_error, n: samples.len() })
}

/// `w_eps(q) - w(q)` on common draws, with the standard error of the paired differences.
pub fn regularization_gap(samples: &SampleSet, q: f64, eps: f64) -> Result<Estimate> {
    if !(q >= 0.0) || !q.is_finite() {
        return Err(Error::Domain(format!("q must be >= 0, got {q}")));
    }
    let terms = multipliers(samples, eps)?
        .zip(&samples.values)
        .map(move |(l, &v)| (q * l - v).max(0.0) - (q - v).max(0.0));
    let (value, std_error) = mean_se(samples.len(), terms);
    Ok(Estimate { value, std_error, n: samples.len() })
}

/// Minimum of `E[v phi]` over tests `0 <= phi <= 1` with `E[phi] >= p`, for a discrete
/// law given as `(value, probability)` atoms. Fills the smallest values first.
pub fn neyman_pearson_bruteforce(dist: &[(f64, f64)], p: f64) -> Result<f64> {
    check_p(p)?;
    if dist.is_empty() {
        return Err(Error::BadDistribution("no atoms".into()));
    }
    if let Some(bad) = dist.iter().find(|(v, w)| !v.is_finite() || !(*w >= 0.0)) {
        return Err(Error::BadDistribution(format!("invalid atom {bad:?}")));
    }
    let total: f64 = dist.iter().map(|(_, w)| w).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::BadDistribution(format!("probabilities sum to {total}")));
    }
    let mut atoms = dist.to_vec();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut remaining = p;
    let mut acc = 0.0;
    for (v, w) in atoms {
        if remaining <= 0.0 {
            break;
        }
        let take = w.min(remaining);
        acc += take * v;
        remaining -= take;
    }
    Ok(acc)
}

/// `n` uniform points on `[0, 1]`.
pub fn default_p_grid(n: usize) -> Vec<f64> {
    let n = n.max(2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// `n` uniform points on `[0, 2 V(1)]`.
pub fn default_q_grid(samples: &SampleSet, n: usize) -> Vec<f64> {
    let n = n.max(2);
    let top = 2.0 * samples.prefix[samples.len()] / samples.n();
    (0..n).map(|i| top * i as f64 / (n - 1) as f64).collect()
}

pub fn quantile_curve(samples: &SampleSet, p_grid: &[f64]) -> Result<Vec<Estimate>> {
    p_grid.par_iter().map(|&p| quantile_value(samples, p)).collect()
}

pub fn dual_curve(samples: &SampleSet, q_grid: &[f64]) -> Result<Vec<Estimate>> {
    q_grid.par_iter().map(|&q| dual_value(samples, q)).collect()
}

pub fn dual_curve_regularized(samples: &SampleSet, q_grid: &[f64], eps: f64) -> Result<Vec<Estimate>> {
    q_grid.par_iter().map(|&q| dual_value_regularized(samples, q, eps)).collect()
}

/// Writes `axis,value,stderr` rows under the given column names.
pub fn write_curve_csv<W: Write>(mut out: W, columns: [&str; 3], axis: &[f64], curve: &[Estimate]) -> Result<()> {
    writeln!(out, "{},{},{}", columns[0], columns[1], columns[2])?;
    for (x, e) in axis.iter().zip(curve) {
        writeln!(out, "{x},{},{}", e.value, e.std_error)?;
    }
    Ok(())
}
