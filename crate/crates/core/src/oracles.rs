//! Closed-form reference values for the Bessel-3 and one-dimensional GBM models with
//! `g(x) = x`, plus the uniform bound on the regularization gap.
//!
//! Under GBM the product `Z(T) X(T)` is lognormal with mean `x` and log-variance
//! `v^2 = (s - theta)^2 tau`; under Bessel-3 it is the constant `x`. Regularization
//! multiplies `q` by an independent lognormal `L` with mean 1 and log-variance
//! `eps^2 tau`, so every dual value here is an exchange-option price
//! `E[(q L - Y)^+]` with total log-variance `v^2 + eps^2 tau`.

use serde::Serialize;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// `Phi(z)` through the complementary error function.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `Phi^{-1}(p)`, with `-inf` and `+inf` at the endpoints.
pub fn std_normal_inv(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    // the series inverse is good to ~1e-11; two Halley steps on the accurate cdf finish it
    let mut z = -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p);
    for _ in 0..2 {
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if density == 0.0 {
            break;
        }
        let u = (std_normal_cdf(z) - p) / density;
        z -= u / (1.0 + 0.5 * z * u);
    }
    z
}

fn require(cond: bool, what: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Domain(what()))
    }
}

fn check_x(x: f64) -> Result<()> {
    require(x > 0.0 && x.is_finite(), || format!("x must be positive, got {x}"))
}

fn check_q(q: f64) -> Result<()> {
    require(q >= 0.0 && q.is_finite(), || format!("q must be >= 0, got {q}"))
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::POutOfRange(p))
    }
}

fn check_eps_tau(eps: f64, tau: f64) -> Result<()> {
    require(eps >= 0.0 && eps.is_finite(), || format!("epsilon must be >= 0, got {eps}"))?;
    require(tau >= 0.0 && tau.is_finite(), || format!("time to maturity must be >= 0, got {tau}"))
}

/// `E[(q L - Y)^+]` for independent lognormals with means 1 and `x` and combined
/// log-variance `total_sd^2`.
fn exchange(q: f64, x: f64, total_sd: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if total_sd < 1e-14 {
        return (q - x).max(0.0);
    }
    let d_plus = ((q / x).ln() + 0.5 * total_sd * total_sd) / total_sd;
    let d_minus = d_plus - total_sd;
    (q * std_normal_cdf(d_plus) - x * std_normal_cdf(d_minus)).max(0.0)
}

/// `E[Y; Y in lowest p-mass]` for the matching primal: `x Phi(Phi^{-1}(p) - total_sd)`.
fn lowest_mass(x: f64, p: f64, total_sd: f64) -> f64 {
    if p == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return x;
    }
    x * std_normal_cdf(std_normal_inv(p) - total_sd)
}

fn gbm_log_sd(b: f64, s: f64, tau: f64) -> Result<f64> {
    require(s != 0.0 && s.is_finite() && b.is_finite(), || format!("need finite b and s != 0, got b = {b}, s = {s}"))?;
    require(tau >= 0.0 && tau.is_finite(), || format!("time to maturity must be >= 0, got {tau}"))?;
    let theta = b / s;
    Ok((s - theta).abs() * tau.sqrt())
}

/// Quantile-hedging price in the Bessel-3 market: `p x`, independent of the horizon.
pub fn bessel_quantile_value(x: f64, p: f64) -> Result<f64> {
    check_x(x)?;
    check_p(p)?;
    Ok(p * x)
}

/// `(q - x)^+`.
pub fn bessel_dual(x: f64, q: f64) -> Result<f64> {
    check_x(x)?;
    check_q(q)?;
    Ok((q - x).max(0.0))
}

/// `E[(q L_eps - x)^+]` with `tau` the time to maturity.
pub fn bessel_dual_regularized(x: f64, q: f64, eps: f64, tau: f64) -> Result<f64> {
    check_x(x)?;
    check_q(q)?;
    check_eps_tau(eps, tau)?;
    Ok(exchange(q, x, eps * tau.sqrt()))
}

/// Legendre transform of [`bessel_dual_regularized`] in `q`: `x Phi(Phi^{-1}(p) - eps sqrt(tau))`.
pub fn bessel_quantile_value_regularized(x: f64, p: f64, eps: f64, tau: f64) -> Result<f64> {
    check_x(x)?;
    check_p(p)?;
    check_eps_tau(eps, tau)?;
    Ok(lowest_mass(x, p, eps * tau.sqrt()))
}

/// `E[Z(T)]` for the Bessel-3 deflator started at `x0`: `2 Phi(x0 / sqrt(T)) - 1 < 1`.
pub fn bessel_deflator_mean(x0: f64, horizon: f64) -> Result<f64> {
    check_x(x0)?;
    require(horizon > 0.0, || format!("horizon must be positive, got {horizon}"))?;
    Ok(2.0 * std_normal_cdf(x0 / horizon.sqrt()) - 1.0)
}

/// Lognormal put `E[(q - Z(T) X(T))^+]` under GBM with `g(x) = x`.
pub fn gbm_dual(x: f64, q: f64, b: f64, s: f64, tau: f64) -> Result<f64> {
    check_x(x)?;
    check_q(q)?;
    Ok(exchange(q, x, gbm_log_sd(b, s, tau)?))
}

pub fn gbm_dual_regularized(x: f64, q: f64, b: f64, s: f64, tau: f64, eps: f64) -> Result<f64> {
    check_x(x)?;
    check_q(q)?;
    check_eps_tau(eps, tau)?;
    let v = gbm_log_sd(b, s, tau)?;
    Ok(exchange(q, x, (v * v + eps * eps * tau).sqrt()))
}

/// `x Phi(Phi^{-1}(p) - v)`.
pub fn gbm_quantile_value(x: f64, p: f64, b: f64, s: f64, tau: f64) -> Result<f64> {
    check_x(x)?;
    check_p(p)?;
    Ok(lowest_mass(x, p, gbm_log_sd(b, s, tau)?))
}

pub fn gbm_quantile_value_regularized(x: f64, p: f64, b: f64, s: f64, tau: f64, eps: f64) -> Result<f64> {
    check_x(x)?;
    check_p(p)?;
    check_eps_tau(eps, tau)?;
    let v = gbm_log_sd(b, s, tau)?;
    Ok(lowest_mass(x, p, (v * v + eps * eps * tau).sqrt()))
}

/// Uniform bound on `|w_eps - w|`: `q [(1 + Phi(eps sqrt T) - Phi(-eps sqrt T)) e^{eps^2 T} - 1]`.
pub fn regularization_bound(q: f64, eps: f64, horizon: f64) -> Result<f64> {
    check_q(q)?;
    check_eps_tau(eps, horizon)?;
    let a = eps * horizon.sqrt();
    let spread = std_normal_cdf(a) - std_normal_cdf(-a);
    Ok(q * ((1.0 + spread) * (eps * eps * horizon).exp() - 1.0))
}

/// A named oracle evaluation with its inputs echoed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub value: f64,
    pub formula_id: &'static str,
    pub inputs: Vec<(&'static str, f64)>,
}

impl OracleResult {
    fn new(formula_id: &'static str, inputs: Vec<(&'static str, f64)>, value: Result<f64>) -> Result<Self> {
        let value = value?;
        if !value.is_finite() {
            return Err(Error::Domain(format!("{formula_id} is not finite at {inputs:?}")));
        }
        Ok(Self { value, formula_id, inputs })
    }
}

/// Dual-side reference `w_eps(t, x, q)` for models with a closed form; `None` otherwise.
pub fn dual_reference(model: &crate::market::MarketModel, x: f64, q: f64, tau: f64, eps: f64) -> Option<Result<OracleResult>> {
    use crate::market::ModelKind;
    match model.kind() {
        ModelKind::Bessel3 => Some(OracleResult::new(
            "bessel_dual_regularized",
            vec![("x", x), ("q", q), ("tau", tau), ("epsilon", eps)],
            bessel_dual_regularized(x, q, eps, tau),
        )),
        ModelKind::Gbm { drift, vol } if drift.len() == 1 => Some(OracleResult::new(
            "gbm_dual_regularized",
            vec![("x", x), ("q", q), ("b", drift[0]), ("s", vol[0]), ("tau", tau), ("epsilon", eps)],
            gbm_dual_regularized(x, q, drift[0], vol[0], tau, eps),
        )),
        _ => None,
    }
}

/// Primal-side reference `U_eps(t, x, p)` for models with a closed form; `None` otherwise.
pub fn primal_reference(model: &crate::market::MarketModel, x: f64, p: f64, tau: f64, eps: f64) -> Option<Result<OracleResult>> {
    use crate::market::ModelKind;
    match model.kind() {
        ModelKind::Bessel3 => Some(OracleResult::new(
            "bessel_quantile_value_regularized",
            vec![("x", x), ("p", p), ("tau", tau), ("epsilon", eps)],
            bessel_quantile_value_regularized(x, p, eps, tau),
        )),
        ModelKind::Gbm { drift, vol } if drift.len() == 1 => Some(OracleResult::new(
            "gbm_quantile_value_regularized",
            vec![("x", x), ("p", p), ("b", drift[0]), ("s", vol[0]), ("tau", tau), ("epsilon", eps)],
            gbm_quantile_value_regularized(x, p, drift[0], vol[0], tau, eps),
        )),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule on `[a, b]` with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    fn phi(z: f64) -> f64 {
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    /// `E[f(N)]` for a standard normal `N`, by quadrature on [-12, 12].
    fn gauss_expect(f: impl Fn(f64) -> f64) -> f64 {
        simpson(|z| f(z) * phi(z), -12.0, 12.0, 24_000)
    }

    /// As [`gauss_expect`] with the panels split at a kink of `f`.
    fn gauss_expect_split(f: impl Fn(f64) -> f64, kink: f64) -> f64 {
        let k = kink.clamp(-12.0, 12.0);
        simpson(|z| f(z) * phi(z), -12.0, k, 12_000) + simpson(|z| f(z) * phi(z), k, 12.0, 12_000)
    }

    #[test]
    fn normal_cdf_against_quadrature() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(1.0) - 0.841_344_746_068_543).abs() < 1e-14);
        let quad = 0.5 + simpson(phi, 0.0, 1.0, 2000);
        assert!((std_normal_cdf(1.0) - quad).abs() < 1e-13);
        assert!(std_normal_cdf(40.0) == 1.0);
        for z in [-7.5, -3.0, -0.4, 0.0, 0.3, 2.2, 6.0] {
            assert!((std_normal_cdf(z) + std_normal_cdf(-z) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_inverse_round_trips() {
        for p in [1e-9, 0.01, 0.2, 0.5, 0.77, 0.999] {
            assert!((std_normal_cdf(std_normal_inv(p)) - p).abs() < 1e-12 * p.max(1e-3));
        }
        assert_eq!(std_normal_inv(0.0), f64::NEG_INFINITY);
        assert_eq!(std_normal_inv(1.0), f64::INFINITY);
    }

    #[test]
    fn bessel_values() {
        assert_eq!(bessel_quantile_value(1.0, 0.5).unwrap(), 0.5);
        assert_eq!(bessel_quantile_value(2.0, 1.0).unwrap(), 2.0);
        assert_eq!(bessel_quantile_value(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(bessel_dual(1.0, 2.0).unwrap(), 1.0);
        assert_eq!(bessel_dual(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(bessel_dual(1.0, 0.0).unwrap(), 0.0);
        assert!(bessel_dual(0.0, 1.0).is_err());
        assert!(bessel_quantile_value(1.0, 1.5).is_err());
    }

    #[test]
    fn bessel_deflator_mean_against_transition_density() {
        // BES3 density from x0: (y / x0) (n(y - x0) - n(y + x0)) with n the N(0, T) density
        let (x0, t) = (1.0_f64, 1.0_f64);
        let n = |u: f64| (-0.5 * u * u / t).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
        let density = |y: f64| if y <= 0.0 { 0.0 } else { y / x0 * (n(y - x0) - n(y + x0)) };
        let mass = simpson(density, 0.0, 14.0, 28_000);
        assert!((mass - 1.0).abs() < 1e-10);
        let ez = simpson(|y| if y <= 0.0 { 0.0 } else { x0 / y * density(y) }, 0.0, 14.0, 28_000);
        let closed = bessel_deflator_mean(x0, t).unwrap();
        assert!((ez - closed).abs() < 1e-8, "{ez} vs {closed}");
        assert!((closed - 0.682_689_492_137_086).abs() < 1e-12);
    }

    #[test]
    fn gbm_dual_against_quadrature() {
        let (b, s, tau, x) = (0.1, 0.2, 1.0, 1.0_f64);
        let v = 0.3_f64;
        for q in [0.5, 0.9, 1.0, 1.2, 2.0] {
            let kink = ((q / x).ln() + 0.5 * v * v) / v;
            let quad = gauss_expect_split(|z| (q - x * (-0.5 * v * v + v * z).exp()).max(0.0), kink);
            let closed = gbm_dual(x, q, b, s, tau).unwrap();
            assert!((quad - closed).abs() < 1e-9, "q = {q}: {quad} vs {closed}");
        }
    }

    #[test]
    fn gbm_quantile_against_quadrature() {
        let (b, s, tau, x) = (0.1, 0.2, 1.0, 1.0_f64);
        let v = 0.3_f64;
        for p in [0.1, 0.5, 0.9] {
            let zq = std_normal_inv(p);
            // {Y <= a} is {N <= Phi^{-1}(p)}
            let quad = simpson(|z| x * (-0.5 * v * v + v * z).exp() * phi(z), -12.0, zq, 20_000);
            let closed = gbm_quantile_value(x, p, b, s, tau).unwrap();
            assert!((quad - closed).abs() < 1e-10);
        }
        let mid = gbm_quantile_value(1.0, 0.5, b, s, tau).unwrap();
        assert!((mid - std_normal_cdf(-0.3)).abs() < 1e-15);
        assert!((mid - 0.3821).abs() < 5e-5);
        assert_eq!(gbm_quantile_value(1.0, 1.0, b, s, tau).unwrap(), 1.0);
        assert_eq!(gbm_quantile_value(1.0, 0.0, b, s, tau).unwrap(), 0.0);
    }

    #[test]
    fn regularized_duals_against_double_quadrature() {
        let (b, s, tau, x, eps) = (0.1, 0.2, 1.0_f64, 1.0, 0.25);
        let v = 0.3_f64;
        for q in [0.6, 1.0, 1.7] {
            let sd = eps * tau.sqrt();
            let quad = gauss_expect(|z1| {
                let y = x * (-0.5 * v * v + v * z1).exp();
                let kink = ((y / q).ln() + 0.5 * sd * sd) / sd;
                let f = |z2: f64| (q * (-0.5 * sd * sd + sd * z2).exp() - y).max(0.0) * phi(z2);
                let k = kink.clamp(-12.0, 12.0);
                simpson(f, -12.0, k, 1200) + simpson(f, k, 12.0, 1200)
            });
            let closed = gbm_dual_regularized(x, q, b, s, tau, eps).unwrap();
            assert!((quad - closed).abs() < 1e-7, "{quad} vs {closed}");
            let kink = ((x / q).ln() + 0.5 * sd * sd) / sd;
            let bq = gauss_expect_split(|z| (q * (-0.5 * sd * sd + sd * z).exp() - x).max(0.0), kink);
            assert!((bq - bessel_dual_regularized(x, q, eps, tau).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn primal_is_conjugate_of_dual() {
        // U(p) = sup_q (pq - w(q)) on a fine q grid
        let (b, s, tau, x, eps) = (0.1, 0.2, 1.0, 1.0, 0.1);
        let qs: Vec<f64> = (0..=40_000).map(|i| i as f64 * 1e-4).collect();
        for p in [0.1, 0.5, 0.9] {
            let sup = qs
                .iter()
                .map(|&q| p * q - gbm_dual_regularized(x, q, b, s, tau, eps).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let closed = gbm_quantile_value_regularized(x, p, b, s, tau, eps).unwrap();
            assert!((sup - closed).abs() < 1e-7);
            let sup = qs
                .iter()
                .map(|&q| p * q - bessel_dual_regularized(x, q, eps, tau).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((sup - bessel_quantile_value_regularized(x, p, eps, tau).unwrap()).abs() < 1e-7);
        }
    }

    #[test]
    fn gbm_dual_limits() {
        let (b, s, tau, x) = (0.1, 0.2, 1.0, 1.3);
        let far = gbm_dual(x, 20.0 * x, b, s, tau).unwrap();
        assert!((far - (20.0 * x - x)).abs() < 1e-6);
        // s = theta makes the law degenerate
        assert_eq!(gbm_dual(x, 2.0, 0.04, 0.2, tau).unwrap(), 2.0 - x);
        assert_eq!(gbm_dual(x, 0.0, b, s, tau).unwrap(), 0.0);
        let mut prev = 0.0;
        for i in 1..200 {
            let q = i as f64 * 0.02;
            let w = gbm_dual(x, q, b, s, tau).unwrap();
            assert!(w >= prev && w - prev <= 0.02 + 1e-12);
            prev = w;
        }
    }

    #[test]
    fn regularization_bound_values() {
        assert_eq!(regularization_bound(0.0, 0.5, 1.0).unwrap(), 0.0);
        assert!(regularization_bound(1.0, 1e-9, 1.0).unwrap() < 1e-8);
        let b = regularization_bound(1.0, 0.5, 1.0).unwrap();
        // E[exp(eps^2 T / 2 + eps |B(T)|)] - 1 by quadrature
        let quad = gauss_expect_split(|z| (0.125 + 0.5 * z.abs()).exp(), 0.0) - 1.0;
        assert!((b - quad).abs() < 1e-9, "{b} vs {quad}");
        assert!((b - 0.775_710_75).abs() < 1e-8);
        assert!(regularization_bound(1.0, -0.1, 1.0).is_err());
    }
}
