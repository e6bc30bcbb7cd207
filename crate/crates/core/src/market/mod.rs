//! Diffusion market: relative drift `b`, relative volatility `s`, and everything derived
//! from them (market price of risk, covariances, the deflator's exponent).
//!
//! Stocks follow `dX_i = X_i (b_i dt + sum_k s_ik dW_k)`. The market price of risk is
//! `theta = s^{-1} b` and the deflator solves `dZ = -Z theta' dW`, `Z(0) = 1`.

mod expr;
mod payoff;
mod registry;
mod validate;

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg;

pub use expr::{Expr, ExprCoefficients};
pub use payoff::{GrowthClass, Payoff};
pub use registry::{builtin_model, GbmParameters, ModelFactory, ModelRegistry, ModelSpec};
pub use validate::{
    integrability_diagnostic, validate, Diagnostics, IntegrabilityReport, LipschitzQuotient,
    ProbeDiagnostic,
};

/// Condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Coefficient functions of a market. Implementations must be pure.
pub trait Coefficients: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Relative drift `b(x)`.
    fn drift(&self, x: &[f64], out: &mut [f64]);

    /// Relative volatility `s(x)`, row-major `d x d`.
    fn volatility(&self, x: &[f64], out: &mut [f64]);

    /// Market price of risk without the conditioning check. Returns false when the
    /// linear solve breaks down.
    fn theta_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        let d = self.dim();
        let mut s = vec![0.0; d * d];
        self.volatility(x, &mut s);
        self.drift(x, out);
        linalg::solve_in_place(&mut s, out, d)
    }
}

/// Constant-coefficient market.
#[derive(Debug, Clone)]
pub struct GbmCoefficients {
    drift: Vec<f64>,
    vol: Vec<f64>,
    theta: Vec<f64>,
}

impl Coefficients for GbmCoefficients {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn drift(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.drift);
    }

    fn volatility(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.vol);
    }

    fn theta_into(&self, _x: &[f64], out: &mut [f64]) -> bool {
        out.copy_from_slice(&self.theta);
        true
    }
}

/// Three-dimensional Bessel process: `b(x) = 1/x^2`, `s(x) = 1/x`, so `dX = dt/X + dW`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Bessel3Coefficients;

impl Coefficients for Bessel3Coefficients {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0 / (x[0] * x[0]);
    }

    fn volatility(&self, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0 / x[0];
    }

    fn theta_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        out[0] = 1.0 / x[0];
        out[0].is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// Constant `b` (length d) and `s` (row-major d x d).
    Gbm { drift: Vec<f64>, vol: Vec<f64> },
    Bessel3,
    Custom,
}

impl ModelKind {
    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Gbm { .. } => "gbm",
            ModelKind::Bessel3 => "bessel3",
            ModelKind::Custom => "custom",
        }
    }
}

/// An immutable market model. Cheap to clone and safe to share across threads.
#[derive(Clone)]
pub struct MarketModel {
    name: String,
    kind: ModelKind,
    coeffs: Arc<dyn Coefficients>,
}

impl fmt::Debug for MarketModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarketModel")
            .field("name", &self.name)
            .field("kind", &self.kind)
            .field("dim", &self.dim())
            .finish()
    }
}

impl MarketModel {
    /// Constant-coefficient model. `vol` is row-major `d x d`.
    pub fn gbm(drift: Vec<f64>, vol: Vec<f64>) -> Result<Self> {
        let d = drift.len();
        if d == 0 || vol.len() != d * d {
            return Err(Error::InvalidCoefficients(format!(
                "gbm needs d drifts and d*d volatilities, got {} and {}",
                d,
                vol.len()
            )));
        }
        if drift.iter().chain(&vol).any(|v| !v.is_finite()) {
            return Err(Error::InvalidCoefficients("non-finite gbm parameter".into()));
        }
        let condition = linalg::condition_number(&vol, d);
        if condition > MAX_CONDITION {
            return Err(Error::InvalidCoefficients(format!(
                "gbm volatility matrix is singular (condition {condition:e})"
            )));
        }
        let mut s = vol.clone();
        let mut theta = drift.clone();
        if !linalg::solve_in_place(&mut s, &mut theta, d) {
            return Err(Error::InvalidCoefficients("gbm volatility matrix is singular".into()));
        }
        let name = if d == 1 {
            format!("gbm(b={}, s={})", drift[0], vol[0])
        } else {
            format!("gbm(d={d})")
        };
        Ok(Self {
            name,
            kind: ModelKind::Gbm { drift: drift.clone(), vol: vol.clone() },
            coeffs: Arc::new(GbmCoefficients { drift, vol, theta }),
        })
    }

    pub fn gbm_scalar(b: f64, s: f64) -> Result<Self> {
        Self::gbm(vec![b], vec![s])
    }

    pub fn bessel3() -> Self {
        Self {
            name: "bessel3".into(),
            kind: ModelKind::Bessel3,
            coeffs: Arc::new(Bessel3Coefficients),
        }
    }

    /// Wraps arbitrary coefficients without validation sampling; see [`validate`].
    pub fn from_coefficients(name: impl Into<String>, coeffs: Arc<dyn Coefficients>) -> Self {
        Self { name: name.into(), kind: ModelKind::Custom, coeffs }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coeffs.as_ref()
    }

    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.coeffs.drift(x, &mut out);
        out
    }

    /// `s(x)`, row-major.
    pub fn volatility(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.coeffs.volatility(x, &mut out);
        out
    }

    /// `a(x) = s(x) s(x)'`.
    pub fn covariance(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let s = self.volatility(x);
        let mut a = vec![0.0; d * d];
        linalg::outer_self(&s, d, &mut a);
        a
    }

    /// Absolute drift `mu_i(x) = b_i(x) x_i`.
    pub fn absolute_drift(&self, x: &[f64]) -> Vec<f64> {
        self.drift(x).iter().zip(x).map(|(b, xi)| b * xi).collect()
    }

    /// Absolute volatility `sigma_ik(x) = s_ik(x) x_i`.
    pub fn absolute_volatility(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut s = self.volatility(x);
        for i in 0..d {
            for k in 0..d {
                s[i * d + k] *= x[i];
            }
        }
        s
    }

    /// `alpha(x) = sigma(x) sigma(x)'`.
    pub fn absolute_covariance(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let sigma = self.absolute_volatility(x);
        let mut alpha = vec![0.0; d * d];
        linalg::outer_self(&sigma, d, &mut alpha);
        alpha
    }

    pub fn market_price_of_risk(&self, x: &[f64]) -> Result<Vec<f64>> {
        market_price_of_risk(self, x)
    }
}

/// `theta(x)` solving `s(x) theta = b(x)`, with a conditioning check on `s(x)`.
pub fn market_price_of_risk(model: &MarketModel, x: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    if x.len() != d || x.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("x = {x:?} is not a point of the positive orthant of dimension {d}")));
    }
    let s = model.volatility(x);
    let condition = linalg::condition_number(&s, d);
    if condition > MAX_CONDITION {
        return Err(Error::SingularDiffusion { x: x.to_vec(), condition });
    }
    let mut theta = vec![0.0; d];
    if !model.coefficients().theta_into(x, &mut theta) {
        return Err(Error::SingularDiffusion { x: x.to_vec(), condition });
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gbm_theta_is_b_over_s() {
        let m = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
        let th = market_price_of_risk(&m, &[3.0]).unwrap();
        assert!((th[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bessel_theta_at_two() {
        let m = MarketModel::bessel3();
        let th = market_price_of_risk(&m, &[2.0]).unwrap();
        assert_eq!(th[0], 0.5);
        for &x in &[0.01, 0.3, 1.0, 7.5, 1e3] {
            assert_eq!(m.market_price_of_risk(&[x]).unwrap()[0] * x, 1.0);
        }
    }

    #[test]
    fn diagonal_two_dim() {
        let m = MarketModel::gbm(vec![0.1, 0.1], vec![0.2, 0.0, 0.0, 0.4]).unwrap();
        let th = market_price_of_risk(&m, &[1.0, 2.0]).unwrap();
        assert!((th[0] - 0.5).abs() < 1e-15);
        assert!((th[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_drift_gbm_has_zero_theta() {
        let m = MarketModel::gbm_scalar(0.0, 0.2).unwrap();
        assert_eq!(market_price_of_risk(&m, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn singular_gbm_rejected() {
        assert!(matches!(
            MarketModel::gbm(vec![0.1, 0.1], vec![1.0, 2.0, 2.0, 4.0]),
            Err(Error::InvalidCoefficients(_))
        ));
    }

    #[test]
    fn derived_quantities_are_consistent() {
        let m = MarketModel::gbm(vec![0.1, 0.05], vec![0.2, 0.05, -0.1, 0.3]).unwrap();
        let x = [1.5, 0.7];
        let sigma = m.absolute_volatility(&x);
        let alpha = m.absolute_covariance(&x);
        let a = m.covariance(&x);
        for i in 0..2 {
            for j in 0..2 {
                assert!((alpha[i * 2 + j] - a[i * 2 + j] * x[i] * x[j]).abs() < 1e-15);
            }
            assert!((sigma[i * 2] - m.volatility(&x)[i * 2] * x[i]).abs() < 1e-15);
        }
        let mu = m.absolute_drift(&x);
        assert!((mu[0] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn rejects_points_off_the_orthant() {
        let m = MarketModel::bessel3();
        assert!(matches!(market_price_of_risk(&m, &[0.0]), Err(Error::Domain(_))));
        assert!(matches!(market_price_of_risk(&m, &[-1.0]), Err(Error::Domain(_))));
    }
}
