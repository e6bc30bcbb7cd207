use serde::{Deserialize, Serialize};

use super::expr::Expr;
use crate::error::{Error, Result};

/// Growth of `g`, recorded to justify integrability of `Z(T) g(X(T))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GrowthClass {
    #[default]
    Linear,
    Bounded,
    Other,
}

/// The claim `g: (0, inf)^d -> (0, inf)` to be hedged at maturity.
#[derive(Debug, Clone)]
pub enum Payoff {
    /// `g(x) = sum_i w_i x_i` with nonnegative weights, not all zero.
    Linear { weights: Vec<f64> },
    Constant { value: f64 },
    Expression { expr: Expr, growth: GrowthClass },
}

impl Payoff {
    /// `g(x) = x_1 + ... + x_d`; for d = 1 this is `g(x) = x`.
    pub fn identity(dim: usize) -> Self {
        Payoff::Linear { weights: vec![1.0; dim] }
    }

    pub fn linear(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty()
            || weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
            || weights.iter().all(|&w| w == 0.0)
        {
            return Err(Error::InvalidPayoff(format!(
                "linear weights must be nonnegative, finite and not all zero: {weights:?}"
            )));
        }
        Ok(Payoff::Linear { weights })
    }

    pub fn constant(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::InvalidPayoff(format!("constant payoff must be positive, got {value}")));
        }
        Ok(Payoff::Constant { value })
    }

    pub fn expression(source: &str, dim: usize, growth: GrowthClass) -> Result<Self> {
        Ok(Payoff::Expression { expr: Expr::parse(source, dim)?, growth })
    }

    pub fn growth_class(&self) -> GrowthClass {
        match self {
            Payoff::Linear { .. } => GrowthClass::Linear,
            Payoff::Constant { .. } => GrowthClass::Bounded,
            Payoff::Expression { growth, .. } => *growth,
        }
    }

    /// `g(x)`. May be non-positive or NaN for a badly written expression; callers that
    /// need the invariant use [`Payoff::checked_value`].
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Payoff::Linear { weights } => weights.iter().zip(x).map(|(w, xi)| w * xi).sum(),
            Payoff::Constant { value } => *value,
            Payoff::Expression { expr, .. } => expr.eval(x),
        }
    }

    pub fn checked_value(&self, x: &[f64]) -> Result<f64> {
        let g = self.value(x);
        if g > 0.0 && g.is_finite() {
            Ok(g)
        } else {
            Err(Error::InvalidPayoff(format!("g({x:?}) = {g} is not positive")))
        }
    }

    /// True when `g(x) = x` in one dimension, the case the closed-form oracles cover.
    pub fn is_identity_1d(&self) -> bool {
        matches!(self, Payoff::Linear { weights } if weights.len() == 1 && weights[0] == 1.0)
    }

    pub fn describe(&self) -> String {
        match self {
            Payoff::Linear { weights } => format!("linear{weights:?}"),
            Payoff::Constant { value } => format!("constant({value})"),
            Payoff::Expression { expr, .. } => format!("expr({})", expr.source()),
        }
    }
}
