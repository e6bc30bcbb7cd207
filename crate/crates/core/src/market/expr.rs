//! Coefficients given as expression strings in the stock variables.
//!
//! Variables are `x1 .. xd` (and `x` as an alias of `x1` when d = 1). Besides the
//! `math::*` builtins of `evalexpr`, the short names `exp`, `ln`, `log`, `sqrt`, `abs`,
//! `sin`, `cos`, `tanh` and `pow(a, b)` are available. Integer literals are read as
//! floats, so `1/2` evaluates to 0.5.

use std::fmt;

use evalexpr::error::EvalexprResultValue;
use evalexpr::{
    build_operator_tree, Context, DefaultNumericTypes, EvalexprError, EvalexprResult,
    Node, Value,
};

use super::Coefficients;
use crate::error::{Error, Result};

type V = Value<DefaultNumericTypes>;

/// A compiled scalar expression of the stock vector.
#[derive(Clone)]
pub struct Expr {
    source: String,
    node: Node<DefaultNumericTypes>,
    dim: usize,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl Expr {
    pub fn parse(source: &str, dim: usize) -> Result<Self> {
        let promoted = promote_int_literals(source);
        let node = build_operator_tree::<DefaultNumericTypes>(&promoted)
            .map_err(|e| Error::Expression(format!("`{source}`: {e}")))?;
        for ident in node.iter_variable_identifiers() {
            if variable_index(ident, dim).is_none() {
                return Err(Error::Expression(format!(
                    "`{source}`: unknown variable `{ident}` (expected x1..x{dim})"
                )));
            }
        }
        Ok(Self { source: source.to_string(), node, dim })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluates at `x`; evaluation failures come back as NaN.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.try_eval(x).unwrap_or(f64::NAN)
    }

    pub fn try_eval(&self, x: &[f64]) -> Result<f64> {
        let ctx = PointContext {
            values: x.iter().map(|&v| Value::Float(v)).collect(),
            dim: self.dim,
        };
        self.node
            .eval_number_with_context(&ctx)
            .map_err(|e| Error::Expression(format!("`{}`: {e}", self.source)))
    }
}

fn variable_index(ident: &str, dim: usize) -> Option<usize> {
    if ident == "x" && dim == 1 {
        return Some(0);
    }
    let idx: usize = ident.strip_prefix('x')?.parse().ok()?;
    (1..=dim).contains(&idx).then(|| idx - 1)
}

/// Appends `.0` to bare integer literals so arithmetic stays in floating point.
fn promote_int_literals(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 8);
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let prev_is_ident = i > 0 && (chars[i - 1].is_alphanumeric() || chars[i - 1] == '_' || chars[i - 1] == '.');
        if c.is_ascii_digit() && !prev_is_ident {
            let start = i;
            let mut is_float = false;
            while i < chars.len() && chars[i].is_ascii_digit() {
                i += 1;
            }
            if chars.get(i) == Some(&'.') {
                is_float = true;
                i += 1;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if matches!(chars.get(i), Some('e') | Some('E')) {
                let mut j = i + 1;
                if matches!(chars.get(j), Some('+') | Some('-')) {
                    j += 1;
                }
                if chars.get(j).is_some_and(|c| c.is_ascii_digit()) {
                    is_float = true;
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            out.extend(&chars[start..i]);
            if !is_float && !chars.get(i).is_some_and(|n| n.is_alphanumeric() || *n == '_') {
                out.push_str(".0");
            }
            continue;
        }
        out.push(c);
        i += 1;
    }
    out
}

struct PointContext {
    values: Vec<V>,
    dim: usize,
}

impl Context for PointContext {
    type NumericTypes = DefaultNumericTypes;

    fn get_value(&self, identifier: &str) -> Option<&V> {
        variable_index(identifier, self.dim).map(|i| &self.values[i])
    }

    fn call_function(&self, identifier: &str, argument: &V) -> EvalexprResultValue<DefaultNumericTypes> {
        let unary = |f: fn(f64) -> f64| -> EvalexprResultValue<DefaultNumericTypes> {
            Ok(Value::Float(f(argument.as_number()?)))
        };
        match identifier {
            "exp" => unary(f64::exp),
            "ln" | "log" => unary(f64::ln),
            "sqrt" => unary(f64::sqrt),
            "abs" => unary(f64::abs),
            "sin" => unary(f64::sin),
            "cos" => unary(f64::cos),
            "tanh" => unary(f64::tanh),
            "pow" => {
                let args = argument.as_fixed_len_tuple(2)?;
                Ok(Value::Float(args[0].as_number()?.powf(args[1].as_number()?)))
            }
            _ => Err(EvalexprError::FunctionIdentifierNotFound(identifier.to_string())),
        }
    }

    fn are_builtin_functions_disabled(&self) -> bool {
        false
    }

    fn set_builtin_functions_disabled(&mut self, disabled: bool) -> EvalexprResult<(), DefaultNumericTypes> {
        if disabled {
            Err(EvalexprError::BuiltinFunctionsCannotBeDisabled)
        } else {
            Ok(())
        }
    }
}

/// Drift and volatility given entrywise as expressions.
#[derive(Debug, Clone)]
pub struct ExprCoefficients {
    dim: usize,
    drift: Vec<Expr>,
    vol: Vec<Expr>,
}

impl ExprCoefficients {
    /// `drift` has d entries, `vol` has d rows of d entries.
    pub fn parse(drift: &[String], vol: &[Vec<String>]) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 {
            return Err(Error::InvalidCoefficients("empty drift vector".into()));
        }
        if vol.len() != dim || vol.iter().any(|row| row.len() != dim) {
            return Err(Error::InvalidCoefficients(format!(
                "volatility must be a {dim}x{dim} matrix of expressions"
            )));
        }
        let drift = drift.iter().map(|s| Expr::parse(s, dim)).collect::<Result<Vec<_>>>()?;
        let vol = vol
            .iter()
            .flatten()
            .map(|s| Expr::parse(s, dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, drift, vol })
    }

    pub fn drift_sources(&self) -> Vec<&str> {
        self.drift.iter().map(Expr::source).collect()
    }

    pub fn vol_sources(&self) -> Vec<&str> {
        self.vol.iter().map(Expr::source).collect()
    }
}

impl Coefficients for ExprCoefficients {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.drift) {
            *o = e.eval(x);
        }
    }

    fn volatility(&self, x: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.vol) {
            *o = e.eval(x);
        }
    }
}
