//! Named model constructors. Each kind is a [`ModelFactory`] registered under its name;
//! configs select one by `kind`.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{validate, ExprCoefficients, MarketModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbmParameters {
    pub b: Vec<f64>,
    /// Rows of the volatility matrix.
    pub s: Vec<Vec<f64>>,
}

/// The `[model]` section of a run config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: String,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub parameters: Option<GbmParameters>,
    /// Expressions for `b_i` (custom models).
    #[serde(default)]
    pub drift: Vec<String>,
    /// Expressions for `s_ij`, one row per stock (custom models).
    #[serde(default)]
    pub volatility: Vec<Vec<String>>,
    /// Points used by validation sampling; defaults to `{0.5, 1, 2}^d`.
    #[serde(default)]
    pub probes: Option<Vec<Vec<f64>>>,
}

impl ModelSpec {
    pub fn bessel3() -> Self {
        Self { kind: "bessel3".into(), ..Default::default() }
    }

    pub fn gbm(b: f64, s: f64) -> Self {
        Self {
            kind: "gbm".into(),
            parameters: Some(GbmParameters { b: vec![b], s: vec![vec![s]] }),
            ..Default::default()
        }
    }
}

pub trait ModelFactory: Send + Sync {
    fn kind(&self) -> &'static str;
    fn build(&self, spec: &ModelSpec) -> Result<MarketModel>;
}

struct GbmFactory;

impl ModelFactory for GbmFactory {
    fn kind(&self) -> &'static str {
        "gbm"
    }

    fn build(&self, spec: &ModelSpec) -> Result<MarketModel> {
        let params = spec
            .parameters
            .as_ref()
            .ok_or_else(|| Error::Config("gbm requires [model.parameters] with b and s".into()))?;
        let d = params.b.len();
        if let Some(dim) = spec.dim {
            if dim != d {
                return Err(Error::Config(format!("dim = {dim} but b has {d} entries")));
            }
        }
        if params.s.len() != d || params.s.iter().any(|r| r.len() != d) {
            return Err(Error::Config(format!("gbm s must be a {d}x{d} matrix")));
        }
        let vol = params.s.iter().flatten().copied().collect();
        MarketModel::gbm(params.b.clone(), vol)
    }
}

struct Bessel3Factory;

impl ModelFactory for Bessel3Factory {
    fn kind(&self) -> &'static str {
        "bessel3"
    }

    fn build(&self, spec: &ModelSpec) -> Result<MarketModel> {
        if spec.dim.is_some_and(|d| d != 1) {
            return Err(Error::Config("bessel3 is one-dimensional".into()));
        }
        Ok(MarketModel::bessel3())
    }
}

struct CustomFactory;

impl ModelFactory for CustomFactory {
    fn kind(&self) -> &'static str {
        "custom"
    }

    fn build(&self, spec: &ModelSpec) -> Result<MarketModel> {
        let coeffs = ExprCoefficients::parse(&spec.drift, &spec.volatility)?;
        let d = spec.drift.len();
        if spec.dim.is_some_and(|dim| dim != d) {
            return Err(Error::Config(format!("dim = {:?} but {d} drift expressions given", spec.dim)));
        }
        let name = spec.name.clone().unwrap_or_else(|| "custom".into());
        let model = MarketModel::from_coefficients(name, Arc::new(coeffs));
        let probes = spec.probes.clone().unwrap_or_else(|| default_probes(d));
        let diag = validate(&model, &probes);
        if !diag.passed() {
            return Err(Error::InvalidCoefficients(diag.violations.join("; ")));
        }
        Ok(model)
    }
}

fn default_probes(d: usize) -> Vec<Vec<f64>> {
    let levels = [0.5, 1.0, 2.0];
    let mut out = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|p: Vec<f64>| {
                levels.iter().map(move |&l| {
                    let mut q = p.clone();
                    q.push(l);
                    q
                })
            })
            .collect();
    }
    out
}

pub struct ModelRegistry {
    factories: BTreeMap<&'static str, Box<dyn ModelFactory>>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Box::new(GbmFactory));
        reg.register(Box::new(Bessel3Factory));
        reg.register(Box::new(CustomFactory));
        reg
    }

    pub fn register(&mut self, factory: Box<dyn ModelFactory>) {
        self.factories.insert(factory.kind(), factory);
    }

    pub fn kinds(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    pub fn build(&self, spec: &ModelSpec) -> Result<MarketModel> {
        let factory = self
            .factories
            .get(spec.kind.as_str())
            .ok_or_else(|| Error::UnknownModel(spec.kind.clone()))?;
        let model = factory.build(spec)?;
        Ok(match &spec.name {
            Some(n) => model.with_name(n.clone()),
            None => model,
        })
    }
}

/// Builds a model from the built-in registry.
pub fn builtin_model(spec: &ModelSpec) -> Result<MarketModel> {
    ModelRegistry::builtin().build(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ModelKind;

    #[test]
    fn bessel3_has_reciprocal_theta() {
        let m = builtin_model(&ModelSpec::bessel3()).unwrap();
        assert_eq!(m.kind(), &ModelKind::Bessel3);
        assert_eq!(m.market_price_of_risk(&[4.0]).unwrap(), vec![0.25]);
    }

    #[test]
    fn gbm_variants() {
        let m = builtin_model(&ModelSpec::gbm(0.0, 0.2)).unwrap();
        assert_eq!(m.market_price_of_risk(&[1.0]).unwrap(), vec![0.0]);
        let m = builtin_model(&ModelSpec::gbm(0.1, 0.2)).unwrap();
        assert!((m.market_price_of_risk(&[1.0]).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_kind() {
        let spec = ModelSpec { kind: "heston".into(), ..Default::default() };
        assert!(matches!(builtin_model(&spec), Err(Error::UnknownModel(k)) if k == "heston"));
    }

    #[test]
    fn custom_with_singular_probe_is_rejected() {
        let spec = ModelSpec {
            kind: "custom".into(),
            drift: vec!["0.1".into()],
            volatility: vec![vec!["x - 1".into()]],
            ..Default::default()
        };
        assert!(matches!(builtin_model(&spec), Err(Error::InvalidCoefficients(_))));
    }

    #[test]
    fn custom_bessel_matches_builtin() {
        let spec = ModelSpec {
            kind: "custom".into(),
            drift: vec!["1/x^2".into()],
            volatility: vec![vec!["1/x".into()]],
            ..Default::default()
        };
        let m = builtin_model(&spec).unwrap();
        for x in [0.3, 1.0, 2.0] {
            let a = m.market_price_of_risk(&[x]).unwrap()[0];
            assert!((a - 1.0 / x).abs() < 1e-14);
        }
    }
}
