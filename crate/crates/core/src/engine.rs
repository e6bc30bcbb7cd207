//! Pricing methods selected by name at run time.
//!
//! `mc` works on terminal samples, `pde` on the dual finite-difference surface with a
//! one-slice conjugate at `x0`, and `pipeline` conjugates the whole surface and
//! extrapolates `eps -> 0` across the configured regularization levels.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::config::RunConfig;
use crate::duality::{ConvexGridFunction, CubicConvex, Domain, SmoothConvex};
use crate::error::{Error, Result};
use crate::market::{MarketModel, Payoff};
use crate::montecarlo::{self, Estimate, SampleSet};
use crate::pde::{conjugate_slice, dual_to_primal, solve_dual_pde, Surface};
use crate::sde::{default_scheme_for, simulate_terminal, SimConfig};

/// Everything a method needs besides the evaluation grid.
pub struct RunContext {
    pub config: RunConfig,
    pub model: MarketModel,
    pub payoff: Payoff,
    pub x0: Vec<f64>,
}

impl RunContext {
    pub fn new(config: RunConfig) -> Result<Self> {
        let model = config.build_model()?;
        let payoff = config.build_payoff(model.dim())?;
        let x0 = config.x0(model.dim())?;
        Ok(Self { config, model, payoff, x0 })
    }

    pub fn scheme(&self) -> String {
        self.config.run.scheme.clone().unwrap_or_else(|| default_scheme_for(&self.model).to_string())
    }

    pub fn sim_config(&self) -> SimConfig {
        let r = &self.config.run;
        SimConfig::new(self.config.grid.horizon, r.n_steps, r.n_paths, r.seed, &self.scheme())
    }

    /// Terminal samples `Z(T) g(X(T))` with the auxiliary Brownian draws attached.
    pub fn samples(&self) -> Result<SampleSet> {
        let draws = simulate_terminal(&self.model, &self.x0, &self.sim_config())?;
        SampleSet::from_terminal(&draws, &self.payoff)
    }

    pub fn solve(&self, epsilon: f64) -> Result<(Surface, Vec<String>)> {
        let grid = self.config.dual_grid(self.model.dim(), epsilon)?;
        let (w, report) = solve_dual_pde(&self.model, &self.payoff, &grid, &self.config.solve_options())?;
        Ok((w, report.warnings))
    }
}

/// Values on an axis plus diagnostics raised while computing them.
#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub axis: Vec<f64>,
    pub points: Vec<Estimate>,
    pub notes: Vec<String>,
}

impl Curve {
    fn exact(axis: &[f64], values: Vec<f64>, notes: Vec<String>) -> Self {
        let points = values.into_iter().map(|value| Estimate { value, std_error: 0.0, n: 0 }).collect();
        Self { axis: axis.to_vec(), points, notes }
    }
}

pub trait PricingMethod: Send + Sync {
    fn name(&self) -> &'static str;
    /// `V(0, x0, p)` on `p_grid`.
    fn price_curve(&self, ctx: &RunContext, p_grid: &[f64]) -> Result<Curve>;
    /// `w_eps(0, x0, q)` on `q_grid`; `epsilon = 0` is the unregularized dual.
    fn dual_curve(&self, ctx: &RunContext, q_grid: &[f64], epsilon: f64) -> Result<Curve>;
}

pub struct MonteCarlo;

impl PricingMethod for MonteCarlo {
    fn name(&self) -> &'static str {
        "mc"
    }

    fn price_curve(&self, ctx: &RunContext, p_grid: &[f64]) -> Result<Curve> {
        let points = montecarlo::quantile_curve(&ctx.samples()?, p_grid)?;
        Ok(Curve { axis: p_grid.to_vec(), points, notes: Vec::new() })
    }

    fn dual_curve(&self, ctx: &RunContext, q_grid: &[f64], epsilon: f64) -> Result<Curve> {
        let samples = ctx.samples()?;
        let points = if epsilon == 0.0 {
            montecarlo::dual_curve(&samples, q_grid)?
        } else {
            montecarlo::dual_curve_regularized(&samples, q_grid, epsilon)?
        };
        Ok(Curve { axis: q_grid.to_vec(), points, notes: Vec::new() })
    }
}

/// The `t = t0` slice of a surface at `x`, linear in `ln x` between nodes.
fn slice_at(s: &Surface, x: &[f64]) -> Vec<f64> {
    s.grid.axis_nodes().iter().map(|&a| s.interpolate(s.grid.t0, x, a)).collect()
}

fn check_axis(s: &Surface, axis: &[f64]) -> Result<()> {
    let (lo, hi) = (s.grid.axis_min, s.grid.axis_max);
    match axis.iter().find(|&&a| a < lo || a > hi) {
        Some(a) => Err(Error::Config(format!("{} = {a} lies outside the grid [{lo}, {hi}]", s.grid.axis.label()))),
        None => Ok(()),
    }
}

/// Evaluates a convex slice between nodes with the same C2/C1 reconstruction used
/// by the conjugation.
fn eval_convex(nodes: Vec<f64>, values: Vec<f64>, domain: Domain, at: &[f64]) -> Result<Vec<f64>> {
    let f = ConvexGridFunction::new(nodes, values, domain)?;
    Ok(match CubicConvex::new(&f, None) {
        Some(c) => at.iter().map(|&a| c.value(a)).collect(),
        None => {
            let s = SmoothConvex::new(&f, None);
            at.iter().map(|&a| s.value(a)).collect()
        }
    })
}

fn truncation_note(ps: &[f64], cut: &[usize]) -> Option<String> {
    (!cut.is_empty()).then(|| {
        let listed: Vec<String> = cut.iter().map(|&i| format!("{}", ps[i])).collect();
        format!("maximizer pinned at q_max for p in {{{}}}; enlarge q_max", listed.join(", "))
    })
}

pub struct Pde;

impl Pde {
    fn dual_at(ctx: &RunContext, q_grid: &[f64], epsilon: f64) -> Result<Curve> {
        let (w, notes) = ctx.solve(epsilon)?;
        check_axis(&w, q_grid)?;
        let values = eval_convex(w.grid.axis_nodes(), slice_at(&w, &ctx.x0), Domain::Q, q_grid)?;
        Ok(Curve::exact(q_grid, values, notes))
    }
}

impl PricingMethod for Pde {
    fn name(&self) -> &'static str {
        "pde"
    }

    fn price_curve(&self, ctx: &RunContext, p_grid: &[f64]) -> Result<Curve> {
        let (w, mut notes) = ctx.solve(ctx.config.run.epsilon)?;
        let (values, cut) = conjugate_slice(&w.grid.axis_nodes(), &slice_at(&w, &ctx.x0), p_grid, &ctx.config.primal_options())?;
        notes.extend(truncation_note(p_grid, &cut));
        Ok(Curve::exact(p_grid, values, notes))
    }

    fn dual_curve(&self, ctx: &RunContext, q_grid: &[f64], epsilon: f64) -> Result<Curve> {
        Self::dual_at(ctx, q_grid, epsilon)
    }
}

/// Value at 0 of the polynomial through `(xs[i], ys[i])` (Neville).
pub fn extrapolate_to_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (xs[i + m] * p[i] - xs[i] * p[i + 1]) / (xs[i + m] - xs[i]);
        }
    }
    p[0]
}

pub struct Pipeline;

impl Pipeline {
    /// Regularization levels used for `eps -> 0`; a single level means no extrapolation.
    pub fn levels(config: &RunConfig) -> Vec<f64> {
        match &config.run.epsilons {
            Some(e) if e.len() >= 2 => e.clone(),
            _ => vec![config.run.epsilon],
        }
    }

    /// `U_eps(0, x0, p)` from the conjugated surface.
    pub fn primal_at(ctx: &RunContext, epsilon: f64, p_grid: &[f64]) -> Result<(Vec<f64>, Vec<String>)> {
        let (w, mut notes) = ctx.solve(epsilon)?;
        let u = dual_to_primal(&w, &ctx.payoff, &ctx.config.primal_options())?;
        check_axis(&u, p_grid)?;
        if !u.truncated.is_empty() {
            notes.push(format!("eps = {epsilon}: {} primal nodes truncated at q_max", u.truncated.len()));
        }
        let values = eval_convex(u.grid.axis_nodes(), slice_at(&u, &ctx.x0), Domain::P, p_grid)?;
        Ok((values, notes))
    }
}

impl PricingMethod for Pipeline {
    fn name(&self) -> &'static str {
        "pipeline"
    }

    fn price_curve(&self, ctx: &RunContext, p_grid: &[f64]) -> Result<Curve> {
        let levels = Self::levels(&ctx.config);
        let mut notes = Vec::new();
        let mut per_level = Vec::with_capacity(levels.len());
        for &eps in &levels {
            let (values, n) = Self::primal_at(ctx, eps, p_grid)?;
            notes.extend(n);
            per_level.push(values);
        }
        if levels.len() > 1 {
            notes.push(format!("extrapolated to eps = 0 from eps in {levels:?}"));
        }
        let values = (0..p_grid.len())
            .map(|j| {
                let ys: Vec<f64> = per_level.iter().map(|v| v[j]).collect();
                // p = 0 is exactly 0 on every level
                if p_grid[j] == 0.0 { 0.0 } else { extrapolate_to_zero(&levels, &ys) }
            })
            .collect();
        Ok(Curve::exact(p_grid, values, notes))
    }

    fn dual_curve(&self, ctx: &RunContext, q_grid: &[f64], epsilon: f64) -> Result<Curve> {
        Pde::dual_at(ctx, q_grid, epsilon)
    }
}

pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Arc<dyn PricingMethod>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self { methods: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(MonteCarlo));
        r.register(Arc::new(Pde));
        r.register(Arc::new(Pipeline));
        r
    }

    pub fn register(&mut self, method: Arc<dyn PricingMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.methods.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn PricingMethod>> {
        self.methods.get(name).cloned().ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    fn ctx(extra: &str) -> RunContext {
        let text = format!(
            "[model]\nkind = \"bessel3\"\n[grid]\nn_t = 17\nn_x = [65]\nn_q = 129\nn_p = 41\n[run]\nn_paths = 20000\nseed = 3\n{extra}"
        );
        RunContext::new(RunConfig::from_toml(&text).unwrap()).unwrap()
    }

    #[test]
    fn neville_recovers_polynomials() {
        let f = |e: f64| 0.5 - 0.4 * e + 0.3 * e * e;
        let xs = [0.2, 0.1, 0.05];
        let ys: Vec<f64> = xs.iter().map(|&e| f(e)).collect();
        assert!((extrapolate_to_zero(&xs, &ys) - 0.5).abs() < 1e-14);
        assert_eq!(extrapolate_to_zero(&[0.3], &[1.7]), 1.7);
    }

    #[test]
    fn registry_lookup() {
        let r = MethodRegistry::builtin();
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["mc", "pde", "pipeline"]);
        assert!(matches!(r.get("fd"), Err(Error::UnknownMethod(_))));
    }

    #[test]
    fn mc_bessel_price_is_px() {
        let c = MonteCarlo.price_curve(&ctx(""), &[0.0, 0.5, 1.0]).unwrap();
        for (p, e) in c.axis.iter().zip(&c.points) {
            assert!((e.value - p).abs() < 1e-12);
        }
    }

    #[test]
    fn pde_dual_matches_regularized_oracle_off_nodes() {
        let c = Pde.dual_curve(&ctx(""), &[0.33, 0.97, 1.41], 0.2).unwrap();
        for (q, e) in c.axis.iter().zip(&c.points) {
            let exact = oracles::bessel_dual_regularized(1.0, *q, 0.2, 1.0).unwrap();
            assert!((e.value - exact).abs() < 2e-3, "q={q}: {} vs {exact}", e.value);
        }
        assert!(Pde.dual_curve(&ctx(""), &[5.0], 0.2).is_err());
    }

    #[test]
    fn pde_and_pipeline_prices_agree_with_oracle() {
        let ps = [0.0, 0.25, 0.5, 0.75];
        let c = ctx("epsilon = 0.1");
        let a = Pde.price_curve(&c, &ps).unwrap();
        let b = Pipeline.price_curve(&c, &ps).unwrap();
        for (j, &p) in ps.iter().enumerate() {
            let exact = oracles::bessel_quantile_value_regularized(1.0, p, 0.1, 1.0).unwrap();
            assert!((a.points[j].value - exact).abs() < 5e-3, "pde p={p}");
            assert!((b.points[j].value - exact).abs() < 5e-3, "pipeline p={p}");
        }
    }

    #[test]
    fn pipeline_extrapolates_to_unregularized_value() {
        let c = ctx("epsilons = [0.2, 0.1, 0.05]");
        let b = Pipeline.price_curve(&c, &[0.5]).unwrap();
        assert!((b.points[0].value - 0.5).abs() < 0.01, "{}", b.points[0].value);
        assert!(b.notes.iter().any(|n| n.contains("extrapolated")));
    }
}
