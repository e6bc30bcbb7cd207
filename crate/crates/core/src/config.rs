//! Run configuration read from TOML with `[model]`, `[payoff]`, `[grid]` and `[run]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::duality::Domain;
use crate::error::{Error, Result};
use crate::market::{builtin_model, GrowthClass, MarketModel, ModelSpec, Payoff};
use crate::pde::{GridSpec, PrimalOptions, ResidualWindow, SolveOptions, VerifyOptions};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffSpec {
    /// `g(x) = x_1 + ... + x_d`.
    #[default]
    Identity,
    Linear { weights: Vec<f64> },
    Constant { value: f64 },
    Expression {
        expr: String,
        #[serde(default)]
        growth: GrowthClass,
    },
}

impl PayoffSpec {
    pub fn build(&self, dim: usize) -> Result<Payoff> {
        match self {
            PayoffSpec::Identity => Ok(Payoff::identity(dim)),
            PayoffSpec::Linear { weights } => {
                if weights.len() != dim {
                    return Err(Error::Config(format!("payoff has {} weights for {dim} stocks", weights.len())));
                }
                Payoff::linear(weights.clone())
            }
            PayoffSpec::Constant { value } => Payoff::constant(*value),
            PayoffSpec::Expression { expr, growth } => Payoff::expression(expr, dim, *growth),
        }
    }
}

fn default_horizon() -> f64 {
    1.0
}

/// Time horizon, starting point and the finite-difference grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Initial stock prices; defaults to 1 in every coordinate.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "GridSection::default_n_t")]
    pub n_t: usize,
    #[serde(default)]
    pub x_min: Option<Vec<f64>>,
    #[serde(default)]
    pub x_max: Option<Vec<f64>>,
    #[serde(default)]
    pub n_x: Option<Vec<usize>>,
    #[serde(default = "GridSection::default_q_max")]
    pub q_max: f64,
    #[serde(default = "GridSection::default_n_q")]
    pub n_q: usize,
    #[serde(default = "GridSection::default_n_p")]
    pub n_p: usize,
    #[serde(default = "GridSection::default_xi_per_q")]
    pub xi_per_q: usize,
    #[serde(default = "GridSection::default_substeps")]
    pub substeps: usize,
}

impl GridSection {
    fn default_n_t() -> usize {
        33
    }
    fn default_q_max() -> f64 {
        4.0
    }
    fn default_n_q() -> usize {
        129
    }
    fn default_n_p() -> usize {
        101
    }
    fn default_xi_per_q() -> usize {
        8
    }
    fn default_substeps() -> usize {
        4
    }
}

impl Default for GridSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Mc,
    Pde,
    Pipeline,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Mc => "mc",
            MethodName::Pde => "pde",
            MethodName::Pipeline => "pipeline",
        }
    }
}

impl std::str::FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mc" => Ok(MethodName::Mc),
            "pde" => Ok(MethodName::Pde),
            "pipeline" => Ok(MethodName::Pipeline),
            other => Err(Error::UnknownMethod(other.to_string())),
        }
    }
}

/// Overrides of the verifier and residual settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    pub verify_tol: Option<f64>,
    pub terminal_tol: Option<f64>,
    pub tol_convex: Option<f64>,
    /// Residual window: `t <= t_max`, `p` in `[p_min, p_max]`, `x` in `[x_lo, x_hi]`.
    pub window_t_max: Option<f64>,
    pub window_p: Option<[f64; 2]>,
    pub window_x_lo: Option<Vec<f64>>,
    pub window_x_hi: Option<Vec<f64>>,
    /// `compare-oracle` accepts `|error| <= max(3 se, oracle_rel |oracle|, oracle_abs)`.
    pub oracle_rel: Option<f64>,
    pub oracle_abs: Option<f64>,
    /// Slack of the domination test in `verify --reference`.
    pub compare_tol: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "RunSection::default_method")]
    pub method: MethodName,
    /// Regularization used by single runs (`dual`, `solve`, `price` with the PDE).
    #[serde(default)]
    pub epsilon: f64,
    /// Regularization levels of `study-epsilon` and of the per-level dual tables.
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "RunSection::default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "RunSection::default_n_steps")]
    pub n_steps: usize,
    /// Simulation scheme; defaults to the exact sampler when one exists.
    #[serde(default)]
    pub scheme: Option<String>,
    #[serde(default = "RunSection::default_p_points")]
    pub p_points: usize,
    #[serde(default = "RunSection::default_q_points")]
    pub q_points: usize,
    /// `q` window of dual curves and of the epsilon study; defaults to `[0, q_max]`.
    #[serde(default)]
    pub q_window: Option<[f64; 2]>,
    #[serde(default = "RunSection::default_out")]
    pub out_dir: PathBuf,
    /// Also write surfaces as long-format CSV.
    #[serde(default)]
    pub surface_csv: bool,
    #[serde(default)]
    pub tolerances: Tolerances,
}

impl RunSection {
    fn default_method() -> MethodName {
        MethodName::Mc
    }
    fn default_n_paths() -> usize {
        100_000
    }
    fn default_n_steps() -> usize {
        256
    }
    fn default_p_points() -> usize {
        101
    }
    fn default_q_points() -> usize {
        201
    }
    fn default_out() -> PathBuf {
        PathBuf::from("out")
    }
}

impl Default for RunSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub payoff: PayoffSpec,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn check(&self) -> Result<()> {
        let r = &self.run;
        if let Some(eps) = &r.epsilons {
            if let Some(e) = eps.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
                return Err(Error::Config(format!("epsilons must be positive, got {e}")));
            }
        }
        if !(r.epsilon >= 0.0) || !r.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", r.epsilon)));
        }
        if r.n_paths == 0 || r.n_steps == 0 {
            return Err(Error::Config("n_paths and n_steps must be positive".into()));
        }
        if r.p_points < 2 || r.q_points < 2 {
            return Err(Error::Config("p_points and q_points must be at least 2".into()));
        }
        if let Some([lo, hi]) = r.q_window {
            if !(lo >= 0.0 && hi > lo && hi.is_finite()) {
                return Err(Error::Config(format!("q_window [{lo}, {hi}] is invalid")));
            }
        }
        if !(self.grid.horizon > 0.0) || !self.grid.horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.grid.horizon)));
        }
        Ok(())
    }

    pub fn build_model(&self) -> Result<MarketModel> {
        builtin_model(&self.model)
    }

    pub fn build_payoff(&self, dim: usize) -> Result<Payoff> {
        self.payoff.build(dim)
    }

    pub fn x0(&self, dim: usize) -> Result<Vec<f64>> {
        let x0 = self.grid.x0.clone().unwrap_or_else(|| vec![1.0; dim]);
        if x0.len() != dim || x0.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Config(format!("x0 = {x0:?} is not a positive point of dimension {dim}")));
        }
        Ok(x0)
    }

    /// `q`-domain grid for the dual solver at regularization `epsilon`.
    pub fn dual_grid(&self, dim: usize, epsilon: f64) -> Result<GridSpec> {
        let g = &self.grid;
        let x0 = self.x0(dim)?;
        let x_min = g.x_min.clone().unwrap_or_else(|| x0.iter().map(|x| x / 4.0).collect());
        let x_max = g.x_max.clone().unwrap_or_else(|| x0.iter().map(|x| x * 4.0).collect());
        let n_x = g.n_x.clone().unwrap_or_else(|| vec![if dim == 1 { 65 } else { 33 }; dim]);
        let grid = GridSpec {
            t0: 0.0,
            horizon: g.horizon,
            n_t: g.n_t,
            x_min,
            x_max,
            n_x,
            axis: Domain::Q,
            axis_min: 0.0,
            axis_max: g.q_max,
            n_axis: g.n_q,
            epsilon,
        };
        grid.validate().map_err(|e| Error::Config(format!("[grid]: {e}")))?;
        Ok(grid)
    }

    pub fn solve_options(&self) -> SolveOptions {
        SolveOptions { xi_per_q: self.grid.xi_per_q, substeps: self.grid.substeps, ..Default::default() }
    }

    pub fn primal_options(&self) -> PrimalOptions {
        PrimalOptions { n_p: self.grid.n_p, ..Default::default() }
    }

    /// Verifier settings. The default residual window keeps away from maturity, where
    /// the terminal kink is resolved by only a few steps, and from the `x` and `p` edges:
    /// `t <= T/2`, `p` in `[0.1, 0.9]`, `x` in `[x0/2, 2 x0]`.
    pub fn verify_options(&self, dim: usize) -> VerifyOptions {
        let t = &self.run.tolerances;
        let d = VerifyOptions::default();
        let x0 = self.grid.x0.clone().unwrap_or_else(|| vec![1.0; dim]);
        let mut window = ResidualWindow {
            t_max: 0.5 * self.grid.horizon,
            p_min: 0.1,
            p_max: 0.9,
            x_min: x0.iter().map(|x| x / 2.0).collect(),
            x_max: x0.iter().map(|x| x * 2.0).collect(),
        };
        if let Some(tm) = t.window_t_max {
            window.t_max = tm;
        }
        if let Some([lo, hi]) = t.window_p {
            window.p_min = lo;
            window.p_max = hi;
        }
        if let Some(lo) = &t.window_x_lo {
            window.x_min = lo.clone();
        }
        if let Some(hi) = &t.window_x_hi {
            window.x_max = hi.clone();
        }
        VerifyOptions {
            tol: t.verify_tol.or(d.tol),
            terminal_tol: t.terminal_tol.unwrap_or(d.terminal_tol),
            tol_convex: t.tol_convex.unwrap_or(d.tol_convex),
            window,
            ..d
        }
    }

    pub fn p_grid(&self) -> Vec<f64> {
        let n = self.run.p_points;
        (0..n).map(|i| if i + 1 == n { 1.0 } else { i as f64 / (n - 1) as f64 }).collect()
    }

    pub fn q_grid(&self) -> Vec<f64> {
        let [lo, hi] = self.run.q_window.unwrap_or([0.0, self.grid.q_max]);
        let n = self.run.q_points;
        (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = r#"
        [model]
        kind = "gbm"
        parameters = { b = [0.1], s = [[0.2]] }

        [payoff]
        kind = "linear"
        weights = [1.0]

        [grid]
        horizon = 1.0
        x0 = [1.0]
        n_t = 17
        x_min = [0.25]
        x_max = [4.0]
        n_x = [33]

        [run]
        method = "pipeline"
        epsilons = [0.5, 0.2, 0.1]
        seed = 7
        n_paths = 1000
        q_window = [0.2, 2.0]

        [run.tolerances]
        verify_tol = 0.05
        window_p = [0.1, 0.9]
    "#;

    #[test]
    fn parses_full_config() {
        let cfg = RunConfig::from_toml(FULL).unwrap();
        assert_eq!(cfg.run.method, MethodName::Pipeline);
        assert_eq!(cfg.run.epsilons.as_deref(), Some(&[0.5, 0.2, 0.1][..]));
        let model = cfg.build_model().unwrap();
        let payoff = cfg.build_payoff(model.dim()).unwrap();
        assert!(payoff.is_identity_1d());
        let grid = cfg.dual_grid(1, 0.1).unwrap();
        assert_eq!(grid.n_x, vec![33]);
        assert_eq!(cfg.q_grid()[0], 0.2);
        assert_eq!(*cfg.q_grid().last().unwrap(), 2.0);
        let v = cfg.verify_options(1);
        assert_eq!(v.window.x_min, vec![0.5]);
        assert_eq!(v.window.t_max, 0.5);
        assert_eq!(v.tol, Some(0.05));
        assert_eq!(v.window.p_min, 0.1);
    }

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = RunConfig::from_toml("[model]\nkind = \"bessel3\"\n").unwrap();
        assert_eq!(cfg.payoff, PayoffSpec::Identity);
        assert_eq!(cfg.run.method, MethodName::Mc);
        assert!(cfg.run.epsilons.is_none());
        assert_eq!(cfg.p_grid().len(), 101);
        assert_eq!(cfg.q_grid().len(), 201);
        assert_eq!(cfg.x0(1).unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(RunConfig::from_toml("[model]\nkind = \"bessel3\"\n[run]\nepsilons = [0.1, -1.0]\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nkind = \"bessel3\"\n[run]\nmethod = \"fd\"\n"), Err(Error::Toml(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nkind = \"bessel3\"\n[grid]\nbogus = 1\n"), Err(Error::Toml(_))));
        assert!(RunConfig::from_toml("[run]\nseed = 1\n").is_err());
    }
}
