//! Time-stepping schemes for `(log X, log Z)`, registered by name.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::market::{MarketModel, ModelKind};
use crate::rng::{CounterRng, NormalSource};

/// Log-space floor that triggers Brownian-bridge halving of a log-Euler step.
pub const LOG_X_FLOOR: f64 = -30.0;
const MAX_REFINE_DEPTH: u32 = 24;

/// Mutable state of one path between steps.
#[derive(Debug, Clone)]
pub struct PathState {
    pub log_x: Vec<f64>,
    pub log_z: f64,
    /// Brownian increments of `W` driving the step just taken.
    pub dw: Vec<f64>,
    log_x0: Vec<f64>,
    scratch: Scratch,
}

#[derive(Debug, Clone)]
struct Scratch {
    x: Vec<f64>,
    next: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
    theta: Vec<f64>,
}

impl PathState {
    pub fn new(x0: &[f64]) -> Self {
        let d = x0.len();
        let log_x: Vec<f64> = x0.iter().map(|v| v.ln()).collect();
        Self {
            log_x0: log_x.clone(),
            log_x,
            log_z: 0.0,
            dw: vec![0.0; d],
            scratch: Scratch {
                x: vec![0.0; d],
                next: vec![0.0; d],
                b: vec![0.0; d],
                s: vec![0.0; d * d],
                theta: vec![0.0; d],
            },
        }
    }

    fn is_finite(&self) -> bool {
        self.log_z.is_finite() && self.log_x.iter().all(|v| v.is_finite())
    }
}

/// Lazily opened refinement stream for one `(path, step)`.
pub struct Refiner<'a> {
    rng: &'a CounterRng,
    path: u64,
    step: u64,
    source: Option<NormalSource>,
}

impl<'a> Refiner<'a> {
    pub fn new(rng: &'a CounterRng, path: u64, step: u64) -> Self {
        Self { rng, path, step, source: None }
    }

    pub fn normal(&mut self) -> f64 {
        let (rng, path, step) = (self.rng, self.path, self.step);
        self.source.get_or_insert_with(|| rng.refinement(path, step)).next()
    }
}

pub trait Scheme: Send + Sync {
    fn name(&self) -> &'static str;

    /// Rejects models the scheme cannot simulate.
    fn check_model(&self, model: &MarketModel) -> Result<()>;

    /// Standard normals consumed per step on the stock side.
    fn normals_per_step(&self, dim: usize) -> usize;

    /// Advances `state` by `dt`. Returns false if the state became non-finite.
    fn advance(
        &self,
        model: &MarketModel,
        state: &mut PathState,
        dt: f64,
        normals: &[f64],
        refiner: &mut Refiner<'_>,
    ) -> bool;
}

/// Euler scheme on `log X` and `log Z` sharing the same `W` increments.
#[derive(Debug, Default)]
pub struct LogEuler;

impl LogEuler {
    /// Writes the Euler update into `scratch.next` and returns the new `log Z`.
    fn try_substep(model: &MarketModel, state: &mut PathState, dt: f64, dw: &[f64]) -> Option<f64> {
        let d = state.log_x.len();
        let c = model.coefficients();
        let sc = &mut state.scratch;
        for (x, lx) in sc.x.iter_mut().zip(&state.log_x) {
            *x = lx.exp();
        }
        c.drift(&sc.x, &mut sc.b);
        c.volatility(&sc.x, &mut sc.s);
        if !c.theta_into(&sc.x, &mut sc.theta) {
            return None;
        }
        let mut theta_sq = 0.0;
        let mut theta_dw = 0.0;
        for k in 0..d {
            theta_sq += sc.theta[k] * sc.theta[k];
            theta_dw += sc.theta[k] * dw[k];
        }
        for i in 0..d {
            let row = &sc.s[i * d..(i + 1) * d];
            let a_ii: f64 = row.iter().map(|v| v * v).sum();
            let diffusion: f64 = row.iter().zip(dw).map(|(s, w)| s * w).sum();
            sc.next[i] = state.log_x[i] + (sc.b[i] - 0.5 * a_ii) * dt + diffusion;
        }
        Some(state.log_z - 0.5 * theta_sq * dt - theta_dw)
    }

    fn advance_refined(
        model: &MarketModel,
        state: &mut PathState,
        dt: f64,
        dw: &[f64],
        refiner: &mut Refiner<'_>,
        depth: u32,
    ) -> bool {
        let Some(log_z) = Self::try_substep(model, state, dt, dw) else {
            return false;
        };
        let breaches = state.scratch.next.iter().any(|&v| v < LOG_X_FLOOR || !v.is_finite());
        if !breaches || depth >= MAX_REFINE_DEPTH {
            state.log_x.copy_from_slice(&state.scratch.next);
            state.log_z = log_z;
            return state.is_finite();
        }
        // Brownian bridge midpoint: W(dt/2) | W(dt) ~ N(W(dt)/2, dt/4)
        let half_sd = 0.5 * dt.sqrt();
        let first: Vec<f64> = dw.iter().map(|w| 0.5 * w + half_sd * refiner.normal()).collect();
        let second: Vec<f64> = dw.iter().zip(&first).map(|(w, f)| w - f).collect();
        Self::advance_refined(model, state, 0.5 * dt, &first, refiner, depth + 1)
            && Self::advance_refined(model, state, 0.5 * dt, &second, refiner, depth + 1)
    }
}

impl Scheme for LogEuler {
    fn name(&self) -> &'static str {
        "log-euler"
    }

    fn check_model(&self, _model: &MarketModel) -> Result<()> {
        Ok(())
    }

    fn normals_per_step(&self, dim: usize) -> usize {
        dim
    }

    fn advance(&self, model: &MarketModel, state: &mut PathState, dt: f64, normals: &[f64], refiner: &mut Refiner<'_>) -> bool {
        let sqrt_dt = dt.sqrt();
        let mut dw = std::mem::take(&mut state.dw);
        for (w, z) in dw.iter_mut().zip(normals) {
            *w = z * sqrt_dt;
        }
        let ok = Self::advance_refined(model, state, dt, &dw, refiner, 0);
        state.dw = dw;
        ok
    }
}

/// Exact lognormal transition for one-dimensional constant coefficients.
#[derive(Debug, Default)]
pub struct ExactGbm;

impl Scheme for ExactGbm {
    fn name(&self) -> &'static str {
        "exact-gbm"
    }

    fn check_model(&self, model: &MarketModel) -> Result<()> {
        match model.kind() {
            ModelKind::Gbm { drift, .. } if drift.len() == 1 => Ok(()),
            _ => Err(Error::SchemeMismatch { scheme: self.name().into(), model: model.name().into() }),
        }
    }

    fn normals_per_step(&self, _dim: usize) -> usize {
        1
    }

    fn advance(&self, model: &MarketModel, state: &mut PathState, dt: f64, normals: &[f64], _refiner: &mut Refiner<'_>) -> bool {
        let ModelKind::Gbm { drift, vol } = model.kind() else { return false };
        let (b, s) = (drift[0], vol[0]);
        let theta = b / s;
        let dw = normals[0] * dt.sqrt();
        state.dw[0] = dw;
        state.log_x[0] += (b - 0.5 * s * s) * dt + s * dw;
        state.log_z += -0.5 * theta * theta * dt - theta * dw;
        state.is_finite()
    }
}

/// Exact Bessel-3 transition `X' = |X e_1 + sqrt(dt) G|`, `G ~ N(0, I_3)`, with the
/// deflator read off pathwise as `Z = x0 / X`. The recorded `W` increment is the radial
/// component `sqrt(dt) G_1`.
#[derive(Debug, Default)]
pub struct ExactBessel3;

impl Scheme for ExactBessel3 {
    fn name(&self) -> &'static str {
        "exact-bessel3"
    }

    fn check_model(&self, model: &MarketModel) -> Result<()> {
        match model.kind() {
            ModelKind::Bessel3 => Ok(()),
            _ => Err(Error::SchemeMismatch { scheme: self.name().into(), model: model.name().into() }),
        }
    }

    fn normals_per_step(&self, _dim: usize) -> usize {
        3
    }

    fn advance(&self, _model: &MarketModel, state: &mut PathState, dt: f64, normals: &[f64], _refiner: &mut Refiner<'_>) -> bool {
        let sqrt_dt = dt.sqrt();
        let x = state.log_x[0].exp();
        let g0 = x + sqrt_dt * normals[0];
        let g1 = sqrt_dt * normals[1];
        let g2 = sqrt_dt * normals[2];
        let next = (g0 * g0 + g1 * g1 + g2 * g2).sqrt();
        state.dw[0] = sqrt_dt * normals[0];
        state.log_x[0] = next.ln();
        state.log_z = state.log_x0[0] - state.log_x[0];
        state.is_finite()
    }
}

/// Schemes addressable by name.
#[derive(Clone)]
pub struct SchemeRegistry {
    schemes: BTreeMap<&'static str, Arc<dyn Scheme>>,
}

impl SchemeRegistry {
    pub fn empty() -> Self {
        Self { schemes: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(Arc::new(LogEuler));
        reg.register(Arc::new(ExactGbm));
        reg.register(Arc::new(ExactBessel3));
        reg
    }

    pub fn register(&mut self, scheme: Arc<dyn Scheme>) {
        self.schemes.insert(scheme.name(), scheme);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.schemes.keys().copied()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Scheme>> {
        self.schemes.get(name).cloned().ok_or_else(|| Error::UnknownScheme(name.into()))
    }
}

/// The natural default scheme for a model.
pub fn default_scheme_for(model: &MarketModel) -> &'static str {
    match model.kind() {
        ModelKind::Bessel3 => "exact-bessel3",
        ModelKind::Gbm { drift, .. } if drift.len() == 1 => "exact-gbm",
        _ => "log-euler",
    }
}
