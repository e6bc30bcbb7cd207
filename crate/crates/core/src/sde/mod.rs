//! Joint simulation of the stocks `X`, the deflator `Z`, the dual process `Q = q0 / Z`
//! and its regularized version `Q_eps = Q exp(-eps^2 (s - t0) / 2 + eps (B(s) - B(t0)))`,
//! where `B` is an auxiliary Brownian motion independent of `W`.
//!
//! All state is evolved in log space so positivity holds by construction. Each path
//! draws one block of normals per step: the stock-side normals of the scheme followed
//! by one normal for `B`. Because `B` always occupies the same slot, runs that differ
//! only in `eps` see identical `W` and `B` increments.

mod scheme;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use scheme::{
    default_scheme_for, ExactBessel3, ExactGbm, LogEuler, PathState, Refiner, Scheme, SchemeRegistry,
    LOG_X_FLOOR,
};

use crate::error::{Error, Result};
use crate::market::MarketModel;
use crate::rng::CounterRng;

/// Paths per parallel work item.
const CHUNK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t0: f64,
    /// Maturity `T`.
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub scheme: String,
    /// Regularization level `eps >= 0`.
    pub epsilon: f64,
}

impl SimConfig {
    pub fn new(horizon: f64, n_steps: usize, n_paths: usize, seed: u64, scheme: &str) -> Self {
        Self { t0: 0.0, horizon, n_steps, n_paths, seed, scheme: scheme.into(), epsilon: 0.0 }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 < self.horizon) || !self.t0.is_finite() || !self.horizon.is_finite() {
            return Err(Error::InvalidSimConfig(format!("need t0 < T, got t0 = {}, T = {}", self.t0, self.horizon)));
        }
        if self.n_steps == 0 || self.n_paths == 0 {
            return Err(Error::InvalidSimConfig("n_steps and n_paths must be positive".into()));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidSimConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        (self.horizon - self.t0) / self.n_steps as f64
    }

    pub fn tau(&self) -> f64 {
        self.horizon - self.t0
    }
}

fn check_start(x0: &[f64], model: &MarketModel) -> Result<()> {
    if x0.len() != model.dim() || x0.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidSimConfig(format!(
            "x0 = {x0:?} must be a point of (0, inf)^{}",
            model.dim()
        )));
    }
    Ok(())
}

/// Runs `n_paths` paths, handing every node of every path to `record`. `record` receives
/// `(path, node, state, log_l)` where `log_l = -eps^2 (s - t0)/2 + eps (B(s) - B(t0))`;
/// node 0 is the initial state.
fn drive<T, F>(model: &MarketModel, x0: &[f64], cfg: &SimConfig, record: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut T, usize, usize, &PathState, f64, f64) + Sync,
    T: Default,
{
    cfg.validate()?;
    check_start(x0, model)?;
    let registry = SchemeRegistry::builtin();
    let scheme = registry.get(&cfg.scheme)?;
    scheme.check_model(model)?;

    let rng = CounterRng::new(cfg.seed);
    let d = model.dim();
    let stock_width = scheme.normals_per_step(d);
    let width = stock_width + 1;
    let dt = cfg.dt();
    let sqrt_dt = dt.sqrt();
    let eps = cfg.epsilon;
    let n_chunks = cfg.n_paths.div_ceil(CHUNK);

    (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut out = T::default();
            let mut normals = vec![0.0; width];
            let start = chunk * CHUNK;
            let end = (start + CHUNK).min(cfg.n_paths);
            for path in start..end {
                let mut state = PathState::new(x0);
                let mut cursor = rng.path_cursor(path as u64, width);
                let mut b_total = 0.0;
                record(&mut out, path, 0, &state, 0.0, 0.0);
                for step in 0..cfg.n_steps {
                    cursor.next_block(&mut normals);
                    let mut refiner = Refiner::new(&rng, path as u64, step as u64);
                    if !scheme.advance(model, &mut state, dt, &normals[..stock_width], &mut refiner) {
                        return Err(Error::Nonfinite { path, step });
                    }
                    let db = sqrt_dt * normals[stock_width];
                    b_total += db;
                    let elapsed = (step + 1) as f64 * dt;
                    let log_l = -0.5 * eps * eps * elapsed + eps * b_total;
                    if state.log_z.exp() == 0.0 || state.log_x.iter().any(|v| v.exp() == 0.0 || !v.exp().is_finite()) {
                        return Err(Error::Nonfinite { path, step });
                    }
                    record(&mut out, path, step + 1, &state, log_l, db);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Full path storage, indexed by path and time node.
#[derive(Debug, Clone)]
pub struct PathBundle {
    dim: usize,
    n_paths: usize,
    n_steps: usize,
    t0: f64,
    dt: f64,
    q0: f64,
    epsilon: f64,
    x: Vec<f64>,
    z: Vec<f64>,
    q: Vec<f64>,
    q_eps: Vec<f64>,
    dw: Vec<f64>,
    db: Vec<f64>,
}

#[derive(Default)]
struct BundleChunk {
    x: Vec<f64>,
    z: Vec<f64>,
    q: Vec<f64>,
    q_eps: Vec<f64>,
    dw: Vec<f64>,
    db: Vec<f64>,
}

/// Simulates complete paths of `(X, Z, Q, Q_eps)` started from `(x0, q0)` at `cfg.t0`.
pub fn simulate(model: &MarketModel, x0: &[f64], q0: f64, cfg: &SimConfig) -> Result<PathBundle> {
    if !(q0 > 0.0) || !q0.is_finite() {
        return Err(Error::InvalidSimConfig(format!("q0 must be positive, got {q0}")));
    }
    let ln_q0 = q0.ln();
    let chunks = drive(model, x0, cfg, |c: &mut BundleChunk, _path, node, st, log_l, db| {
        c.x.extend(st.log_x.iter().map(|v| v.exp()));
        c.z.push(st.log_z.exp());
        c.q.push((ln_q0 - st.log_z).exp());
        c.q_eps.push((ln_q0 - st.log_z + log_l).exp());
        if node > 0 {
            c.dw.extend_from_slice(&st.dw);
            c.db.push(db);
        }
    })?;
    let mut bundle = PathBundle {
        dim: model.dim(),
        n_paths: cfg.n_paths,
        n_steps: cfg.n_steps,
        t0: cfg.t0,
        dt: cfg.dt(),
        q0,
        epsilon: cfg.epsilon,
        x: Vec::new(),
        z: Vec::new(),
        q: Vec::new(),
        q_eps: Vec::new(),
        dw: Vec::new(),
        db: Vec::new(),
    };
    for c in chunks {
        bundle.x.extend(c.x);
        bundle.z.extend(c.z);
        bundle.q.extend(c.q);
        bundle.q_eps.extend(c.q_eps);
        bundle.dw.extend(c.dw);
        bundle.db.extend(c.db);
    }
    Ok(bundle)
}

impl PathBundle {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn q0(&self) -> f64 {
        self.q0
    }
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
    pub fn time(&self, node: usize) -> f64 {
        self.t0 + node as f64 * self.dt
    }
    fn node_index(&self, path: usize, node: usize) -> usize {
        path * (self.n_steps + 1) + node
    }
    pub fn x(&self, path: usize, node: usize) -> &[f64] {
        let i = self.node_index(path, node) * self.dim;
        &self.x[i..i + self.dim]
    }
    pub fn z(&self, path: usize, node: usize) -> f64 {
        self.z[self.node_index(path, node)]
    }
    pub fn q(&self, path: usize, node: usize) -> f64 {
        self.q[self.node_index(path, node)]
    }
    pub fn q_eps(&self, path: usize, node: usize) -> f64 {
        self.q_eps[self.node_index(path, node)]
    }
    /// Increment of `W` over step `step` (between nodes `step` and `step + 1`).
    pub fn dw(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.n_steps + step) * self.dim;
        &self.dw[i..i + self.dim]
    }
    pub fn db(&self, path: usize, step: usize) -> f64 {
        self.db[path * self.n_steps + step]
    }

    /// Sample mean and standard error of `Z(t)` at every node.
    pub fn deflator_profile(&self) -> Vec<(f64, f64)> {
        (0..=self.n_steps)
            .map(|node| {
                let vals: Vec<f64> = (0..self.n_paths).map(|p| self.z(p, node)).collect();
                mean_and_stderr(&vals)
            })
            .collect()
    }

    /// Long-format CSV: `path,step,t,X_1..X_d,Z,Q,Q_eps`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut header = String::from("path,step,t");
        for i in 1..=self.dim {
            header.push_str(&format!(",X_{i}"));
        }
        header.push_str(",Z,Q,Q_eps");
        writeln!(out, "{header}")?;
        for p in 0..self.n_paths {
            for n in 0..=self.n_steps {
                let mut line = format!("{p},{n},{}", self.time(n));
                for v in self.x(p, n) {
                    line.push_str(&format!(",{v}"));
                }
                line.push_str(&format!(",{},{},{}", self.z(p, n), self.q(p, n), self.q_eps(p, n)));
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

pub(crate) fn mean_and_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Terminal draws of `X(T)`, `Z(T)` and the auxiliary Brownian increment `B(T) - B(t0)`.
#[derive(Debug, Clone)]
pub struct TerminalDraws {
    pub dim: usize,
    /// Row-major `n_paths x d`.
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub brownian_aux: Vec<f64>,
    /// `T - t0`.
    pub tau: f64,
    pub seed: u64,
    pub scheme: String,
    pub model: String,
}

impl TerminalDraws {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn x(&self, path: usize) -> &[f64] {
        &self.x[path * self.dim..(path + 1) * self.dim]
    }
}

#[derive(Default)]
struct TerminalChunk {
    x: Vec<f64>,
    z: Vec<f64>,
    b: Vec<f64>,
    b_running: f64,
}

/// Simulates to maturity keeping only terminal values.
pub fn simulate_terminal(model: &MarketModel, x0: &[f64], cfg: &SimConfig) -> Result<TerminalDraws> {
    let n_steps = cfg.n_steps;
    let chunks = drive(model, x0, cfg, |c: &mut TerminalChunk, _path, node, st, _log_l, db| {
        if node == 0 {
            c.b_running = 0.0;
            return;
        }
        c.b_running += db;
        if node == n_steps {
            c.x.extend(st.log_x.iter().map(|v| v.exp()));
            c.z.push(st.log_z.exp());
            c.b.push(c.b_running);
        }
    })?;
    let mut draws = TerminalDraws {
        dim: model.dim(),
        x: Vec::with_capacity(cfg.n_paths * model.dim()),
        z: Vec::with_capacity(cfg.n_paths),
        brownian_aux: Vec::with_capacity(cfg.n_paths),
        tau: cfg.tau(),
        seed: cfg.seed,
        scheme: cfg.scheme.clone(),
        model: model.name().to_string(),
    };
    for c in chunks {
        draws.x.extend(c.x);
        draws.z.extend(c.z);
        draws.brownian_aux.extend(c.b);
    }
    Ok(draws)
}

/// Exact terminal law of the Bessel-3 model: `X(T) = |x0 e_1 + G|`, `G ~ N(0, T I_3)`,
/// and `Z(T) = x0 / X(T)`.
pub fn exact_bessel3_terminal(x0: f64, horizon: f64, n_paths: usize, seed: u64) -> Result<TerminalDraws> {
    let cfg = SimConfig::new(horizon, 1, n_paths, seed, "exact-bessel3");
    simulate_terminal(&MarketModel::bessel3(), &[x0], &cfg)
}

/// Exact lognormal terminal law under constant `b`, `s`, sharing one normal per path
/// between `X(T)` and `Z(T)`.
pub fn exact_gbm_terminal(b: f64, s: f64, x0: f64, horizon: f64, n_paths: usize, seed: u64) -> Result<TerminalDraws> {
    let model = MarketModel::gbm_scalar(b, s)?;
    let cfg = SimConfig::new(horizon, 1, n_paths, seed, "exact-gbm");
    simulate_terminal(&model, &[x0], &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::new(1.0, 10, 10, 1, "log-euler");
        assert!(cfg.validate().is_ok());
        cfg.t0 = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = SimConfig::new(1.0, 0, 10, 1, "log-euler");
        assert!(cfg.validate().is_err());
        let cfg = SimConfig::new(1.0, 1, 10, 1, "log-euler").with_epsilon(-0.1);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scheme_mismatch_and_unknown() {
        let cfg = SimConfig::new(1.0, 4, 4, 1, "exact-bessel3");
        let gbm = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
        assert!(matches!(simulate(&gbm, &[1.0], 1.0, &cfg), Err(Error::SchemeMismatch { .. })));
        let cfg = SimConfig::new(1.0, 4, 4, 1, "exact-gbm");
        assert!(matches!(simulate(&MarketModel::bessel3(), &[1.0], 1.0, &cfg), Err(Error::SchemeMismatch { .. })));
        let cfg = SimConfig::new(1.0, 4, 4, 1, "milstein");
        assert!(matches!(simulate(&gbm, &[1.0], 1.0, &cfg), Err(Error::UnknownScheme(_))));
    }

    #[test]
    fn zero_drift_gbm_has_unit_deflator() {
        let gbm = MarketModel::gbm_scalar(0.0, 0.2).unwrap();
        let cfg = SimConfig::new(1.0, 8, 64, 3, "log-euler");
        let b = simulate(&gbm, &[1.0], 1.0, &cfg).unwrap();
        for p in 0..64 {
            for n in 0..=8 {
                assert_eq!(b.z(p, n), 1.0);
            }
        }
    }

    #[test]
    fn zero_epsilon_leaves_q_unchanged() {
        let cfg = SimConfig::new(1.0, 16, 50, 9, "exact-bessel3");
        let b = simulate(&MarketModel::bessel3(), &[1.0], 2.0, &cfg).unwrap();
        for p in 0..50 {
            for n in 0..=16 {
                assert_eq!(b.q_eps(p, n), b.q(p, n));
            }
        }
    }

    #[test]
    fn bessel_exact_product_is_constant() {
        let cfg = SimConfig::new(1.0, 20, 200, 5, "exact-bessel3");
        let b = simulate(&MarketModel::bessel3(), &[1.0], 1.0, &cfg).unwrap();
        for p in 0..200 {
            for n in 0..=20 {
                assert!((b.z(p, n) * b.x(p, n)[0] - 1.0).abs() < 1e-14);
            }
        }
        assert_eq!(b.z(0, 0), 1.0);
        assert_eq!(b.q(0, 0), 1.0);
    }

    #[test]
    fn csv_dump_has_expected_shape() {
        let cfg = SimConfig::new(1.0, 2, 3, 5, "log-euler");
        let gbm = MarketModel::gbm(vec![0.1, 0.0], vec![0.2, 0.0, 0.0, 0.3]).unwrap();
        let b = simulate(&gbm, &[1.0, 2.0], 1.0, &cfg).unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "path,step,t,X_1,X_2,Z,Q,Q_eps");
        assert_eq!(lines.count(), 3 * 3);
    }

    #[test]
    fn output_independent_of_thread_count() {
        let model = MarketModel::gbm(vec![0.05, 0.02], vec![0.2, 0.05, 0.0, 0.3]).unwrap();
        let cfg = SimConfig::new(1.0, 16, 5000, 42, "log-euler").with_epsilon(0.2);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate(&model, &[1.0, 1.5], 1.0, &cfg).unwrap())
        };
        let a = run(1);
        let b = run(4);
        assert_eq!(a.x, b.x);
        assert_eq!(a.q_eps, b.q_eps);
        assert_eq!(a.db, b.db);
    }

    #[test]
    fn regularized_ratio_is_exponential_martingale() {
        let model = MarketModel::bessel3();
        let cfg = SimConfig::new(1.0, 10, 100, 1, "exact-bessel3").with_epsilon(0.3);
        let b = simulate(&model, &[1.0], 1.0, &cfg).unwrap();
        for p in 0..100 {
            let mut bsum = 0.0;
            for n in 1..=10 {
                bsum += b.db(p, n - 1);
                let expected = (-0.5 * 0.09 * b.time(n) + 0.3 * bsum).exp();
                assert!((b.q_eps(p, n) / b.q(p, n) / expected - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gbm_log_price_variance() {
        // log(Z X) has variance (s - theta)^2 T = (0.2 - 0.5)^2 = 0.09
        let d = exact_gbm_terminal(0.1, 0.2, 1.0, 1.0, 200_000, 8).unwrap();
        let logs: Vec<f64> = (0..d.len()).map(|i| (d.z[i] * d.x(i)[0]).ln()).collect();
        let (m, _) = mean_and_stderr(&logs);
        let var = logs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (logs.len() - 1) as f64;
        assert!((var - 0.09).abs() < 0.002, "{var}");
        let (mean_zx, se) = mean_and_stderr(&(0..d.len()).map(|i| d.z[i] * d.x(i)[0]).collect::<Vec<_>>());
        assert!((mean_zx - 1.0).abs() < 4.0 * se);
    }

    #[test]
    fn euler_agrees_with_exact_gbm() {
        let model = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
        let exact = simulate_terminal(&model, &[1.0], &SimConfig::new(1.0, 50, 20_000, 3, "exact-gbm")).unwrap();
        let euler = simulate_terminal(&model, &[1.0], &SimConfig::new(1.0, 50, 20_000, 3, "log-euler")).unwrap();
        // constant coefficients: log-Euler is exact in law and driven by the same normals
        for i in 0..100 {
            assert!((exact.x(i)[0] / euler.x(i)[0] - 1.0).abs() < 1e-12);
            assert!((exact.z[i] / euler.z[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bessel_deflator_is_strict_supermartingale() {
        let d = exact_bessel3_terminal(1.0, 1.0, 200_000, 17).unwrap();
        let (mean, se) = mean_and_stderr(&d.z);
        // E Z(1) = 2 Phi(1) - 1
        assert!((mean - 0.682_689_492).abs() < 4.0 * se, "{mean} +- {se}");
        assert!(mean < 0.7);
    }
}
