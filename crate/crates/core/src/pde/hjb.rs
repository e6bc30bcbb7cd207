//! Pointwise residual of the primal HJB equation and the supersolution check built on it.
//!
//! With `y = ln x` the residual at an interior node is
//!
//! ```text
//! U_t + 1/2 sum a_ij (U_{y_i y_j} - delta_ij U_{y_i}) - sum a_ij U_{p y_i} U_{p y_j} / (2 U_pp)
//!     - 1/2 (|theta|^2 + eps^2) U_p^2 / U_pp + (U_p / U_pp) sum b_i U_{p y_i}
//! ```
//!
//! where `a = s s'` and `b` is the drift. Nodes with `U_pp <= tol_convex` sit where the
//! lower envelope of the operator is `-inf`; they pass automatically and are reported.
//! This is a grid surrogate for the viscosity inequality, not a test-function check, and
//! the comparison result it supports only covers candidates whose Legendre transform is
//! continuous.

use rayon::prelude::*;
use serde::Serialize;

use super::{GridSpec, Surface};
use crate::duality::Domain;
use crate::error::{Error, Result};
use crate::market::{MarketModel, Payoff};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Evaluated,
    NonConvex,
    /// On the grid boundary, where central differences are unavailable.
    Boundary,
    /// Touches a node whose value was cut off by the `q` window.
    Truncated,
}

/// Subset of interior nodes used for summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualWindow {
    pub t_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub x_min: Vec<f64>,
    pub x_max: Vec<f64>,
}

impl ResidualWindow {
    /// Every interior node.
    pub fn all() -> Self {
        Self { t_max: f64::INFINITY, p_min: 0.0, p_max: 1.0, x_min: Vec::new(), x_max: Vec::new() }
    }

    fn contains(&self, t: f64, x: &[f64], p: f64) -> bool {
        t <= self.t_max
            && p >= self.p_min
            && p <= self.p_max
            && x.iter().enumerate().all(|(k, &v)| {
                self.x_min.get(k).map_or(true, |&lo| v >= lo) && self.x_max.get(k).map_or(true, |&hi| v <= hi)
            })
    }
}

impl Default for ResidualWindow {
    fn default() -> Self {
        Self::all()
    }
}

#[derive(Debug, Clone)]
pub struct HjbResidual {
    pub grid: GridSpec,
    pub epsilon: f64,
    /// NaN wherever the status is not `Evaluated`.
    pub residual: Vec<f64>,
    pub status: Vec<NodeStatus>,
    /// Minimizer `a*`, `d` entries per node (NaN where not evaluated).
    pub a_star: Vec<f64>,
    /// Common entry of the minimizer `b* = eps U_p / U_pp (1, ..., 1)`.
    pub b_star: Vec<f64>,
}

impl HjbResidual {
    fn in_window(&self, window: &ResidualWindow) -> impl Iterator<Item = usize> + '_ {
        let g = &self.grid;
        let per_t = g.n_space() * g.n_axis;
        let ps = g.axis_nodes();
        let window = window.clone();
        (0..self.residual.len()).filter(move |&i| {
            if self.status[i] != NodeStatus::Evaluated {
                return false;
            }
            let it = i / per_t;
            let rem = i % per_t;
            let (ix, ia) = (rem / g.n_axis, rem % g.n_axis);
            window.contains(g.t(it), &g.x_at(ix), ps[ia])
        })
    }

    /// Largest `|R|` over evaluated nodes in the window, with its flat index.
    pub fn max_abs(&self, window: &ResidualWindow) -> Option<(f64, usize)> {
        self.in_window(window).map(|i| (self.residual[i].abs(), i)).max_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Largest signed `R` over evaluated nodes in the window.
    pub fn max(&self, window: &ResidualWindow) -> Option<(f64, usize)> {
        self.in_window(window).map(|i| (self.residual[i], i)).max_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn count(&self, status: NodeStatus) -> usize {
        self.status.iter().filter(|&&s| s == status).count()
    }
}

/// Evaluates the HJB residual of a `p`-domain surface at every interior node.
pub fn hjb_residual(u: &Surface, model: &MarketModel, epsilon: f64, tol_convex: f64) -> Result<HjbResidual> {
    let g = &u.grid;
    if g.axis != Domain::P {
        return Err(Error::DomainMismatch { expected: "p", found: g.axis.label() });
    }
    let d = g.dim();
    if model.dim() != d {
        return Err(Error::GridMismatch(format!("model has {} stocks, surface has {d}", model.dim())));
    }
    let n_space = g.n_space();
    struct Coef {
        a: Vec<f64>,
        b: Vec<f64>,
        s: Vec<f64>,
        theta: Vec<f64>,
    }
    let coefs: Vec<Option<Coef>> = (0..n_space)
        .map(|ix| {
            let mi = g.space_multi_index(ix);
            if mi.iter().zip(&g.n_x).any(|(&i, &n)| i == 0 || i + 1 == n) {
                return Ok(None);
            }
            let x = g.x_at(ix);
            Ok(Some(Coef {
                a: model.covariance(&x),
                b: model.drift(&x),
                s: model.volatility(&x),
                theta: model.market_price_of_risk(&x)?,
            }))
        })
        .collect::<Result<_>>()?;

    let (ht, hp) = (g.dt(), g.da());
    let hy: Vec<f64> = (0..d).map(|k| g.dy(k)).collect();
    let mut ystride = vec![1usize; d];
    for k in (0..d.saturating_sub(1)).rev() {
        ystride[k] = ystride[k + 1] * g.n_x[k + 1];
    }
    let n_axis = g.n_axis;
    let per_t = n_space * n_axis;
    let eps2 = epsilon * epsilon;

    let nodes: Vec<(f64, NodeStatus, Vec<f64>, f64)> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let nan = (f64::NAN, NodeStatus::Boundary, vec![f64::NAN; d], f64::NAN);
            let it = i / per_t;
            let rem = i % per_t;
            let (ix, ia) = (rem / n_axis, rem % n_axis);
            let Some(c) = &coefs[ix] else { return nan };
            if it == 0 || it + 1 == g.n_t || ia == 0 || ia + 1 == n_axis {
                return nan;
            }
            if !u.truncated.is_empty() && touches_truncated(u, it, ix, ia, &ystride) {
                return (f64::NAN, NodeStatus::Truncated, vec![f64::NAN; d], f64::NAN);
            }
            let v = |dt: isize, dx: &[isize], da: isize| -> f64 {
                let mut ixx = ix as isize;
                for k in 0..d {
                    ixx += dx[k] * ystride[k] as isize;
                }
                u.get((it as isize + dt) as usize, ixx as usize, (ia as isize + da) as usize)
            };
            let zero = vec![0isize; d];
            let unit = |k: usize, s: isize| -> Vec<isize> {
                let mut e = vec![0isize; d];
                e[k] = s;
                e
            };
            let u0 = v(0, &zero, 0);
            let u_t = (v(1, &zero, 0) - v(-1, &zero, 0)) / (2.0 * ht);
            let u_p = (v(0, &zero, 1) - v(0, &zero, -1)) / (2.0 * hp);
            let u_pp = (v(0, &zero, 1) - 2.0 * u0 + v(0, &zero, -1)) / (hp * hp);
            let mut u_y = vec![0.0; d];
            let mut u_py = vec![0.0; d];
            let mut u_yy = vec![0.0; d * d];
            for k in 0..d {
                let (ep, em) = (unit(k, 1), unit(k, -1));
                u_y[k] = (v(0, &ep, 0) - v(0, &em, 0)) / (2.0 * hy[k]);
                u_yy[k * d + k] = (v(0, &ep, 0) - 2.0 * u0 + v(0, &em, 0)) / (hy[k] * hy[k]);
                u_py[k] = (v(0, &ep, 1) - v(0, &ep, -1) - v(0, &em, 1) + v(0, &em, -1)) / (4.0 * hy[k] * hp);
            }
            if d == 2 {
                let cross = (v(0, &[1, 1], 0) - v(0, &[1, -1], 0) - v(0, &[-1, 1], 0) + v(0, &[-1, -1], 0))
                    / (4.0 * hy[0] * hy[1]);
                u_yy[1] = cross;
                u_yy[2] = cross;
            }
            if !(u_pp > tol_convex) {
                return (f64::NAN, NodeStatus::NonConvex, vec![f64::NAN; d], f64::NAN);
            }
            let mut r = u_t;
            let mut theta2 = 0.0;
            let mut quad = 0.0;
            let mut drift = 0.0;
            for i in 0..d {
                theta2 += c.theta[i] * c.theta[i];
                drift += c.b[i] * u_py[i];
                r -= 0.5 * c.a[i * d + i] * u_y[i];
                for j in 0..d {
                    r += 0.5 * c.a[i * d + j] * u_yy[i * d + j];
                    quad += c.a[i * d + j] * u_py[i] * u_py[j];
                }
            }
            r += -quad / (2.0 * u_pp) - 0.5 * (theta2 + eps2) * u_p * u_p / u_pp + u_p / u_pp * drift;
            let a_star: Vec<f64> = (0..d)
                .map(|k| {
                    let st: f64 = (0..d).map(|i| c.s[i * d + k] * u_py[i]).sum();
                    (u_p * c.theta[k] - st) / u_pp
                })
                .collect();
            (r, NodeStatus::Evaluated, a_star, epsilon * u_p / u_pp)
        })
        .collect();

    let mut out = HjbResidual {
        grid: g.clone(),
        epsilon,
        residual: Vec::with_capacity(nodes.len()),
        status: Vec::with_capacity(nodes.len()),
        a_star: Vec::with_capacity(nodes.len() * d),
        b_star: Vec::with_capacity(nodes.len()),
    };
    for (r, s, a, b) in nodes {
        out.residual.push(r);
        out.status.push(s);
        out.a_star.extend(a);
        out.b_star.push(b);
    }
    Ok(out)
}

fn touches_truncated(u: &Surface, it: usize, ix: usize, ia: usize, ystride: &[usize]) -> bool {
    let g = &u.grid;
    let d = ystride.len();
    let count = 3usize.pow(d as u32 + 2);
    (0..count).any(|mut c| {
        let dt = (c % 3) as isize - 1;
        c /= 3;
        let da = (c % 3) as isize - 1;
        c /= 3;
        let mut x = ix as isize;
        for s in ystride {
            x += ((c % 3) as isize - 1) * *s as isize;
            c /= 3;
        }
        u.is_truncated(g.index((it as isize + dt) as usize, x as usize, (ia as isize + da) as usize))
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Residual and terminal tolerance; `None` uses `10 (dt + dy^2 + dp^2)`.
    pub tol: Option<f64>,
    /// Tolerance of the terminal check. The terminal slice carries no discretization
    /// error, so this is much tighter than the residual tolerance.
    pub terminal_tol: f64,
    pub tol_convex: f64,
    pub window: ResidualWindow,
    /// Number of worst offenders kept in the report.
    pub keep_failures: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { tol: None, terminal_tol: 1e-8, tol_convex: 1e-8, window: ResidualWindow::all(), keep_failures: 10 }
    }
}

/// Default tolerance `10 (dt + dy^2 + dp^2)`, with `dy` the largest log spacing.
pub fn default_tolerance(grid: &GridSpec) -> f64 {
    let dy = (0..grid.dim()).map(|k| grid.dy(k)).fold(0.0, f64::max);
    10.0 * (grid.dt() + dy * dy + grid.da() * grid.da())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeFailure {
    pub index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub p: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupersolutionReport {
    pub pass: bool,
    pub tol: f64,
    pub terminal_tol: f64,
    pub terminal_pass: bool,
    pub terminal_max_error: f64,
    pub interior_pass: bool,
    /// Largest positive residual among checked nodes (0 if none is positive).
    pub max_violation: f64,
    pub n_checked: usize,
    pub n_failures: usize,
    /// Nodes with `U_pp <= tol_convex`, passed by the envelope convention.
    pub n_nonconvex: usize,
    pub n_truncated: usize,
    pub worst: Vec<NodeFailure>,
    pub epsilon: f64,
}

/// Checks the terminal condition `u(T, x, p) = p g(x)` within `terminal_tol` and the
/// one-sided interior inequality `R <= tol` at every convex node of the window.
pub fn verify_supersolution(
    u: &Surface,
    model: &MarketModel,
    payoff: &Payoff,
    opts: &VerifyOptions,
) -> Result<SupersolutionReport> {
    let g = &u.grid;
    let tol = opts.tol.unwrap_or_else(|| default_tolerance(g));
    let res = hjb_residual(u, model, g.epsilon, opts.tol_convex)?;
    let last = g.n_t - 1;
    let ps = g.axis_nodes();
    let mut terminal_max_error: f64 = 0.0;
    for ix in 0..g.n_space() {
        let gx = payoff.checked_value(&g.x_at(ix))?;
        for (ia, &p) in ps.iter().enumerate() {
            terminal_max_error = terminal_max_error.max((u.get(last, ix, ia) - p * gx).abs());
        }
    }
    let terminal_pass = terminal_max_error <= opts.terminal_tol;

    let per_t = g.n_space() * g.n_axis;
    let checked: Vec<usize> = res.in_window(&opts.window).collect();
    let mut failures: Vec<NodeFailure> = checked
        .iter()
        .filter(|&&i| res.residual[i] > tol)
        .map(|&i| {
            let rem = i % per_t;
            NodeFailure {
                index: i,
                t: g.t(i / per_t),
                x: g.x_at(rem / g.n_axis),
                p: ps[rem % g.n_axis],
                residual: res.residual[i],
            }
        })
        .collect();
    let n_failures = failures.len();
    failures.sort_by(|a, b| b.residual.total_cmp(&a.residual));
    failures.truncate(opts.keep_failures);
    let max_violation = checked.iter().map(|&i| res.residual[i]).fold(0.0, f64::max);
    Ok(SupersolutionReport {
        pass: terminal_pass && n_failures == 0,
        tol,
        terminal_tol: opts.terminal_tol,
        terminal_pass,
        terminal_max_error,
        interior_pass: n_failures == 0,
        max_violation,
        n_checked: checked.len(),
        n_failures,
        n_nonconvex: res.count(NodeStatus::NonConvex),
        n_truncated: res.count(NodeStatus::Truncated),
        worst: failures,
        epsilon: g.epsilon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// `min (u - reference)` over nodes valid in both surfaces.
    pub min_difference: f64,
    pub max_difference: f64,
    pub index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub axis_value: f64,
}

impl Comparison {
    /// True if `u >= reference - tol` everywhere.
    pub fn dominates(&self, tol: f64) -> bool {
        self.min_difference >= -tol
    }
}

/// Pointwise ordering of two surfaces on identical grids.
pub fn compare_candidates(u: &Surface, reference: &Surface) -> Result<Comparison> {
    if !u.grid.same_nodes(&reference.grid) {
        return Err(Error::GridMismatch("surfaces live on different grids".into()));
    }
    let g = &u.grid;
    let mut best: Option<(f64, usize)> = None;
    let mut max_difference = f64::NEG_INFINITY;
    for i in 0..u.values.len() {
        if u.is_truncated(i) || reference.is_truncated(i) {
            continue;
        }
        let diff = u.values[i] - reference.values[i];
        max_difference = max_difference.max(diff);
        if best.map_or(true, |(b, _)| diff < b) {
            best = Some((diff, i));
        }
    }
    let (min_difference, index) =
        best.ok_or_else(|| Error::GridMismatch("no node is valid in both surfaces".into()))?;
    let per_t = g.n_space() * g.n_axis;
    let rem = index % per_t;
    Ok(Comparison {
        min_difference,
        max_difference,
        index,
        t: g.t(index / per_t),
        x: g.x_at(rem / g.n_axis),
        axis_value: g.axis_nodes()[rem % g.n_axis],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{std_normal_cdf, std_normal_inv};

    /// `U = x Phi(Phi^{-1}(p) - v(t))` with `v^2 = (|s - theta|^2 + eps^2)(T - t)`, the
    /// closed-form value for a constant-coefficient market and `g(x) = x`.
    fn analytic_surface(b: f64, s: f64, eps: f64, n: usize) -> Surface {
        let theta = b / s;
        let mut grid = GridSpec::dual_1d(1.0, n, (0.5, 2.0), n, (0.0, 1.0), n, eps).with_p_axis(n);
        grid.axis_min = 0.0;
        let ps = grid.axis_nodes();
        let mut values = vec![0.0; grid.len()];
        for it in 0..grid.n_t {
            let tau = grid.horizon - grid.t(it);
            let v = (((s - theta).powi(2) + eps * eps) * tau).sqrt();
            for ix in 0..grid.n_space() {
                let x = grid.x_at(ix)[0];
                for (ia, &p) in ps.iter().enumerate() {
                    values[grid.index(it, ix, ia)] = if p <= 0.0 {
                        0.0
                    } else if p >= 1.0 {
                        x
                    } else {
                        x * std_normal_cdf(std_normal_inv(p) - v)
                    };
                }
            }
        }
        Surface::new(grid, values, "gbm", "x").unwrap()
    }

    fn centre_window() -> ResidualWindow {
        ResidualWindow { t_max: 0.8, p_min: 0.2, p_max: 0.8, x_min: vec![0.7], x_max: vec![1.4] }
    }

    #[test]
    fn analytic_solution_has_vanishing_residual() {
        let model = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
        let coarse = hjb_residual(&analytic_surface(0.1, 0.2, 0.1, 21), &model, 0.1, 1e-8).unwrap();
        let fine = hjb_residual(&analytic_surface(0.1, 0.2, 0.1, 41), &model, 0.1, 1e-8).unwrap();
        let (rc, _) = coarse.max_abs(&centre_window()).unwrap();
        let (rf, _) = fine.max_abs(&centre_window()).unwrap();
        assert!(rf < rc / 3.0, "coarse {rc}, fine {rf}");
        assert!(rf < 1e-2);
    }

    #[test]
    fn minimizers_match_the_closed_form() {
        let model = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
        let r = hjb_residual(&analytic_surface(0.1, 0.2, 0.1, 21), &model, 0.1, 1e-8).unwrap();
        let i = r.status.iter().position(|&s| s == NodeStatus::Evaluated).unwrap();
        assert!(r.b_star[i] > 0.0);
        assert!(r.a_star[i].is_finite());
    }

    #[test]
    fn linear_in_p_is_nonconvex_everywhere() {
        let grid = GridSpec::dual_1d(1.0, 5, (0.5, 2.0), 7, (0.0, 1.0), 9, 0.1).with_p_axis(9);
        let mut values = vec![0.0; grid.len()];
        for it in 0..grid.n_t {
            for ix in 0..grid.n_space() {
                for (ia, p) in grid.axis_nodes().into_iter().enumerate() {
                    values[grid.index(it, ix, ia)] = p * grid.x_at(ix)[0];
                }
            }
        }
        let u = Surface::new(grid, values, "gbm", "x").unwrap();
        let model = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
        let r = hjb_residual(&u, &model, 0.1, 1e-8).unwrap();
        assert_eq!(r.count(NodeStatus::Evaluated), 0);
        assert!(r.count(NodeStatus::NonConvex) > 0);
        let rep = verify_supersolution(&u, &model, &Payoff::identity(1), &VerifyOptions::default()).unwrap();
        assert!(rep.pass);
        assert_eq!(rep.n_checked, 0);
    }

    #[test]
    fn verifier_catches_terminal_shifts_and_zero() {
        let model = MarketModel::gbm_scalar(0.1, 0.2).unwrap();
        let u = analytic_surface(0.1, 0.2, 0.1, 21);
        let opts = VerifyOptions { window: centre_window(), ..Default::default() };
        let ok = verify_supersolution(&u, &model, &Payoff::identity(1), &opts).unwrap();
        assert!(ok.pass, "{ok:?}");
        let shifted = verify_supersolution(&u.map(|v| v + 0.1), &model, &Payoff::identity(1), &opts).unwrap();
        assert!(!shifted.terminal_pass && !shifted.pass);
        let zero = verify_supersolution(&u.map(|_| 0.0), &model, &Payoff::identity(1), &opts).unwrap();
        assert!(!zero.terminal_pass);
    }

    #[test]
    fn comparison_reports_offsets() {
        let u = analytic_surface(0.1, 0.2, 0.1, 9);
        let c = compare_candidates(&u, &u).unwrap();
        assert_eq!(c.min_difference, 0.0);
        let c = compare_candidates(&u.map(|v| v + 0.1), &u).unwrap();
        assert!((c.min_difference - 0.1).abs() < 1e-12);
        assert!(c.dominates(0.0));
        let other = analytic_surface(0.1, 0.2, 0.1, 11);
        assert!(matches!(compare_candidates(&other, &u), Err(Error::GridMismatch(_))));
    }
}
