//! Backward solver for the regularized dual equation.
//!
//! In `y = ln x`, `eta = ln q` the dual operator reads
//!
//! ```text
//! 1/2 sum a_ij (v_{y_i y_j} - delta_ij v_{y_i}) + 1/2 c (v_{eta eta} - v_eta) + sum b_i v_{y_i eta}
//! ```
//!
//! with `a = s s'`, `c = |theta|^2 + eps^2`. At `eps = 0` the diffusion matrix is
//! singular along the direction where `q` moves with `1/Z`, so the solver works in the
//! aligned coordinate `xi = eta - phi(y)`. In one dimension `phi' = b / a` removes the
//! mixed term altogether and leaves `eps^2 / 2` as the `xi` diffusion; in two dimensions
//! `grad phi` is frozen at the grid centre and the remaining mixed terms go explicit.
//!
//! Time stepping is Douglas ADI (theta = 1/2 for one stock, 2/3 for two) with two fully
//! implicit start-up steps to damp the payoff kink.

use rayon::prelude::*;

use super::{GridSpec, Surface};
use crate::duality::Domain;
use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{MarketModel, Payoff};

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Internal `xi` nodes per output `q` node.
    pub xi_per_q: usize,
    /// Time steps per output interval, before any stability refinement.
    pub substeps: usize,
    /// Fully implicit steps at the start of the backward sweep.
    pub rannacher_steps: usize,
    /// Largest explicit mixed-term number accepted before substepping.
    pub max_mixed_cfl: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { xi_per_q: 8, substeps: 4, rannacher_steps: 2, max_mixed_cfl: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct SolveReport {
    pub warnings: Vec<String>,
    /// Steps per output interval actually used.
    pub substeps: usize,
    pub xi_nodes: usize,
    pub xi_range: (f64, f64),
    /// Explicit mixed-term number at the final step size.
    pub mixed_cfl: f64,
    /// True when `eps = 0`, where the equation is degenerate everywhere.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct Stencil {
    l: f64,
    c: f64,
    u: f64,
}

impl Stencil {
    /// `1/2 a x^2 f_xx` on the neighbours `x_{i-1} < x_i < x_{i+1}`; exact for
    /// quadratics in `x`, so linear far fields pass through untouched.
    fn log_diffusion(half_a: f64, xm: f64, x: f64, xp: f64) -> Self {
        let w = 2.0 * half_a * x * x / (xp - xm);
        let l = w / (x - xm);
        let u = w / (xp - x);
        Self { l, c: -(l + u), u }
    }

    /// Three-point `D f'' + mu f'`, upwinded when the cell Peclet number exceeds one.
    fn new(diff: f64, mu: f64, h: f64) -> Self {
        let d = diff / (h * h);
        if mu.abs() * h <= 2.0 * diff {
            Self { l: d - mu / (2.0 * h), c: -2.0 * d, u: d + mu / (2.0 * h) }
        } else if mu > 0.0 {
            Self { l: d, c: -2.0 * d - mu / h, u: d + mu / h }
        } else {
            Self { l: d - mu / h, c: -2.0 * d + mu / h, u: d }
        }
    }
}

/// Internal `(y..., xi)` lattice; `xi` varies fastest, then the last stock.
struct Lattice {
    d: usize,
    n: Vec<usize>,
    /// Node stride of each stock index.
    stride: Vec<usize>,
    h: Vec<f64>,
    nxi: usize,
    hxi: f64,
    xi0: f64,
    phi: Vec<f64>,
    x: Vec<Vec<f64>>,
    interior: Vec<bool>,
    sy: Vec<Vec<Stencil>>,
    sxi: Vec<Stencil>,
    /// `[m_1, m_2, a_12]` per stock node, already divided by the stencil widths.
    mixed: Option<Vec<[f64; 3]>>,
    /// `q_N - q_{N-1}` at the top of each `xi` line.
    dq_top: Vec<f64>,
}

impl Lattice {
    fn n_space(&self) -> usize {
        self.phi.len()
    }

    fn len(&self) -> usize {
        self.n_space() * self.nxi
    }

    fn xi(&self, j: usize) -> f64 {
        self.xi0 + j as f64 * self.hxi
    }

    fn apply_xi(&self, v: &[f64], out: &mut [f64]) {
        let nxi = self.nxi;
        out.par_chunks_mut(nxi).zip(v.par_chunks(nxi)).enumerate().for_each(|(ys, (o, row))| {
            o.fill(0.0);
            if !self.interior[ys] {
                return;
            }
            let s = self.sxi[ys];
            for j in 1..nxi - 1 {
                o[j] = s.l * row[j - 1] + s.c * row[j] + s.u * row[j + 1];
            }
        });
    }

    fn apply_y(&self, k: usize, v: &[f64], out: &mut [f64]) {
        let nxi = self.nxi;
        let off = self.stride[k];
        out.par_chunks_mut(nxi).enumerate().for_each(|(ys, o)| {
            o.fill(0.0);
            if !self.interior[ys] {
                return;
            }
            let s = self.sy[k][ys];
            let base = ys * nxi;
            for j in 1..nxi - 1 {
                let i = base + j;
                o[j] = s.l * v[i - off] + s.c * v[i] + s.u * v[i + off];
            }
        });
    }

    fn apply_mixed(&self, v: &[f64], out: &mut [f64]) {
        let nxi = self.nxi;
        let Some(mixed) = &self.mixed else {
            out.fill(0.0);
            return;
        };
        out.par_chunks_mut(nxi).enumerate().for_each(|(ys, o)| {
            o.fill(0.0);
            if !self.interior[ys] {
                return;
            }
            let m = mixed[ys];
            let base = ys * nxi;
            for j in 1..nxi - 1 {
                let i = base + j;
                let mut acc = 0.0;
                for k in 0..self.d {
                    if m[k] != 0.0 {
                        let s = self.stride[k];
                        acc += m[k] * (v[i + s + 1] - v[i + s - 1] - v[i - s + 1] + v[i - s - 1]);
                    }
                }
                if self.d == 2 && m[2] != 0.0 {
                    let (s1, s2) = (self.stride[0], self.stride[1]);
                    acc += m[2] * (v[i + s1 + s2] - v[i + s1 - s2] - v[i - s1 + s2] + v[i - s1 - s2]);
                }
                o[j] = acc;
            }
        });
    }

    /// Linear extrapolation in `x` at the stock boundaries, then the `xi` side conditions.
    fn enforce_boundaries(&self, v: &mut [f64]) {
        let nxi = self.nxi;
        for k in 0..self.d {
            let n = self.n[k];
            let s = self.stride[k];
            let x = &self.x[k];
            let r_lo = (x[1] - x[0]) / (x[2] - x[1]);
            let r_hi = (x[n - 1] - x[n - 2]) / (x[n - 2] - x[n - 3]);
            for ys in 0..self.n_space() {
                let ik = (ys / (s / nxi)) % n;
                let base = ys * nxi;
                if ik == 0 {
                    for j in 1..nxi - 1 {
                        let i = base + j;
                        v[i] = (1.0 + r_lo) * v[i + s] - r_lo * v[i + 2 * s];
                    }
                } else if ik == n - 1 {
                    for j in 1..nxi - 1 {
                        let i = base + j;
                        v[i] = (1.0 + r_hi) * v[i - s] - r_hi * v[i - 2 * s];
                    }
                }
            }
        }
        v.par_chunks_mut(nxi).enumerate().for_each(|(ys, row)| {
            row[0] = 0.0;
            row[nxi - 1] = row[nxi - 2] + self.dq_top[ys];
        });
    }

    /// Solves `(I - w A_xi) v = rhs` on every interior line, in place.
    fn solve_xi(&self, w: f64, v: &mut [f64]) {
        let nxi = self.nxi;
        v.par_chunks_mut(nxi).enumerate().for_each_init(
            || (vec![0.0; nxi], vec![0.0; nxi], vec![0.0; nxi], vec![0.0; nxi]),
            |(lo, di, up, scratch), (ys, row)| {
                if !self.interior[ys] {
                    return;
                }
                let s = self.sxi[ys];
                lo[0] = 0.0;
                di[0] = 1.0;
                up[0] = 0.0;
                row[0] = 0.0;
                for j in 1..nxi - 1 {
                    lo[j] = -w * s.l;
                    di[j] = 1.0 - w * s.c;
                    up[j] = -w * s.u;
                }
                lo[nxi - 1] = -1.0;
                di[nxi - 1] = 1.0;
                up[nxi - 1] = 0.0;
                row[nxi - 1] = self.dq_top[ys];
                linalg::solve_tridiagonal(lo, di, up, row, scratch);
            },
        );
    }

    /// Solves `(I - w A_yk) v = rhs` along stock `k`, with the boundary extrapolation
    /// folded into the first and last interior rows.
    fn solve_y(&self, k: usize, w: f64, v: &mut [f64], buf: &mut [f64]) {
        let n = self.n[k];
        let inner = self.stride[k];
        let nxi = self.nxi;
        let x = &self.x[k];
        let r_lo = (x[1] - x[0]) / (x[2] - x[1]);
        let r_hi = (x[n - 1] - x[n - 2]) / (x[n - 2] - x[n - 3]);
        let src: &[f64] = v;
        buf.par_chunks_mut(n).enumerate().for_each_init(
            || (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]),
            |(lo, di, up, scratch), (line, out)| {
                let base = (line / inner) * n * inner + line % inner;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = src[base + i * inner];
                }
                let j = base % nxi;
                let ys0 = base / nxi;
                let ys1 = ys0 + inner / nxi;
                if j == 0 || j == nxi - 1 || !self.interior[ys1] {
                    return;
                }
                let m = n - 2;
                for i in 0..m {
                    let ys = ys0 + (i + 1) * (inner / nxi);
                    let s = self.sy[k][ys];
                    lo[i] = -w * s.l;
                    di[i] = 1.0 - w * s.c;
                    up[i] = -w * s.u;
                }
                di[0] += lo[0] * (1.0 + r_lo);
                up[0] -= lo[0] * r_lo;
                lo[0] = 0.0;
                lo[m - 1] -= up[m - 1] * r_hi;
                di[m - 1] += up[m - 1] * (1.0 + r_hi);
                up[m - 1] = 0.0;
                let rhs = &mut out[1..n - 1];
                linalg::solve_tridiagonal(&lo[..m], &di[..m], &up[..m], rhs, &mut scratch[..m]);
                out[0] = (1.0 + r_lo) * out[1] - r_lo * out[2];
                out[n - 1] = (1.0 + r_hi) * out[n - 2] - r_hi * out[n - 3];
            },
        );
        let block = n * inner;
        v.par_chunks_mut(nxi).enumerate().for_each(|(ys, row)| {
            for (j, val) in row.iter_mut().enumerate() {
                let f = ys * nxi + j;
                let (outer, rem) = (f / block, f % block);
                let (i, idx) = (rem / inner, rem % inner);
                *val = buf[(outer * inner + idx) * n + i];
            }
        });
    }

    /// Value at `q` along the `xi` line of stock node `ys`.
    fn sample(&self, ys: usize, row: &[f64], q: f64) -> f64 {
        if q <= 0.0 {
            return 0.0;
        }
        let s = (q.ln() - self.phi[ys] - self.xi0) / self.hxi;
        let top = self.nxi - 1;
        if s <= 0.0 {
            let q0 = (self.xi0 + self.phi[ys]).exp();
            return row[0] * q / q0;
        }
        if s >= top as f64 {
            let qn = (self.xi(top) + self.phi[ys]).exp();
            return row[top] + (q - qn);
        }
        let j = (s.floor() as usize).min(top - 1);
        let smooth = j > 0 && j + 2 <= top && {
            let c0 = row[j - 1] - 2.0 * row[j] + row[j + 1];
            let c1 = row[j] - 2.0 * row[j + 1] + row[j + 2];
            let (lo, hi) = (c0.abs().min(c1.abs()), c0.abs().max(c1.abs()));
            c0 * c1 > 0.0 && hi <= 2.0 * lo
        };
        if !smooth {
            let q0 = (self.xi(j) + self.phi[ys]).exp();
            let q1 = (self.xi(j + 1) + self.phi[ys]).exp();
            let t = (q - q0) / (q1 - q0);
            return row[j] + t * (row[j + 1] - row[j]);
        }
        // Four-point Lagrange in xi where the curvature is smooth: second differences of
        // the output in q stay consistent, which the HJB residual relies on. Near a kink
        // the linear rule above avoids overshoot.
        let t = s - j as f64;
        let (a, b, c, d) = (row[j - 1], row[j], row[j + 1], row[j + 2]);
        let wa = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let wb = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let wc = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let wd = (t + 1.0) * t * (t - 1.0) / 6.0;
        wa * a + wb * b + wc * c + wd * d
    }
}

struct NodeModel {
    a: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
    theta: Vec<f64>,
}

fn node_model(model: &MarketModel, x: &[f64]) -> Result<NodeModel> {
    let theta = model.market_price_of_risk(x)?;
    Ok(NodeModel { a: model.covariance(x), b: model.drift(x), s: model.volatility(x), theta })
}

/// Solves the dual equation backward from `w(T, x, q) = (q - g(x))^+` on a `q`-domain grid.
pub fn solve_dual_pde(
    model: &MarketModel,
    payoff: &Payoff,
    grid: &GridSpec,
    opts: &SolveOptions,
) -> Result<(Surface, SolveReport)> {
    grid.validate()?;
    let d = grid.dim();
    if model.dim() > 2 {
        return Err(Error::DimensionUnsupported(model.dim()));
    }
    if model.dim() != d {
        return Err(Error::GridMismatch(format!("model has {} stocks, grid has {d}", model.dim())));
    }
    if grid.axis != Domain::Q {
        return Err(Error::DomainMismatch { expected: "q", found: grid.axis.label() });
    }
    if grid.n_x.iter().any(|&n| n < 4) {
        return Err(Error::InvalidGrid("the dual solver needs at least 4 nodes per stock".into()));
    }
    if opts.xi_per_q == 0 || opts.substeps == 0 {
        return Err(Error::InvalidGrid("xi_per_q and substeps must be positive".into()));
    }
    let eps = grid.epsilon;
    let n_space = grid.n_space();
    let mut report = SolveReport { degenerate: eps == 0.0, ..Default::default() };
    if report.degenerate {
        report
            .warnings
            .push("epsilon = 0: the dual equation is degenerate, the result is the unregularized selection".into());
    }

    let nodes: Vec<NodeModel> = (0..n_space).map(|ys| node_model(model, &grid.x_at(ys))).collect::<Result<_>>()?;
    let g: Vec<f64> = (0..n_space).map(|ys| payoff.checked_value(&grid.x_at(ys))).collect::<Result<_>>()?;
    let h: Vec<f64> = (0..d).map(|k| grid.dy(k)).collect();

    // Aligned coordinate: phi and its derivatives at each stock node.
    let mut phi = vec![0.0; n_space];
    let mut grad = vec![vec![0.0; d]; n_space];
    let mut hess = vec![0.0; n_space];
    if d == 1 {
        let n = grid.n_x[0];
        for (ys, nm) in nodes.iter().enumerate() {
            if !(nm.a[0] > 0.0) {
                return Err(Error::SingularDiffusion { x: grid.x_at(ys), condition: f64::INFINITY });
            }
            grad[ys][0] = nm.b[0] / nm.a[0];
        }
        for i in 1..n {
            phi[i] = phi[i - 1] + 0.5 * h[0] * (grad[i - 1][0] + grad[i][0]);
        }
        for i in 0..n {
            hess[i] = if i == 0 {
                (-3.0 * grad[0][0] + 4.0 * grad[1][0] - grad[2][0]) / (2.0 * h[0])
            } else if i == n - 1 {
                (3.0 * grad[n - 1][0] - 4.0 * grad[n - 2][0] + grad[n - 3][0]) / (2.0 * h[0])
            } else {
                (grad[i + 1][0] - grad[i - 1][0]) / (2.0 * h[0])
            };
        }
    } else {
        let xc: Vec<f64> = (0..d).map(|k| (grid.x_min[k] * grid.x_max[k]).sqrt()).collect();
        let centre = node_model(model, &xc)?;
        let mut a = centre.a.clone();
        let mut dphi = centre.b.clone();
        if !linalg::solve_in_place(&mut a, &mut dphi, d) {
            return Err(Error::SingularDiffusion { x: xc, condition: f64::INFINITY });
        }
        for ys in 0..n_space {
            let y: Vec<f64> = grid.x_at(ys).iter().map(|x| x.ln()).collect();
            phi[ys] = dphi.iter().zip(&y).map(|(p, y)| p * y).sum();
            grad[ys] = dphi.clone();
        }
    }

    // Anchor phi so the payoff kink of the central node sits at xi = 0, which is a lattice
    // node; for g = x under the Bessel model every kink then lands on a node.
    let centre = grid.space_index(&grid.n_x.iter().map(|n| n / 2).collect::<Vec<_>>());
    if g[centre] > 0.0 {
        let shift = g[centre].ln() - phi[centre];
        phi.iter_mut().for_each(|p| *p += shift);
    }

    // Coefficients of the transformed operator.
    let x_nodes: Vec<Vec<f64>> = (0..d).map(|k| grid.x_nodes(k)).collect();
    let mut sy = vec![vec![Stencil::default(); n_space]; d];
    let mut sxi_coef = vec![(0.0, 0.0); n_space];
    let mut mixed_raw = vec![[0.0; 3]; n_space];
    for (ys, nm) in nodes.iter().enumerate() {
        let p = &grad[ys];
        let mut c = eps * eps;
        let mut resid = eps * eps;
        let mut mu = 0.0;
        for k in 0..d {
            c += nm.theta[k] * nm.theta[k];
            let st_p: f64 = (0..d).map(|i| nm.s[i * d + k] * p[i]).sum();
            resid += (nm.theta[k] - st_p).powi(2);
            mu += 0.5 * nm.a[k * d + k] * p[k];
            let ap: f64 = (0..d).map(|i| nm.a[k * d + i] * p[i]).sum();
            let m = nm.b[k] - ap;
            mixed_raw[ys][k] = if m.abs() <= 1e-13 * (1.0 + nm.b[k].abs()) { 0.0 } else { m };
        }
        if d == 2 {
            mixed_raw[ys][2] = nm.a[1];
        }
        if d == 1 {
            mu -= 0.5 * nm.a[0] * hess[ys];
        }
        mu -= 0.5 * c;
        sxi_coef[ys] = (0.5 * resid, mu);
        let mi = grid.space_multi_index(ys);
        for k in 0..d {
            let i = mi[k];
            if i == 0 || i + 1 == grid.n_x[k] {
                continue;
            }
            let xk = &x_nodes[k];
            sy[k][ys] = Stencil::log_diffusion(0.5 * nm.a[k * d + k], xk[i - 1], xk[i], xk[i + 1]);
        }
    }

    // Extent of the xi grid.
    let q_nodes = grid.axis_nodes();
    let q_first = q_nodes.iter().copied().find(|&q| q > 0.0).unwrap_or(grid.axis_max);
    let (phi_min, phi_max) = phi.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    let g_max = g.iter().copied().fold(0.0, f64::max);
    let xi_lo = q_first.ln() - phi_max - 2.0;
    let xi_hi = grid.axis_max.max(g_max).ln() - phi_min + 1.0;
    let target = (opts.xi_per_q * grid.n_axis).max(8);
    let hxi = (xi_hi - xi_lo) / (target - 1) as f64;
    let xi_lo = if xi_lo < 0.0 { (xi_lo / hxi).floor() * hxi } else { xi_lo };
    let nxi = ((xi_hi - xi_lo) / hxi).ceil() as usize + 1;
    let xi_hi = xi_lo + (nxi - 1) as f64 * hxi;
    report.xi_nodes = nxi;
    report.xi_range = (xi_lo, xi_hi);

    let mut stride = vec![nxi; d];
    for k in (0..d.saturating_sub(1)).rev() {
        stride[k] = stride[k + 1] * grid.n_x[k + 1];
    }
    let interior: Vec<bool> = (0..n_space)
        .map(|ys| grid.space_multi_index(ys).iter().zip(&grid.n_x).all(|(&i, &n)| i > 0 && i + 1 < n))
        .collect();

    let mut lat = Lattice {
        d,
        n: grid.n_x.clone(),
        stride,
        h: h.clone(),
        nxi,
        hxi,
        xi0: xi_lo,
        phi,
        x: x_nodes,
        interior,
        sy,
        sxi: sxi_coef.iter().map(|&(diff, mu)| Stencil::new(diff, mu, hxi)).collect(),
        mixed: None,
        dq_top: Vec::new(),
    };
    lat.dq_top = (0..n_space)
        .map(|ys| (lat.xi(nxi - 1) + lat.phi[ys]).exp() - (lat.xi(nxi - 2) + lat.phi[ys]).exp())
        .collect();

    // Explicit mixed terms and the step-size check they impose.
    let mut mixed_scale = 0.0f64;
    if mixed_raw.iter().any(|m| m.iter().any(|&v| v != 0.0)) {
        let scaled: Vec<[f64; 3]> = mixed_raw
            .iter()
            .map(|m| {
                let mut out = [0.0; 3];
                for k in 0..d {
                    out[k] = m[k] / (4.0 * lat.h[k] * hxi);
                }
                if d == 2 {
                    out[2] = m[2] / (4.0 * lat.h[0] * lat.h[1]);
                }
                out
            })
            .collect();
        mixed_scale = scaled.iter().map(|m| 4.0 * m.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
        lat.mixed = Some(scaled);
    }
    let dt_out = grid.dt();
    let mut substeps = opts.substeps;
    let mut cfl = mixed_scale * dt_out / substeps as f64;
    if cfl > opts.max_mixed_cfl {
        let factor = (cfl / opts.max_mixed_cfl).ceil() as usize;
        substeps *= factor;
        report.warnings.push(format!(
            "CFLWarning: explicit mixed-term number {cfl:.3} exceeds {}; using {substeps} substeps per interval",
            opts.max_mixed_cfl
        ));
        cfl = mixed_scale * dt_out / substeps as f64;
    }
    report.substeps = substeps;
    report.mixed_cfl = cfl;

    // Terminal condition on the lattice.
    let mut v = vec![0.0; lat.len()];
    for ys in 0..n_space {
        for j in 0..nxi {
            v[ys * nxi + j] = ((lat.xi(j) + lat.phi[ys]).exp() - g[ys]).max(0.0);
        }
    }
    lat.enforce_boundaries(&mut v);

    let n_axis = grid.n_axis;
    let mut values = vec![0.0; grid.len()];
    let last = grid.n_t - 1;
    for ys in 0..n_space {
        for (ia, &q) in q_nodes.iter().enumerate() {
            values[grid.index(last, ys, ia)] = (q - g[ys]).max(0.0);
        }
    }

    let theta_adi = if d == 1 { 0.5 } else { 2.0 / 3.0 };
    let dt = dt_out / substeps as f64;
    let len = lat.len();
    let mut av_dirs: Vec<Vec<f64>> = vec![vec![0.0; len]; d + 1];
    let mut av_mixed = vec![0.0; len];
    let mut y = vec![0.0; len];
    let mut buf = vec![0.0; len];
    let mut step = 0usize;
    for it in (0..last).rev() {
        for _ in 0..substeps {
            let th = if step < opts.rannacher_steps { 1.0 } else { theta_adi };
            for k in 0..d {
                lat.apply_y(k, &v, &mut av_dirs[k]);
            }
            lat.apply_xi(&v, &mut av_dirs[d]);
            lat.apply_mixed(&v, &mut av_mixed);
            y.par_iter_mut().enumerate().for_each(|(i, out)| {
                let mut acc = av_mixed[i];
                for a in &av_dirs {
                    acc += a[i];
                }
                *out = v[i] + dt * acc;
            });
            lat.enforce_boundaries(&mut y);
            for k in 0..=d {
                let a = &av_dirs[k];
                y.par_iter_mut().zip(a.par_iter()).for_each(|(out, a)| *out -= th * dt * a);
                if k < d {
                    lat.solve_y(k, th * dt, &mut y, &mut buf);
                } else {
                    lat.solve_xi(th * dt, &mut y);
                }
                lat.enforce_boundaries(&mut y);
            }
            std::mem::swap(&mut v, &mut y);
            step += 1;
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidGrid(format!("dual solve diverged at lattice node {i}")));
        }
        let slice: Vec<f64> = (0..n_space)
            .into_par_iter()
            .flat_map_iter(|ys| {
                let row = &v[ys * nxi..(ys + 1) * nxi];
                let lat = &lat;
                q_nodes.iter().map(move |&q| lat.sample(ys, row, q))
            })
            .collect();
        let start = grid.index(it, 0, 0);
        values[start..start + n_space * n_axis].copy_from_slice(&slice);
    }

    let surface = Surface::new(grid.clone(), values, model.name(), payoff.describe())?;
    Ok((surface, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles;

    fn bessel_grid(eps: f64, n_t: usize, n_x: usize, n_q: usize) -> GridSpec {
        GridSpec::dual_1d(1.0, n_t, (0.25, 4.0), n_x, (0.0, 4.0), n_q, eps)
    }

    fn max_err(s: &Surface, exact: impl Fn(f64, f64, f64) -> f64, q_lo: f64, q_hi: f64) -> f64 {
        let g = &s.grid;
        let qs = g.axis_nodes();
        let mut worst: f64 = 0.0;
        for it in [0, g.n_t / 2] {
            let tau = g.horizon - g.t(it);
            for ix in 1..g.n_x[0] - 1 {
                let x = g.x_at(ix)[0];
                if !(0.5..=2.0).contains(&x) {
                    continue;
                }
                for (ia, &q) in qs.iter().enumerate() {
                    if q < q_lo * x || q > q_hi * x {
                        continue;
                    }
                    worst = worst.max((s.get(it, ix, ia) - exact(x, q, tau)).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn bessel_matches_closed_form() {
        let eps = 0.1;
        let grid = bessel_grid(eps, 33, 65, 65);
        let (s, report) = solve_dual_pde(&MarketModel::bessel3(), &Payoff::identity(1), &grid, &SolveOptions::default()).unwrap();
        assert!(!report.degenerate);
        let err = max_err(&s, |x, q, tau| oracles::bessel_dual_regularized(x, q, eps, tau).unwrap(), 0.5, 2.0);
        assert!(err < 2e-3, "max error {err}");
    }

    #[test]
    fn terminal_slice_is_exact() {
        let grid = bessel_grid(0.1, 5, 9, 17);
        let (s, _) = solve_dual_pde(&MarketModel::bessel3(), &Payoff::identity(1), &grid, &SolveOptions::default()).unwrap();
        let last = grid.n_t - 1;
        for ix in 0..grid.n_space() {
            let x = grid.x_at(ix)[0];
            for (ia, q) in grid.axis_nodes().into_iter().enumerate() {
                assert_eq!(s.get(last, ix, ia), (q - x).max(0.0));
            }
        }
    }

    #[test]
    fn unregularized_bessel_is_flagged_and_stays_at_the_payoff() {
        let grid = bessel_grid(0.0, 9, 17, 33);
        let (s, report) = solve_dual_pde(&MarketModel::bessel3(), &Payoff::identity(1), &grid, &SolveOptions::default()).unwrap();
        assert!(report.degenerate);
        assert!(!report.warnings.is_empty());
        let err = max_err(&s, |x, q, _| oracles::bessel_dual(x, q).unwrap(), 0.25, 4.0);
        assert!(err < 1e-3, "max error {err}");
    }

    #[test]
    fn gbm_matches_closed_form() {
        let (b, vol, eps) = (0.1, 0.2, 0.1);
        let model = MarketModel::gbm_scalar(b, vol).unwrap();
        let grid = GridSpec::dual_1d(1.0, 33, (0.25, 4.0), 65, (0.0, 4.0), 65, eps);
        let (s, _) = solve_dual_pde(&model, &Payoff::identity(1), &grid, &SolveOptions::default()).unwrap();
        let err = max_err(&s, |x, q, tau| oracles::gbm_dual_regularized(x, q, b, vol, tau, eps).unwrap(), 0.5, 2.0);
        assert!(err < 2e-3, "max error {err}");
    }

    #[test]
    fn slices_are_monotone_lipschitz_and_bounded() {
        let grid = bessel_grid(0.2, 17, 33, 65);
        let (s, _) = solve_dual_pde(&MarketModel::bessel3(), &Payoff::identity(1), &grid, &SolveOptions::default()).unwrap();
        let qs = grid.axis_nodes();
        for it in 0..grid.n_t {
            for ix in 0..grid.n_space() {
                let w = s.slice(it, ix);
                for ia in 0..qs.len() {
                    assert!(w[ia] >= -1e-10 && w[ia] <= qs[ia] + 1e-10);
                    if ia > 0 {
                        let slope = (w[ia] - w[ia - 1]) / (qs[ia] - qs[ia - 1]);
                        assert!((-1e-6..=1.0 + 1e-6).contains(&slope), "slope {slope} at t{it} x{ix} q{ia}");
                    }
                }
            }
        }
    }

    #[test]
    fn two_stocks_match_the_product_oracle() {
        // Independent stocks with g = x_1 : the dual value only sees the first stock and
        // the total market price of risk.
        let model = MarketModel::gbm(vec![0.1, 0.05], vec![0.2, 0.0, 0.0, 0.25]).unwrap();
        let payoff = Payoff::linear(vec![1.0, 0.0]).unwrap();
        let grid = GridSpec {
            t0: 0.0,
            horizon: 0.5,
            n_t: 9,
            x_min: vec![0.25, 0.25],
            x_max: vec![4.0, 4.0],
            n_x: vec![25, 25],
            axis: Domain::Q,
            axis_min: 0.0,
            axis_max: 3.0,
            n_axis: 31,
            epsilon: 0.2,
        };
        let (s, report) = solve_dual_pde(&model, &payoff, &grid, &SolveOptions::default()).unwrap();
        assert!(report.mixed_cfl <= 1.0);
        // Z X_1 is lognormal with log-variance |s_1 - theta|^2 tau where theta = (0.5, 0.2).
        let (th1, th2) = (0.5, 0.2);
        let tau = 0.5;
        let var = ((0.2 - th1) * (0.2_f64 - th1) + th2 * th2) * tau + 0.04 * tau;
        let mut worst: f64 = 0.0;
        let iy = 12;
        for ix in 8..17 {
            let x = grid.x_at(grid.space_index(&[ix, iy]))[0];
            for (ia, q) in grid.axis_nodes().into_iter().enumerate() {
                if q < 0.5 * x || q > 2.0 * x {
                    continue;
                }
                let sd = var.sqrt();
                let dp = ((q / x).ln() + 0.5 * sd * sd) / sd;
                let exact = q * oracles::std_normal_cdf(dp) - x * oracles::std_normal_cdf(dp - sd);
                worst = worst.max((s.get(0, grid.space_index(&[ix, iy]), ia) - exact).abs());
            }
        }
        assert!(worst < 5e-3, "max error {worst}");
    }

    #[test]
    fn rejects_three_stocks_and_p_grids() {
        let model = MarketModel::gbm(vec![0.1; 3], vec![0.2, 0.0, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.2]).unwrap();
        let grid = GridSpec {
            t0: 0.0,
            horizon: 1.0,
            n_t: 3,
            x_min: vec![0.5; 3],
            x_max: vec![2.0; 3],
            n_x: vec![4; 3],
            axis: Domain::Q,
            axis_min: 0.0,
            axis_max: 2.0,
            n_axis: 4,
            epsilon: 0.1,
        };
        assert!(matches!(
            solve_dual_pde(&model, &Payoff::identity(3), &grid, &SolveOptions::default()),
            Err(Error::DimensionUnsupported(3))
        ));
        let g = bessel_grid(0.1, 5, 9, 9).with_p_axis(9);
        assert!(matches!(
            solve_dual_pde(&MarketModel::bessel3(), &Payoff::identity(1), &g, &SolveOptions::default()),
            Err(Error::DomainMismatch { .. })
        ));
    }
}
