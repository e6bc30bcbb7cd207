//! Discrete Legendre transforms between the probability variable `p` and the dual
//! variable `q`, convex envelopes, and a C1 convex reconstruction used to invert
//! `q -> D_q w` smoothly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximizers within this distance of `p = 1` may sit at `q_max`.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// `p` in `[0, 1]`.
    P,
    /// `q` in `[0, inf)`.
    Q,
}

impl Domain {
    pub fn label(self) -> &'static str {
        match self {
            Domain::P => "p",
            Domain::Q => "q",
        }
    }
}

/// A function sampled on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexGridFunction {
    axis: Vec<f64>,
    values: Vec<f64>,
    domain: Domain,
}

impl ConvexGridFunction {
    pub fn new(axis: Vec<f64>, values: Vec<f64>, domain: Domain) -> Result<Self> {
        if axis.len() != values.len() || axis.len() < 2 {
            return Err(Error::InvalidGrid(format!(
                "need matching axis and values of length >= 2, got {} and {}",
                axis.len(),
                values.len()
            )));
        }
        check_axis(&axis)?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value {v}")));
        }
        let (lo, hi) = (axis[0], axis[axis.len() - 1]);
        let inside = match domain {
            Domain::P => lo >= 0.0 && hi <= 1.0,
            Domain::Q => lo >= 0.0,
        };
        if !inside {
            return Err(Error::InvalidGrid(format!("axis [{lo}, {hi}] leaves the {} domain", domain.label())));
        }
        Ok(Self { axis, values, domain })
    }

    pub fn axis(&self) -> &[f64] {
        &self.axis
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.axis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axis.is_empty()
    }

    /// Secant slopes of consecutive cells.
    pub fn slopes(&self) -> Vec<f64> {
        secants(&self.axis, &self.values)
    }

    /// True if every divided second difference is `>= -tol`.
    pub fn is_convex(&self, tol: f64) -> bool {
        self.slopes().windows(2).all(|s| s[1] - s[0] >= -tol)
    }

    /// Linear interpolation, clamped to the end values outside the axis.
    pub fn interpolate(&self, x: f64) -> f64 {
        interp_linear(&self.axis, &self.values, x)
    }
}

fn check_axis(axis: &[f64]) -> Result<()> {
    if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidGrid("axis must be finite and strictly increasing".into()));
    }
    Ok(())
}

fn secants(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.windows(2).zip(y.windows(2)).map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0])).collect()
}

pub(crate) fn interp_linear(x: &[f64], y: &[f64], at: f64) -> f64 {
    let n = x.len();
    if at <= x[0] {
        return y[0];
    }
    if at >= x[n - 1] {
        return y[n - 1];
    }
    let i = x.partition_point(|&v| v <= at) - 1;
    let t = (at - x[i]) / (x[i + 1] - x[i]);
    y[i] + t * (y[i + 1] - y[i])
}

/// Indices of the lower convex hull (monotone chain).
fn lower_hull(x: &[f64], y: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (x[b] - x[a]) * (y[i] - y[a]) - (y[b] - y[a]) * (x[i] - x[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// Greatest convex minorant on the same grid.
pub fn convex_envelope(f: &ConvexGridFunction) -> ConvexGridFunction {
    let hull = lower_hull(&f.axis, &f.values);
    let hx: Vec<f64> = hull.iter().map(|&i| f.axis[i]).collect();
    let hy: Vec<f64> = hull.iter().map(|&i| f.values[i]).collect();
    let mut values: Vec<f64> = f.axis.iter().map(|&x| interp_linear(&hx, &hy, x)).collect();
    for &i in &hull {
        values[i] = f.values[i];
    }
    ConvexGridFunction { axis: f.axis.clone(), values, domain: f.domain }
}

/// `sup_j (s x_j - f_j)` for every ascending `s`, walking the hull once. Returns the
/// values and the hull index of each maximizer (smallest one on ties).
fn conjugate_walk(x: &[f64], y: &[f64], slopes_out: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let hull = lower_hull(x, y);
    let mut j = 0;
    let mut values = Vec::with_capacity(slopes_out.len());
    let mut arg = Vec::with_capacity(slopes_out.len());
    for &s in slopes_out {
        // advance while the next hull segment is flatter than s
        while j + 1 < hull.len() {
            let (a, b) = (hull[j], hull[j + 1]);
            if (y[b] - y[a]) / (x[b] - x[a]) < s {
                j += 1;
            } else {
                break;
            }
        }
        let i = hull[j];
        values.push(s * x[i] - y[i]);
        arg.push(i);
    }
    (values, arg)
}

fn check_domain(f: &ConvexGridFunction, expected: Domain) -> Result<()> {
    if f.domain != expected {
        return Err(Error::DomainMismatch { expected: expected.label(), found: f.domain.label() });
    }
    Ok(())
}

/// `w(q) = max_p (p q - U(p))` over the grid points of `u`.
pub fn legendre_p_to_q(u: &ConvexGridFunction, q_grid: &[f64]) -> Result<ConvexGridFunction> {
    check_domain(u, Domain::P)?;
    check_axis(q_grid)?;
    let (values, _) = conjugate_walk(&u.axis, &u.values, q_grid);
    ConvexGridFunction::new(q_grid.to_vec(), values, Domain::Q)
}

/// `U(p) = max_q (p q - w(q))` over the grid points of `w`; fails if the maximizer sits
/// at the last `q` node for some `p < 1 - DEFAULT_BOUNDARY_TOL`.
pub fn legendre_q_to_p(w: &ConvexGridFunction, p_grid: &[f64]) -> Result<ConvexGridFunction> {
    legendre_q_to_p_with_tol(w, p_grid, DEFAULT_BOUNDARY_TOL)
}

pub fn legendre_q_to_p_with_tol(w: &ConvexGridFunction, p_grid: &[f64], boundary_tol: f64) -> Result<ConvexGridFunction> {
    check_domain(w, Domain::Q)?;
    check_axis(p_grid)?;
    if p_grid[0] < 0.0 || p_grid[p_grid.len() - 1] > 1.0 {
        return Err(Error::InvalidGrid("p grid must lie in [0, 1]".into()));
    }
    let (values, arg) = conjugate_walk(&w.axis, &w.values, p_grid);
    let last = w.axis.len() - 1;
    for (&p, &i) in p_grid.iter().zip(&arg) {
        if i == last && p < 1.0 - boundary_tol {
            return Err(Error::ArgmaxAtBoundary { p, q_max: w.axis[last] });
        }
    }
    ConvexGridFunction::new(p_grid.to_vec(), values, Domain::P)
}

/// C1 convex piecewise-quadratic interpolant of convex data, one knot per cell.
///
/// Node slopes are the three-point derivative estimates (exact on quadratics); inside
/// each cell the derivative is piecewise linear, passing through the secant slope at
/// the knot, so the interpolant is convex whenever the data are.
#[derive(Debug, Clone)]
pub struct SmoothConvex {
    x: Vec<f64>,
    y: Vec<f64>,
    secant: Vec<f64>,
    node_slope: Vec<f64>,
    /// Knot offset from the left end of each cell.
    knot: Vec<f64>,
    /// Breakpoints of the piecewise-linear derivative.
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl SmoothConvex {
    /// `slope_bounds` clamps the end slopes, e.g. `(0, 1)` for a dual slice.
    pub fn new(f: &ConvexGridFunction, slope_bounds: Option<(f64, f64)>) -> Self {
        let x = f.axis.clone();
        let y = f.values.clone();
        let n = x.len();
        let s = secants(&x, &y);
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let mut d = vec![0.0; n];
        for j in 1..n - 1 {
            let raw = (h[j] * s[j - 1] + h[j - 1] * s[j]) / (h[j - 1] + h[j]);
            d[j] = raw.clamp(s[j - 1].min(s[j]), s[j - 1].max(s[j]));
        }
        if n == 2 {
            d[0] = s[0];
            d[1] = s[0];
        } else {
            d[0] = (s[0] - h[0] * (s[1] - s[0]) / (h[0] + h[1])).min(s[0]);
            d[n - 1] = (s[n - 2] + h[n - 2] * (s[n - 2] - s[n - 3]) / (h[n - 3] + h[n - 2])).max(s[n - 2]);
        }
        if let Some((lo, hi)) = slope_bounds {
            if s[0] >= lo {
                d[0] = d[0].max(lo);
            }
            if s[n - 2] <= hi {
                d[n - 1] = d[n - 1].min(hi);
            }
        }
        let mut knot = vec![0.0; n - 1];
        let mut dx = Vec::with_capacity(2 * n);
        let mut dy = Vec::with_capacity(2 * n);
        for j in 0..n - 1 {
            let span = d[j + 1] - d[j];
            knot[j] = if span > 0.0 { (h[j] * (d[j + 1] - s[j]) / span).clamp(0.0, h[j]) } else { 0.5 * h[j] };
            dx.push(x[j]);
            dy.push(d[j]);
            dx.push(x[j] + knot[j]);
            dy.push(s[j]);
        }
        dx.push(x[n - 1]);
        dy.push(d[n - 1]);
        Self { x, y, secant: s, node_slope: d, knot, dx, dy }
    }

    pub fn node_slopes(&self) -> &[f64] {
        &self.node_slope
    }

    fn cell(&self, at: f64) -> usize {
        (self.x.partition_point(|&v| v <= at).max(1) - 1).min(self.x.len() - 2)
    }

    pub fn value(&self, at: f64) -> f64 {
        let j = self.cell(at);
        let h = self.x[j + 1] - self.x[j];
        let (a, dl, dr, s) = (self.knot[j], self.node_slope[j], self.node_slope[j + 1], self.secant[j]);
        let t = at - self.x[j];
        if t <= a {
            let curv = if a > 0.0 { (s - dl) / a } else { 0.0 };
            self.y[j] + dl * t + 0.5 * curv * t * t
        } else {
            let base = self.y[j] + 0.5 * a * (dl + s);
            let u = t - a;
            let curv = if h - a > 0.0 { (dr - s) / (h - a) } else { 0.0 };
            base + s * u + 0.5 * curv * u * u
        }
    }

    pub fn derivative(&self, at: f64) -> f64 {
        interp_linear(&self.dx, &self.dy, at)
    }

    /// Smallest point where the derivative reaches `p`, clamped to the axis.
    pub fn derivative_inverse(&self, p: f64) -> f64 {
        let last = self.dy.len() - 1;
        if p <= self.dy[0] {
            return self.dx[0];
        }
        if p > self.dy[last] {
            return self.dx[last];
        }
        let i = self.dy.partition_point(|&v| v < p);
        let (x0, x1, y0, y1) = (self.dx[i - 1], self.dx[i], self.dy[i - 1], self.dy[i]);
        x0 + (p - y0) / (y1 - y0) * (x1 - x0)
    }

    /// Largest slope attained on the axis.
    pub fn max_slope(&self) -> f64 {
        self.dy[self.dy.len() - 1]
    }

    /// `sup_x (p x - f(x))` over the axis and its maximizer.
    pub fn conjugate(&self, p: f64) -> (f64, f64) {
        let arg = self.derivative_inverse(p);
        (p * arg - self.value(arg), arg)
    }
}

/// Largest negative spline curvature, relative to the largest curvature, treated as noise.
const NEGATIVE_CURVATURE_TOL: f64 = 1e-3;

/// Clamped C2 cubic spline of grid data, available only when it is convex.
///
/// Its second derivative is continuous, so `1 / f''` (the curvature of the conjugate)
/// carries no cell-to-cell jumps; `SmoothConvex` is the fallback for kinked data.
#[derive(Debug, Clone)]
pub struct CubicConvex {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the nodes.
    m: Vec<f64>,
    node_slope: Vec<f64>,
}

impl CubicConvex {
    /// End slopes are quadratic-exact one-sided estimates clamped to `slope_bounds`.
    /// Returns `None` if the spline has a clearly negative curvature somewhere.
    pub fn new(f: &ConvexGridFunction, slope_bounds: Option<(f64, f64)>) -> Option<Self> {
        let (x, y) = (f.axis.clone(), f.values.clone());
        let n = x.len();
        if n < 3 {
            return None;
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let s = secants(&x, &y);
        let mut d0 = s[0] - h[0] * (s[1] - s[0]) / (h[0] + h[1]);
        let mut dn = s[n - 2] + h[n - 2] * (s[n - 2] - s[n - 3]) / (h[n - 3] + h[n - 2]);
        if let Some((lo, hi)) = slope_bounds {
            d0 = d0.clamp(lo, hi);
            dn = dn.clamp(lo, hi);
        }
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut m = vec![0.0; n];
        diag[0] = 2.0 * h[0];
        upper[0] = h[0];
        m[0] = 6.0 * (s[0] - d0);
        for i in 1..n - 1 {
            lower[i] = h[i - 1];
            diag[i] = 2.0 * (h[i - 1] + h[i]);
            upper[i] = h[i];
            m[i] = 6.0 * (s[i] - s[i - 1]);
        }
        lower[n - 1] = h[n - 2];
        diag[n - 1] = 2.0 * h[n - 2];
        m[n - 1] = 6.0 * (dn - s[n - 2]);
        let mut scratch = vec![0.0; n];
        crate::linalg::solve_tridiagonal(&lower, &diag, &upper, &mut m, &mut scratch);
        // Nearly linear stretches leave curvatures at noise level with either sign; clip
        // those, but reject anything that looks like an actual kink.
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m.iter().any(|&v| !v.is_finite() || v < -NEGATIVE_CURVATURE_TOL * scale) {
            return None;
        }
        m.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut node_slope = Vec::with_capacity(n);
        for i in 0..n - 1 {
            node_slope.push(s[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0);
        }
        node_slope.push(s[n - 2] + h[n - 2] * (m[n - 2] + 2.0 * m[n - 1]) / 6.0);
        Some(Self { x, y, m, node_slope })
    }

    fn cell(&self, at: f64) -> usize {
        (self.x.partition_point(|&v| v <= at).max(1) - 1).min(self.x.len() - 2)
    }

    pub fn value(&self, at: f64) -> f64 {
        let i = self.cell(at);
        let h = self.x[i + 1] - self.x[i];
        let (a, b) = ((self.x[i + 1] - at) / h, (at - self.x[i]) / h);
        a * self.y[i] + b * self.y[i + 1] + h * h / 6.0 * ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1])
    }

    pub fn derivative(&self, at: f64) -> f64 {
        let i = self.cell(at);
        let h = self.x[i + 1] - self.x[i];
        let (a, b) = ((self.x[i + 1] - at) / h, (at - self.x[i]) / h);
        (self.y[i + 1] - self.y[i]) / h + h / 6.0 * (-(3.0 * a * a - 1.0) * self.m[i] + (3.0 * b * b - 1.0) * self.m[i + 1])
    }

    pub fn second_derivative(&self, at: f64) -> f64 {
        let i = self.cell(at);
        let h = self.x[i + 1] - self.x[i];
        ((self.x[i + 1] - at) * self.m[i] + (at - self.x[i]) * self.m[i + 1]) / h
    }

    pub fn max_slope(&self) -> f64 {
        self.node_slope[self.node_slope.len() - 1]
    }

    /// Smallest point where the derivative reaches `p`, clamped to the axis.
    pub fn derivative_inverse(&self, p: f64) -> f64 {
        let n = self.x.len();
        if p <= self.node_slope[0] {
            return self.x[0];
        }
        if p >= self.node_slope[n - 1] {
            return self.x[n - 1];
        }
        let i = (self.node_slope.partition_point(|&d| d < p).max(1) - 1).min(n - 2);
        let (mut lo, mut hi) = (self.x[i], self.x[i + 1]);
        let mut q = 0.5 * (lo + hi);
        for _ in 0..100 {
            let g = self.derivative(q) - p;
            if g > 0.0 {
                hi = q;
            } else {
                lo = q;
            }
            let curv = self.second_derivative(q);
            let newton = if curv > 0.0 { q - g / curv } else { f64::NAN };
            let next = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (next - q).abs() <= 1e-15 * (1.0 + q.abs()) || hi - lo <= 1e-15 * (1.0 + q.abs()) {
                q = next;
                break;
            }
            q = next;
        }
        q
    }

    pub fn conjugate(&self, p: f64) -> (f64, f64) {
        let arg = self.derivative_inverse(p);
        (p * arg - self.value(arg), arg)
    }
}

/// `H(p)`: the `q` at which `D_q w` crosses `p`, for a strictly convex slice.
pub fn derivative_inverse(w: &ConvexGridFunction, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::POutOfRange(p));
    }
    let s = w.slopes();
    if let Some(index) = s.windows(2).position(|s| !(s[1] > s[0])) {
        return Err(Error::NotStrictlyConvex { index: index + 1 });
    }
    let bounds = (w.domain == Domain::Q).then_some((0.0, 1.0));
    Ok(SmoothConvex::new(w, bounds).derivative_inverse(p))
}
