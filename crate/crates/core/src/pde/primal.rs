//! From the dual surface `w(t, x, q)` to the primal `U(t, x, p) = sup_q {p q - w}`.

use rayon::prelude::*;

use super::{GridSpec, Surface};
use crate::duality::{convex_envelope, ConvexGridFunction, CubicConvex, Domain, SmoothConvex, DEFAULT_BOUNDARY_TOL};
use crate::error::{Error, Result};
use crate::market::Payoff;

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalOptions {
    pub n_p: usize,
    /// Convexity violations above this trigger the convex envelope of a slice.
    pub convexity_tol: f64,
    /// `p` within this distance of 1 may take its maximizer at `q_max`.
    pub boundary_tol: f64,
    /// Fail with `ArgmaxAtBoundary` instead of masking truncated nodes.
    pub strict: bool,
}

impl Default for PrimalOptions {
    fn default() -> Self {
        Self { n_p: 101, convexity_tol: 1e-8, boundary_tol: DEFAULT_BOUNDARY_TOL, strict: false }
    }
}

enum Recon {
    Cubic(CubicConvex),
    Smooth(SmoothConvex),
}

impl Recon {
    fn conjugate(&self, p: f64) -> (f64, f64) {
        match self {
            Recon::Cubic(c) => c.conjugate(p),
            Recon::Smooth(s) => s.conjugate(p),
        }
    }

    fn max_slope(&self) -> f64 {
        match self {
            Recon::Cubic(c) => c.max_slope(),
            Recon::Smooth(s) => s.max_slope(),
        }
    }
}

/// Conjugates every `(t, x)` slice of a `q`-domain surface.
///
/// Slices are reconstructed with end slopes clamped to `[0, 1]`: as a C2 cubic spline
/// when that spline is convex, otherwise as a C1 piecewise quadratic (slices still
/// carrying the payoff kink), so `D_p U` is continuous in `p`. Where the slope of `w` never reaches `p` on the grid
/// the maximizer is pinned at `q_max`; those nodes are listed in `truncated` (or rejected
/// in strict mode). The terminal slice is set to `p g(x)`.
pub fn dual_to_primal(w: &Surface, payoff: &Payoff, opts: &PrimalOptions) -> Result<Surface> {
    let gw = &w.grid;
    if gw.axis != Domain::Q {
        return Err(Error::DomainMismatch { expected: "q", found: gw.axis.label() });
    }
    let grid: GridSpec = gw.with_p_axis(opts.n_p);
    grid.validate()?;
    let q_nodes = gw.axis_nodes();
    let p_nodes = grid.axis_nodes();
    let n_space = gw.n_space();
    let last = gw.n_t - 1;

    let rows: Vec<(Vec<f64>, Vec<usize>)> = (0..gw.n_t * n_space)
        .into_par_iter()
        .map(|row| -> Result<(Vec<f64>, Vec<usize>)> {
            let (it, ix) = (row / n_space, row % n_space);
            if it == last {
                let g = payoff.checked_value(&gw.x_at(ix))?;
                return Ok((p_nodes.iter().map(|&p| p * g).collect(), Vec::new()));
            }
            let (out, cut) = conjugate_slice(&q_nodes, w.slice(it, ix), &p_nodes, opts)?;
            let cut = cut.into_iter().map(|ia| grid.index(it, ix, ia)).collect();
            Ok((out, cut))
        })
        .collect::<Result<_>>()?;

    let mut values = Vec::with_capacity(grid.len());
    let mut truncated = Vec::new();
    for (row, cut) in rows {
        values.extend(row);
        truncated.extend(cut);
    }
    let mut surface = Surface::new(grid, values, w.model.clone(), w.payoff.clone())?;
    surface.truncated = truncated;
    Ok(surface)
}

/// Conjugate of one `q`-slice at the given `p` nodes, as in [`dual_to_primal`].
/// Returns the values and the positions in `p_nodes` whose maximizer is pinned at `q_max`.
pub fn conjugate_slice(q_nodes: &[f64], w: &[f64], p_nodes: &[f64], opts: &PrimalOptions) -> Result<(Vec<f64>, Vec<usize>)> {
    let q_max = *q_nodes.last().ok_or_else(|| Error::InvalidGrid("empty q axis".into()))?;
    let mut f = ConvexGridFunction::new(q_nodes.to_vec(), w.to_vec(), Domain::Q)?;
    if !f.is_convex(opts.convexity_tol) {
        f = convex_envelope(&f);
    }
    let smooth = match CubicConvex::new(&f, Some((0.0, 1.0))) {
        Some(c) => Recon::Cubic(c),
        None => Recon::Smooth(SmoothConvex::new(&f, Some((0.0, 1.0)))),
    };
    let mut out = Vec::with_capacity(p_nodes.len());
    let mut cut = Vec::new();
    for (ia, &p) in p_nodes.iter().enumerate() {
        if p == 0.0 {
            out.push(0.0);
            continue;
        }
        let (value, arg) = smooth.conjugate(p);
        if arg >= q_max && p >= smooth.max_slope() && p < 1.0 - opts.boundary_tol {
            if opts.strict {
                return Err(Error::ArgmaxAtBoundary { p, q_max });
            }
            cut.push(ia);
        }
        out.push(value);
    }
    Ok((out, cut))
}
